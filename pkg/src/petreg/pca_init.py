"""Principal-axes (intensity moment) initialisation of the affine transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .transform import AffineTransform
from .volume import Volume

__all__ = ["PrincipalAxes", "background_floor", "intensity_moments", "principal_axes", "initial_affine", "volume_axes"]


@dataclass(frozen=True, eq=False)
class PrincipalAxes:
    centroid: np.ndarray
    axes: np.ndarray  # columns, descending eigenvalue
    eigenvalues: np.ndarray

    def format(self) -> str:
        rows = ["centroid " + " ".join(f"{v:.9g}" for v in self.centroid)]
        for i in range(3):
            rows.append(f"axis{i + 1} " + " ".join(f"{v:.9g}" for v in self.axes[:, i]))
        rows.append("eigenvalues " + " ".join(f"{v:.9g}" for v in self.eigenvalues))
        return "\n".join(rows)


def background_floor(vol: Volume, border: int = 2, quantile: float = 0.999) -> float:
    """Background level: a high quantile of the in-plane border shell.

    Only the x/y faces are used; thick-slice volumes may have too few slices
    for a z border to be background.
    """
    d = vol.data
    b = max(1, min(border, d.shape[1] // 4, d.shape[2] // 4))
    shell = np.concatenate([
        d[:, :b, :].ravel(), d[:, -b:, :].ravel(), d[:, b:-b, :b].ravel(), d[:, b:-b, -b:].ravel(),
    ])
    return float(np.quantile(shell, quantile))


def intensity_moments(vol: Volume, threshold: float | None = None, floor: float = 0.0):
    """Intensity-weighted centroid (mm) and covariance (mm^2).

    Weights are ``max(I - floor, 0)``. With ``threshold`` they are binarised
    instead: 1 where intensity exceeds it.
    """
    w = vol.data.ravel()
    if threshold is not None:
        w = (w > threshold).astype(float)
    else:
        w = np.maximum(w - floor, 0.0) if floor else w
    if not np.any(w > 0):
        raise ValueError("intensity moments need at least one voxel with positive weight")
    wsum = w.sum()
    nx, ny, nz = vol.dims
    # separable sums avoid materialising the full coordinate grid
    w3 = w.reshape(nz, ny, nx)
    xs = vol.origin[0] + np.arange(nx) * vol.spacing[0]
    ys = vol.origin[1] + np.arange(ny) * vol.spacing[1]
    zs = vol.origin[2] + np.arange(nz) * vol.spacing[2]
    c = np.array([
        np.einsum("kji,i->", w3, xs),
        np.einsum("kji,j->", w3, ys),
        np.einsum("kji,k->", w3, zs),
    ]) / wsum
    dx, dy, dz = xs - c[0], ys - c[1], zs - c[2]
    cov = np.empty((3, 3))
    cov[0, 0] = np.einsum("kji,i,i->", w3, dx, dx)
    cov[1, 1] = np.einsum("kji,j,j->", w3, dy, dy)
    cov[2, 2] = np.einsum("kji,k,k->", w3, dz, dz)
    cov[0, 1] = cov[1, 0] = np.einsum("kji,i,j->", w3, dx, dy)
    cov[0, 2] = cov[2, 0] = np.einsum("kji,i,k->", w3, dx, dz)
    cov[1, 2] = cov[2, 1] = np.einsum("kji,j,k->", w3, dy, dz)
    return c, cov / wsum


def principal_axes(centroid, covariance) -> PrincipalAxes:
    """Eigen-decompose ``covariance`` into a deterministic right-handed frame.

    Each eigenvector is signed so its largest-magnitude component is positive;
    the third axis is then replaced by ``axis1 x axis2``.
    """
    cov = np.asarray(covariance, dtype=float)
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    for i in range(3):
        j = np.argmax(np.abs(vecs[:, i]))
        if vecs[j, i] < 0:
            vecs[:, i] = -vecs[:, i]
    vecs[:, 2] = np.cross(vecs[:, 0], vecs[:, 1])
    return PrincipalAxes(np.asarray(centroid, dtype=float).copy(), vecs, vals)


def volume_axes(vol: Volume, threshold: float | None = None, floor: float = 0.0) -> PrincipalAxes:
    return principal_axes(*intensity_moments(vol, threshold, floor))


def initial_affine(fixed: PrincipalAxes, moving: PrincipalAxes) -> AffineTransform:
    """Rotation + translation taking the fixed frame onto the moving frame.

    The transform is centred on the fixed centroid, which it maps to the
    moving centroid.
    """
    R = moving.axes @ fixed.axes.T
    t = moving.centroid - fixed.centroid
    return AffineTransform(R, t, fixed.centroid)
