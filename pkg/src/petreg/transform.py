"""Affine (12 DOF) and cubic B-spline free-form deformation transforms.

All transforms map *fixed* world points (mm) to *moving* world points,
which is the direction needed to pull moving intensities onto the fixed grid.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np

__all__ = [
    "AffineTransform",
    "BSplineFFD",
    "ComposedTransform",
    "OutsideSupportError",
    "affine_from_prs",
    "cubic_basis",
    "euler_matrix",
    "read_transform",
    "write_transform",
]


class OutsideSupportError(ValueError):
    """A point lies outside the control lattice's valid support."""


# --------------------------------------------------------------------------
# cubic B-spline basis

def cubic_basis(u, derivative=False):
    """Uniform cubic B-spline blending weights ``B0..B3`` at ``u`` in [0, 1).

    Works elementwise; the weights are stacked on a trailing axis of length 4.
    With ``derivative=True`` returns ``(weights, dweights/du)``.
    """
    u = np.asarray(u, dtype=float)
    u2 = u * u
    u3 = u2 * u
    omu = 1.0 - u
    w = np.stack(
        [omu**3 / 6.0, (3 * u3 - 6 * u2 + 4) / 6.0, (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0, u3 / 6.0],
        axis=-1,
    )
    if not derivative:
        return w
    dw = np.stack(
        [-(omu**2) / 2.0, (3 * u2 - 4 * u) / 2.0, (-3 * u2 + 2 * u + 1) / 2.0, u2 / 2.0],
        axis=-1,
    )
    return w, dw


@numba.njit(cache=True, inline="always")
def _basis4(t, out):
    omt = 1.0 - t
    t2 = t * t
    t3 = t2 * t
    out[0] = omt * omt * omt / 6.0
    out[1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    out[2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    out[3] = t3 / 6.0


# --------------------------------------------------------------------------
# affine

def euler_matrix(angles) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for angles ``(rx, ry, rz)`` in radians."""
    rx, ry, rz = angles
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """``y = matrix @ (x - center) + center + translation``.

    The parameter vector is the row-major matrix followed by the translation,
    ``[m11, m12, m13, m21, ..., m33, t1, t2, t3]``; the center is fixed metadata.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    n_params = 12

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        c = np.array(self.center, dtype=float).reshape(3)
        for a in (m, t, c):
            a.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "center", c)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3), center)

    @classmethod
    def from_params(cls, params, center=(0.0, 0.0, 0.0)) -> "AffineTransform":
        p = np.asarray(params, dtype=float)
        if p.shape != (12,):
            raise ValueError(f"affine needs 12 parameters, got {p.shape}")
        return cls(p[:9].reshape(3, 3), p[9:], center)

    def to_params(self) -> np.ndarray:
        return np.concatenate([self.matrix.ravel(), self.translation])

    def with_params(self, params) -> "AffineTransform":
        return AffineTransform.from_params(params, self.center)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - self.center) @ self.matrix.T + self.center + self.translation

    __call__ = apply

    def homogeneous(self) -> np.ndarray:
        """Equivalent 4x4 matrix acting on ``(x, y, z, 1)``."""
        h = np.eye(4)
        h[:3, :3] = self.matrix
        h[:3, 3] = self.center + self.translation - self.matrix @ self.center
        return h

    def recentered(self, center) -> "AffineTransform":
        """Same mapping expressed about a different center."""
        c = np.asarray(center, dtype=float)
        t = self.matrix @ (c - self.center) + self.center + self.translation - c
        return AffineTransform(self.matrix, t, c)

    def inverse(self) -> "AffineTransform":
        det = np.linalg.det(self.matrix)
        if abs(det) <= 1e-12:
            raise np.linalg.LinAlgError(f"affine matrix is singular (det={det:g})")
        minv = np.linalg.inv(self.matrix)
        # y = M(x-c)+c+t  =>  x = Minv(y - c - t) + c, expressed about c' = c + t
        c2 = self.center + self.translation
        return AffineTransform(minv, self.center - c2, c2)

    def param_gradient(self, points, vectors) -> np.ndarray:
        """``sum_s J_s^T v_s`` where ``J_s = d apply(points[s]) / d params``."""
        d = np.asarray(points, dtype=float) - self.center
        v = np.asarray(vectors, dtype=float)
        gm = v.T @ d
        return np.concatenate([gm.ravel(), v.sum(axis=0)])


def affine_from_prs(rotation, translation, scale=(1, 1, 1), shear=(0, 0, 0), center=(0, 0, 0)) -> AffineTransform:
    """Build ``matrix = Rz Ry Rx @ H(shear) @ diag(scale)``.

    ``H`` is unit upper-triangular with ``shear = (h_xy, h_xz, h_yz)`` above
    the diagonal.
    """
    scale = np.asarray(scale, dtype=float)
    if np.any(scale == 0):
        raise ValueError(f"scale components must be nonzero, got {scale}")
    hxy, hxz, hyz = shear
    H = np.array([[1.0, hxy, hxz], [0.0, 1.0, hyz], [0.0, 0.0, 1.0]])
    m = euler_matrix(rotation) @ H @ np.diag(scale)
    return AffineTransform(m, translation, center)


# --------------------------------------------------------------------------
# B-spline FFD kernels

@numba.njit(cache=True)
def _lattice_coords(p, go, gh, gdims, base, frac):
    """Fill base index / fraction per axis; False when outside the support."""
    inside = True
    for a in range(3):
        u = (p[a] - go[a]) / gh[a]
        hi = gdims[a] - 2.0
        if u < 1.0 - 1e-9 or u > hi + 1e-9:
            inside = False
        fl = np.floor(u)
        b = int(fl)
        if b > gdims[a] - 3:
            b = gdims[a] - 3
        if b < 1:
            b = 1
        base[a] = b - 1
        frac[a] = u - b
    return inside


@numba.njit(cache=True)
def _ffd_displacement(points, coeffs, go, gh, gdims):
    n = points.shape[0]
    out = np.zeros((n, 3))
    inside = np.zeros(n, dtype=np.bool_)
    base = np.empty(3, dtype=np.int64)
    frac = np.empty(3)
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for s in range(n):
        ok = _lattice_coords(points[s], go, gh, gdims, base, frac)
        inside[s] = ok
        if not ok:
            continue
        _basis4(frac[0], wx)
        _basis4(frac[1], wy)
        _basis4(frac[2], wz)
        dx = 0.0
        dy = 0.0
        dz = 0.0
        for c in range(4):
            kz = base[2] + c
            for b in range(4):
                ky = base[1] + b
                wzy = wz[c] * wy[b]
                for a in range(4):
                    w = wzy * wx[a]
                    kx = base[0] + a
                    dx += w * coeffs[kz, ky, kx, 0]
                    dy += w * coeffs[kz, ky, kx, 1]
                    dz += w * coeffs[kz, ky, kx, 2]
        out[s, 0] = dx
        out[s, 1] = dy
        out[s, 2] = dz
    return out, inside


@numba.njit(cache=True)
def _ffd_param_gradient(points, vectors, go, gh, gdims):
    grad = np.zeros((gdims[2], gdims[1], gdims[0], 3))
    base = np.empty(3, dtype=np.int64)
    frac = np.empty(3)
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for s in range(points.shape[0]):
        ok = _lattice_coords(points[s], go, gh, gdims, base, frac)
        if not ok:
            continue
        vx = vectors[s, 0]
        vy = vectors[s, 1]
        vz = vectors[s, 2]
        if vx == 0.0 and vy == 0.0 and vz == 0.0:
            continue
        _basis4(frac[0], wx)
        _basis4(frac[1], wy)
        _basis4(frac[2], wz)
        for c in range(4):
            kz = base[2] + c
            for b in range(4):
                ky = base[1] + b
                wzy = wz[c] * wy[b]
                for a in range(4):
                    w = wzy * wx[a]
                    kx = base[0] + a
                    grad[kz, ky, kx, 0] += w * vx
                    grad[kz, ky, kx, 1] += w * vy
                    grad[kz, ky, kx, 2] += w * vz
    return grad


def _refine_matrix(n_coarse, n_fine):
    """Dyadic subdivision: coarse node j sits on fine node 2j - 1."""
    mask = {-2: 1 / 8, -1: 4 / 8, 0: 6 / 8, 1: 4 / 8, 2: 1 / 8}
    R = np.zeros((n_fine, n_coarse))
    for j in range(n_coarse):
        centre = 2 * j - 1
        for off, w in mask.items():
            i = centre + off
            if 0 <= i < n_fine:
                R[i, j] = w
    return R


@dataclass(frozen=True, eq=False)
class BSplineFFD:
    """Cubic B-spline displacement field on a regular control lattice.

    ``coefficients`` has shape ``(gz, gy, gx, 3)`` (x-fastest node order)
    and holds control-point displacements in mm. Node ``(a, b, c)`` sits at
    ``grid_origin + (a, b, c) * grid_spacing``. Points are supported where
    every lattice coordinate lies in ``[1, g - 2]``.
    """

    grid_origin: np.ndarray
    grid_spacing: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        go = np.array(self.grid_origin, dtype=float).reshape(3)
        gh = np.array(self.grid_spacing, dtype=float).reshape(3)
        c = np.array(self.coefficients, dtype=float, order="C")
        if c.ndim != 4 or c.shape[3] != 3:
            raise ValueError(f"coefficients must have shape (gz, gy, gx, 3), got {c.shape}")
        if min(c.shape[:3]) < 4:
            raise ValueError(f"control lattice needs >= 4 nodes per axis, got {c.shape[:3][::-1]}")
        if np.any(gh <= 0):
            raise ValueError(f"grid spacing must be positive, got {gh}")
        for a in (go, gh, c):
            a.flags.writeable = False
        object.__setattr__(self, "grid_origin", go)
        object.__setattr__(self, "grid_spacing", gh)
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def for_domain(cls, lo, hi, spacing) -> "BSplineFFD":
        """Zero field covering the box ``[lo, hi]`` with one node of margin."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        h = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
        n_cells = np.maximum(np.ceil((hi - lo) / h - 1e-9), 1).astype(int)
        gdims = n_cells + 3
        return cls(lo - h, h, np.zeros((gdims[2], gdims[1], gdims[0], 3)))

    @property
    def grid_dims(self) -> tuple:
        gz, gy, gx = self.coefficients.shape[:3]
        return (gx, gy, gz)

    @property
    def n_params(self) -> int:
        return self.coefficients.size

    def to_params(self) -> np.ndarray:
        return self.coefficients.ravel().copy()

    def with_params(self, params) -> "BSplineFFD":
        c = np.asarray(params, dtype=float).reshape(self.coefficients.shape)
        return BSplineFFD(self.grid_origin, self.grid_spacing, c)

    def _gdims(self):
        return np.array(self.grid_dims, dtype=np.int64)

    def displacement(self, points, outside="error"):
        """Displacement at ``points`` (``(N, 3)``).

        ``outside`` selects the policy for unsupported points: ``"error"``
        raises, ``"zero"`` returns zero displacement, ``"flag"`` returns
        ``(displacement, inside_mask)``.
        """
        p = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
        d, inside = _ffd_displacement(p, self.coefficients, self.grid_origin, self.grid_spacing, self._gdims())
        if outside == "flag":
            return d, inside
        if outside == "error" and not inside.all():
            bad = p[~inside][0]
            raise OutsideSupportError(f"point {bad} lies outside the B-spline support")
        return d

    def apply(self, points, outside="error") -> np.ndarray:
        p = np.asarray(points, dtype=float)
        d = self.displacement(np.atleast_2d(p), outside=outside)
        return (np.atleast_2d(p) + d).reshape(p.shape)

    __call__ = apply

    def weights(self, point) -> dict:
        """Nonzero basis weights at ``point`` keyed by node ``(a, b, c)``."""
        p = np.asarray(point, dtype=float)
        u = (p - self.grid_origin) / self.grid_spacing
        g = np.array(self.grid_dims)
        if np.any(u < 1 - 1e-9) or np.any(u > g - 2 + 1e-9):
            raise OutsideSupportError(f"point {p} lies outside the B-spline support")
        base = np.clip(np.floor(u).astype(int), 1, g - 3)
        w = cubic_basis(u - base)
        out = {}
        for c in range(4):
            for b in range(4):
                for a in range(4):
                    wt = w[0, a] * w[1, b] * w[2, c]
                    if wt != 0.0:
                        out[(base[0] - 1 + a, base[1] - 1 + b, base[2] - 1 + c)] = wt
        return out

    def param_gradient(self, points, vectors) -> np.ndarray:
        """``sum_s J_s^T v_s`` flattened like :meth:`to_params`; unsupported points contribute 0."""
        p = np.ascontiguousarray(np.asarray(points, dtype=float))
        v = np.ascontiguousarray(np.asarray(vectors, dtype=float))
        g = _ffd_param_gradient(p, v, self.grid_origin, self.grid_spacing, self._gdims())
        return g.ravel()

    def refine(self) -> "BSplineFFD":
        """Exact representation of the same field on a lattice of half spacing."""
        gx, gy, gz = self.grid_dims
        h = self.grid_spacing / 2.0
        go = self.grid_origin + h
        n_cells = np.array([gx, gy, gz]) - 3
        fine = 2 * n_cells + 3
        c = self.coefficients
        c = np.einsum("ij,abjd->abid", _refine_matrix(gx, fine[0]), c)
        c = np.einsum("ij,ajbd->aibd", _refine_matrix(gy, fine[1]), c)
        c = np.einsum("ij,jabd->iabd", _refine_matrix(gz, fine[2]), c)
        return BSplineFFD(go, h, c)

    def max_displacement(self) -> float:
        return float(np.abs(self.coefficients).max()) if self.coefficients.size else 0.0


@dataclass(frozen=True)
class ComposedTransform:
    """``affine(ffd(x))``: local deformation first, then the global affine."""

    affine: AffineTransform
    ffd: BSplineFFD | None = None

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        if self.ffd is not None:
            p = self.ffd.apply(p, outside="zero")
        return self.affine.apply(p)

    __call__ = apply


# --------------------------------------------------------------------------
# text I/O

def _line(values):
    return " ".join(repr(float(v)) for v in values)


def write_transform(path, t) -> None:
    """Write an affine or B-spline transform in the plain-text format."""
    if isinstance(t, AffineTransform):
        lines = ["affine", _line(t.center), _line(t.to_params())]
    elif isinstance(t, BSplineFFD):
        lines = [
            "bspline",
            "origin " + _line(t.grid_origin),
            "spacing " + _line(t.grid_spacing),
            "dims " + " ".join(str(d) for d in t.grid_dims),
        ]
        lines += [_line(row) for row in t.coefficients.reshape(-1, 3)]
    else:
        raise TypeError(f"cannot serialise {type(t).__name__}")
    with open(os.fspath(path), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _floats(line, n, what):
    try:
        vals = [float(v) for v in line.split()]
    except ValueError:
        raise ValueError(f"{what}: non-numeric entry in {line!r}") from None
    if len(vals) != n:
        raise ValueError(f"{what}: expected {n} values, got {len(vals)}")
    return vals


def read_transform(path):
    """Inverse of :func:`write_transform`."""
    with open(os.fspath(path)) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty transform file")
    kind = lines[0]
    if kind == "affine":
        if len(lines) != 3:
            raise ValueError(f"{path}: affine file needs 3 lines, got {len(lines)}")
        center = _floats(lines[1], 3, "affine center")
        params = _floats(lines[2], 12, "affine parameters")
        return AffineTransform.from_params(params, center)
    if kind == "bspline":
        head = {}
        for ln in lines[1:4]:
            key, _, rest = ln.partition(" ")
            head[key] = rest
        for key in ("origin", "spacing", "dims"):
            if key not in head:
                raise ValueError(f"{path}: bspline header is missing '{key}'")
        origin = _floats(head["origin"], 3, "bspline origin")
        spacing = _floats(head["spacing"], 3, "bspline spacing")
        gx, gy, gz = (int(v) for v in _floats(head["dims"], 3, "bspline dims"))
        rows = lines[4:]
        if len(rows) != gx * gy * gz:
            raise ValueError(f"{path}: expected {gx * gy * gz} coefficient rows, got {len(rows)}")
        coeffs = np.array([_floats(r, 3, "bspline coefficient") for r in rows]).reshape(gz, gy, gx, 3)
        return BSplineFFD(origin, spacing, coeffs)
    raise ValueError(f"{path}: unknown transform kind {kind!r}")
