"""PET intensity remapping and slice-thickness harmonisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume

__all__ = ["SigmoidParams", "sigmoid_transform", "auto_sigmoid_params", "harmonize_slices", "slab_average_z"]


@dataclass(frozen=True)
class SigmoidParams:
    """Logistic remap ``out_min + (out_max - out_min) / (1 + exp(-(I - beta) / alpha))``.

    ``alpha`` sets the width of the emphasised input band and ``beta`` its centre.
    """

    alpha: float
    beta: float
    out_min: float = 0.0
    out_max: float = 1.0

    def __post_init__(self):
        if self.alpha == 0:
            raise ValueError("sigmoid alpha must be nonzero")
        if not self.out_max > self.out_min:
            raise ValueError(f"sigmoid out_max ({self.out_max}) must exceed out_min ({self.out_min})")


def _logistic(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_transform(vol: Volume, p: SigmoidParams) -> Volume:
    """Apply the sigmoid intensity map voxelwise; geometry is unchanged."""
    x = (vol.data - p.beta) / p.alpha
    return vol.with_data((p.out_max - p.out_min) * _logistic(x) + p.out_min)


def auto_sigmoid_params(vol: Volume, low_pct: float = 0.02, high_pct: float = 0.50) -> SigmoidParams:
    """Choose sigmoid parameters that stretch a percentile band of the nonzero voxels.

    ``beta`` is the intensity at the mid percentile and ``alpha`` spreads the
    band over +-3 alpha. Output range is ``[0, max(vol)]``.
    """
    if not 0.0 <= low_pct < high_pct <= 1.0:
        raise ValueError(f"need 0 <= low_pct < high_pct <= 1, got {low_pct}, {high_pct}")
    vals = vol.data[vol.data != 0]
    if vals.size == 0:
        raise ValueError("cannot derive sigmoid parameters from an all-zero volume")
    lo, mid, hi = np.quantile(vals, [low_pct, 0.5 * (low_pct + high_pct), high_pct])
    vmax = float(vol.data.max())
    vmin = float(vol.data.min())
    span = vmax - vmin if vmax > vmin else max(abs(vmax), 1.0)
    alpha = max((hi - lo) / 6.0, 1e-9 * span)
    out_max = vmax if vmax > 0 else 1.0
    return SigmoidParams(alpha=float(alpha), beta=float(mid), out_min=0.0, out_max=out_max)


def slab_average_z(vol: Volume, new_dz: float) -> Volume:
    """Resample along z to spacing ``new_dz`` by overlap-weighted slab averaging.

    Each input slice covers ``[z - dz/2, z + dz/2]``; an output slice averages
    the inputs it overlaps, weighted by overlap length. The origin is kept.
    """
    dz = vol.spacing[2]
    nz = vol.dims[2]
    n_new = int(np.floor((nz - 1) * dz / new_dz + 1e-9)) + 1
    z_in = np.arange(nz) * dz
    z_out = np.arange(n_new) * new_dz
    lo = np.maximum(z_out[:, None] - new_dz / 2, z_in[None, :] - dz / 2)
    hi = np.minimum(z_out[:, None] + new_dz / 2, z_in[None, :] + dz / 2)
    w = np.clip(hi - lo, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    data = np.tensordot(w, vol.data, axes=(1, 0))
    return Volume(data, (vol.spacing[0], vol.spacing[1], new_dz), vol.origin)


def harmonize_slices(a: Volume, b: Volume):
    """Bring both volumes to the thicker of their two z-spacings.

    The thicker-sliced volume is returned untouched; the other is slab-averaged
    along z. x/y sampling is never changed.
    """
    da, db = a.spacing[2], b.spacing[2]
    if np.isclose(da, db, rtol=1e-9, atol=0):
        return a, b
    if da > db:
        return a, slab_average_z(b, da)
    return slab_average_z(a, db), b
