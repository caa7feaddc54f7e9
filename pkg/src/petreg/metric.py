"""Parzen-window joint histogram, entropies, (normalised) mutual information.

The joint density follows the Mattes construction: each sampled fixed
intensity falls into a single bin (zero-order kernel) while the interpolated
moving intensity is spread over four bins by a cubic B-spline kernel. The
moving kernel makes the histogram, and so the NMI, differentiable in the
transform parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interpolation import SplineCoefficients, evaluate, prefilter
from .transform import BSplineFFD, cubic_basis
from .volume import Volume

__all__ = [
    "MetricConfig",
    "JointHistogram",
    "DegenerateOverlapError",
    "DegenerateMetricError",
    "NMIMetric",
    "build_histogram",
    "entropy",
    "mutual_information",
    "normalized_mutual_information",
    "metric_and_gradient",
]

PADDING = 2
EDGE_TOL = 1e-9  # bins


class DegenerateOverlapError(RuntimeError):
    """Too few fixed samples map inside the moving volume."""


class DegenerateMetricError(ValueError):
    """Joint entropy is zero, NMI undefined."""


@dataclass
class MetricConfig:
    bins: int = 50
    sample_fraction: float = 1.0
    rng_seed: int = 0
    min_overlap_fraction: float = 0.25

    def __post_init__(self):
        if self.bins < 4 + 2 * PADDING:
            raise ValueError(f"bins must be >= {4 + 2 * PADDING}, got {self.bins}")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        if not 0 <= self.min_overlap_fraction <= 1:
            raise ValueError(f"min_overlap_fraction must be in [0, 1], got {self.min_overlap_fraction}")


@dataclass
class JointHistogram:
    """Normalised joint density ``joint[k, l]`` (fixed bin k, moving bin l)."""

    joint: np.ndarray
    n_samples: int

    @property
    def bins(self) -> int:
        return self.joint.shape[0]

    @property
    def marg_fixed(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    @property
    def marg_moving(self) -> np.ndarray:
        return self.joint.sum(axis=0)

    def entropies(self):
        """``(H(X), H(Y), H(X,Y))`` in nats."""
        return entropy(self.marg_fixed), entropy(self.marg_moving), entropy(self.joint)


def entropy(p) -> float:
    """Shannon entropy ``-sum p log p`` in nats, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def mutual_information(h: JointHistogram) -> float:
    hx, hy, hxy = h.entropies()
    return hx + hy - hxy


def normalized_mutual_information(h: JointHistogram) -> float:
    hx, hy, hxy = h.entropies()
    if hxy <= 0:
        raise DegenerateMetricError("joint entropy is zero (both images constant); NMI undefined")
    return (hx + hy) / hxy


def _bin_width(lo, hi, n_bins):
    width = (hi - lo) / n_bins
    return width if width > 0 else 1.0


class NMIMetric:
    """Negated NMI between a fixed volume and a B-spline-interpolated moving volume.

    Fixed samples, their bins and the intensity-to-bin maps are prepared once
    so the cost is a deterministic, smooth function of the transform.

    Parameters
    ----------
    fixed : Volume
    moving : Volume or SplineCoefficients
    cfg : MetricConfig
    """

    def __init__(self, fixed: Volume, moving, cfg: MetricConfig | None = None):
        self.cfg = cfg = cfg or MetricConfig()
        self.coeffs = moving if isinstance(moving, SplineCoefficients) else prefilter(moving)
        B = cfg.bins
        n = fixed.data.size
        if cfg.sample_fraction < 1.0:
            rng = np.random.default_rng(cfg.rng_seed)
            m = max(1, int(round(cfg.sample_fraction * n)))
            idx = np.sort(rng.choice(n, size=m, replace=False))
        else:
            idx = np.arange(n)
        self.sample_index = idx
        self.points = np.ascontiguousarray(fixed.world_grid()[idx])
        fvals = fixed.data.ravel()[idx]

        fmin, fmax = float(fixed.data.min()), float(fixed.data.max())
        self.fixed_bin_width = _bin_width(fmin, fmax, B - 2 * PADDING)
        k = PADDING + np.floor((fvals - fmin) / self.fixed_bin_width).astype(np.int64)
        self.fixed_bins = np.clip(k, PADDING, B - PADDING - 1)

        mmin, mmax = self.coeffs.value_range
        self.moving_min = mmin
        self.moving_bin_width = _bin_width(mmin, mmax, B - 2 * PADDING - 1)

    @property
    def n_sampled(self) -> int:
        return len(self.sample_index)

    # -- internals ---------------------------------------------------------

    def _map(self, transform):
        if isinstance(transform, BSplineFFD):
            return transform.apply(self.points, outside="zero")
        return transform.apply(self.points)

    def _samples(self, transform, gradient):
        y = self._map(transform)
        q = self.coeffs.world_to_index(y)
        vals, grads, inside = evaluate(self.coeffs, q, gradient=gradient)
        n_in = int(inside.sum())
        if n_in == 0 or n_in < self.cfg.min_overlap_fraction * self.n_sampled:
            raise DegenerateOverlapError(
                f"only {n_in} of {self.n_sampled} samples overlap the moving volume "
                f"(minimum fraction {self.cfg.min_overlap_fraction})"
            )
        B = self.cfg.bins
        xi = PADDING + (vals[inside] - self.moving_min) / self.moving_bin_width
        lo, hi = float(PADDING), float(B - PADDING - 1)
        # samples reproducing the data extremes sit on the edges up to roundoff; keep them differentiable
        free = (xi > lo - EDGE_TOL) & (xi < hi + EDGE_TOL)
        xi = np.clip(xi, lo, hi)
        fl = np.floor(xi)
        fl = np.minimum(fl, hi - 1.0)  # keep t in [0, 1] at the top edge
        t = xi - fl
        return inside, grads, fl.astype(np.int64), t, free

    def _histogram(self, k, fl, t, n_in):
        B = self.cfg.bins
        w = cubic_basis(t)
        joint = np.zeros(B * B)
        for i in range(4):
            joint += np.bincount(k * B + fl - 1 + i, weights=w[:, i], minlength=B * B)
        return JointHistogram(joint.reshape(B, B) / n_in, n_in)

    # -- public ------------------------------------------------------------

    def histogram(self, transform) -> JointHistogram:
        inside, _, fl, t, _ = self._samples(transform, gradient=False)
        return self._histogram(self.fixed_bins[inside], fl, t, int(inside.sum()))

    def value(self, transform) -> float:
        return -normalized_mutual_information(self.histogram(transform))

    def value_and_gradient(self, transform):
        """Return ``(-NMI, d(-NMI)/d params)`` for ``transform.to_params()``."""
        inside, grads, fl, t, free = self._samples(transform, gradient=True)
        k = self.fixed_bins[inside]
        n_in = int(inside.sum())
        h = self._histogram(k, fl, t, n_in)
        hx, hy, hxy = h.entropies()
        if hxy <= 0:
            raise DegenerateMetricError("joint entropy is zero (both images constant); NMI undefined")
        cost = -(hx + hy) / hxy

        with np.errstate(divide="ignore"):
            log_joint = np.where(h.joint > 0, np.log(h.joint), 0.0)
            log_my = np.where(h.marg_moving > 0, np.log(h.marg_moving), 0.0)
        _, dw = cubic_basis(t, derivative=True)
        a = 1.0 / hxy
        b = (hx + hy) / (hxy * hxy)
        dxi = np.zeros(n_in)
        for i in range(4):
            lbin = fl - 1 + i
            dxi += dw[:, i] * (a * log_my[lbin] - b * log_joint[k, lbin])
        dxi *= free / (n_in * self.moving_bin_width)

        vec = np.zeros((self.n_sampled, 3))
        vec[inside] = dxi[:, None] * grads[inside]
        grad = transform.param_gradient(self.points, vec)
        return cost, grad


def build_histogram(fixed: Volume, moving_coeffs, t, cfg: MetricConfig | None = None) -> JointHistogram:
    return NMIMetric(fixed, moving_coeffs, cfg).histogram(t)


def metric_and_gradient(fixed: Volume, moving_coeffs, t, cfg: MetricConfig | None = None):
    """One-shot ``(-NMI, gradient)``; use :class:`NMIMetric` for repeated calls."""
    return NMIMetric(fixed, moving_coeffs, cfg).value_and_gradient(t)
