"""Multi-resolution two-stage registration: global affine, then B-spline FFD.

The sigmoid-remapped PET drives PCA initialisation and the affine search
only; the original PET intensities are what the local stage and the final
resampling see.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .interpolation import prefilter, resample, slab_samples_for
from .metric import DegenerateOverlapError, MetricConfig, NMIMetric
from .optimize import OptReport, lbfgs_bounded, regular_step_gd
from .pca_init import background_floor, initial_affine, volume_axes
from .preprocess import SigmoidParams, auto_sigmoid_params, harmonize_slices, sigmoid_transform
from .transform import AffineTransform, BSplineFFD, ComposedTransform
from .volume import BoundingBox, Volume, extract_voi

__all__ = [
    "PyramidSchedule",
    "RegistrationConfig",
    "RegistrationResult",
    "StageReport",
    "build_pyramid",
    "default_grid_spacing",
    "pca_initialization",
    "register_global",
    "register_local",
    "local_moving",
    "register_full",
    "fuse",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PyramidSchedule:
    """Per level ``(shrink xyz, gaussian sigma xyz in voxels)``, coarse to fine."""

    levels: tuple = (
        ((4, 4, 1), (2.0, 2.0, 0.0)),
        ((2, 2, 1), (1.0, 1.0, 0.0)),
        ((1, 1, 1), (0.0, 0.0, 0.0)),
    )

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        for shrink, sigma in self.levels:
            if any(int(s) < 1 for s in shrink) or any(float(g) < 0 for g in sigma):
                raise ValueError(f"invalid pyramid level {shrink}, {sigma}")

    @classmethod
    def from_shrinks(cls, shrinks):
        """Levels with ``sigma = shrink / 2`` on shrunk axes and 0 elsewhere."""
        return cls(tuple((tuple(s), tuple(0.5 * v if v > 1 else 0.0 for v in s)) for s in shrinks))

    def __len__(self):
        return len(self.levels)


def build_pyramid(vol: Volume, schedule: PyramidSchedule | None = None) -> list:
    """Smooth (separable Gaussian, truncated at 4 sigma) and subsample per level."""
    schedule = schedule or PyramidSchedule()
    out = []
    for shrink, sigma in schedule.levels:
        shrink = tuple(int(s) for s in shrink)
        if any(s > d for s, d in zip(shrink, vol.dims)):
            raise ValueError(f"shrink {shrink} exceeds volume dims {vol.dims}")
        data = vol.data
        for axis_xyz, g in enumerate(sigma):
            if g > 0:
                data = gaussian_filter1d(data, g, axis=2 - axis_xyz, mode="mirror", truncate=4.0)
        data = data[:: shrink[2], :: shrink[1], :: shrink[0]]
        spacing = tuple(sp * s for sp, s in zip(vol.spacing, shrink))
        out.append(Volume(data, spacing, vol.origin))
    return out


def default_grid_spacing(fixed: Volume) -> np.ndarray:
    """Finest FFD control spacing: extent / 8, but never finer than two voxels."""
    ext = np.maximum(fixed.extent, np.asarray(fixed.spacing))
    return np.maximum(ext / 8.0, 2.0 * np.asarray(fixed.spacing))


@dataclass
class RegistrationConfig:
    schedule: PyramidSchedule = field(default_factory=PyramidSchedule)
    bins: int = 50
    sample_fraction_full: float = 0.2
    sample_fraction_coarse: float = 1.0
    seed: int = 0
    min_overlap_fraction: float = 0.25
    # global stage
    sigmoid: object = "auto"  # "auto", SigmoidParams or None
    sigmoid_low_pct: float = 0.02
    sigmoid_high_pct: float = 0.50
    pca_threshold: float | None = None
    pca_background: bool = True  # subtract the border-shell background level before moments
    max_step: float = 0.05
    min_step: float = 3e-4
    relaxation: float = 0.5
    gd_max_iters: int = 100
    # local stage
    global_only: bool = False
    grid_spacing: object = None  # None -> default_grid_spacing
    lbfgs_memory: int = 5
    lbfgs_max_iters: int = 40
    lbfgs_grad_tol: float = 1e-6
    lbfgs_cost_tol: float = 1e-7
    lbfgs_initial_step: float = 0.25  # first trial step, in units of the control spacing
    local_margin: float = 2.0  # moving-grid padding for the local stage, in final control spacings
    fuse_mode: str = "checkerboard"

    def metric_config(self, level: int, n_levels: int) -> MetricConfig:
        frac = self.sample_fraction_full if level == n_levels - 1 else self.sample_fraction_coarse
        return MetricConfig(self.bins, frac, self.seed + level, self.min_overlap_fraction)


@dataclass
class StageReport:
    stage: str
    level: int
    report: OptReport
    seconds: float

    def as_dict(self):
        r = self.report
        return {
            "stage": self.stage,
            "level": self.level,
            "iterations": r.iterations,
            "evaluations": r.n_evals,
            "initial_cost": r.initial_cost,
            "final_cost": r.final_cost,
            "stop_reason": r.stop_reason,
            "seconds": round(self.seconds, 4),
        }


@dataclass(eq=False)
class RegistrationResult:
    affine: AffineTransform
    ffd: BSplineFFD | None
    registered_pet: Volume
    reports: list
    timings: dict
    initial_affine: AffineTransform | None = None
    fused: Volume | None = None

    def mapping(self) -> ComposedTransform:
        return ComposedTransform(self.affine, self.ffd)


def _resolve_sigmoid(sigmoid, pet: Volume, cfg: RegistrationConfig):
    if sigmoid is None or sigmoid is False:
        return None
    if isinstance(sigmoid, SigmoidParams):
        return sigmoid
    if sigmoid == "auto" or sigmoid is True:
        return auto_sigmoid_params(pet, cfg.sigmoid_low_pct, cfg.sigmoid_high_pct)
    raise ValueError(f"unsupported sigmoid setting {sigmoid!r}")


def _axes(vol: Volume, cfg: RegistrationConfig):
    if cfg.pca_threshold is not None:
        return volume_axes(vol, cfg.pca_threshold)
    return volume_axes(vol, floor=background_floor(vol) if cfg.pca_background else 0.0)


def pca_initialization(mri: Volume, pet: Volume, sigmoid="auto", cfg: RegistrationConfig | None = None):
    """Prepared global-stage inputs: ``(mri_h, pet_for_global, initial_affine)``.

    ``pet_for_global`` is the slice-harmonised PET after the optional sigmoid.
    """
    cfg = cfg or RegistrationConfig()
    params = _resolve_sigmoid(sigmoid, pet, cfg)
    pet_s = sigmoid_transform(pet, params) if params is not None else pet
    mri_h, pet_g = harmonize_slices(mri, pet_s)
    fixed_axes = _axes(mri_h, cfg)
    moving_axes = _axes(pet_g, cfg)
    return mri_h, pet_g, initial_affine(fixed_axes, moving_axes)


def _cost(metric: NMIMetric, base):
    """Cost closure over ``base.with_params``; lost overlap counts as an infeasible point."""

    def fun(p):
        try:
            return metric.value_and_gradient(base.with_params(p))
        except DegenerateOverlapError:
            return np.inf, np.zeros(len(p))

    return fun


def _affine_scales(fixed: Volume) -> np.ndarray:
    extent = float(np.max(np.asarray(fixed.dims) * np.asarray(fixed.spacing)))
    return np.concatenate([np.ones(9), np.full(3, 1.0 / extent)])


def _optimize_affine(fixed_levels, moving_levels, init: AffineTransform, cfg: RegistrationConfig):
    reports = []
    current = init
    n = len(fixed_levels)
    scales = _affine_scales(fixed_levels[-1])
    for level, (f, m) in enumerate(zip(fixed_levels, moving_levels)):
        t0 = time.perf_counter()
        metric = NMIMetric(f, m, cfg.metric_config(level, n))
        fun = _cost(metric, current)
        max_step = cfg.max_step / 2**level
        min_step = min(cfg.min_step, 0.5 * max_step)
        rep = regular_step_gd(
            fun, current.to_params(), max_step=max_step, min_step=min_step,
            relaxation=cfg.relaxation, max_iters=cfg.gd_max_iters, scales=scales,
        )
        current = current.with_params(rep.final_params)
        reports.append(StageReport("global", level, rep, time.perf_counter() - t0))
        log.info("global level %d: %d its, cost %.5f -> %.5f (%s)", level, rep.iterations,
                 rep.initial_cost, rep.final_cost, rep.stop_reason)
    return current, reports


def register_global(mri: Volume, pet: Volume, sigmoid="auto", cfg: RegistrationConfig | None = None):
    """PCA-initialised multi-resolution affine registration.

    Returns ``(affine, reports)``; the affine maps MRI world points to PET world points.
    """
    cfg = cfg or RegistrationConfig()
    mri_h, pet_g, init = pca_initialization(mri, pet, sigmoid, cfg)
    affine, reports = _optimize_affine(
        build_pyramid(mri_h, cfg.schedule), build_pyramid(pet_g, cfg.schedule), init, cfg
    )
    return affine, reports


def _grid_spacing(cfg: RegistrationConfig, fixed: Volume) -> np.ndarray:
    if cfg.grid_spacing is None:
        return default_grid_spacing(fixed)
    return np.broadcast_to(np.asarray(cfg.grid_spacing, dtype=float), (3,)).copy()


def local_moving(pet: Volume, affine: AffineTransform, mri: Volume, cfg: RegistrationConfig | None = None,
                 coeffs=None) -> Volume:
    """Original PET pulled through ``affine`` onto a padded copy of the MRI grid.

    The padding (``cfg.local_margin`` final control spacings per side) keeps
    deformed sample points inside the moving volume, so the metric cannot
    improve by pushing samples out of the overlap. Each voxel averages the PET
    over the MRI slice thickness.
    """
    cfg = cfg or RegistrationConfig()
    sp = np.asarray(mri.spacing)
    pad = np.ceil(cfg.local_margin * _grid_spacing(cfg, mri) / sp).astype(int)
    dims = tuple(int(d) for d in np.asarray(mri.dims) + 2 * pad)
    origin = tuple(np.asarray(mri.origin) - pad * sp)
    return resample(pet, affine, (dims, mri.spacing, origin), coeffs=coeffs,
                    slab_samples=slab_samples_for(mri.spacing[2], pet.spacing[2]))


def register_local(mri: Volume, moving: Volume, cfg: RegistrationConfig | None = None):
    """Multi-resolution B-spline FFD registration of ``moving``, already affinely aligned.

    The control grid doubles in density per pyramid level and is warm-started
    by exact dyadic refinement. Returns ``(ffd, reports)``.
    """
    cfg = cfg or RegistrationConfig()
    fixed_levels = build_pyramid(mri, cfg.schedule)
    moving_levels = build_pyramid(moving, cfg.schedule)
    n = len(fixed_levels)
    h_final = _grid_spacing(cfg, mri)
    lo = np.asarray(mri.origin)
    hi = lo + mri.extent
    ffd = BSplineFFD.for_domain(lo, hi, h_final * 2 ** (n - 1))
    reports = []
    for level, (f, m) in enumerate(zip(fixed_levels, moving_levels)):
        if level > 0:
            ffd = ffd.refine()
        t0 = time.perf_counter()
        metric = NMIMetric(f, m, cfg.metric_config(level, n))
        fun = _cost(metric, ffd)
        bound = np.broadcast_to(2.0 * ffd.grid_spacing, ffd.coefficients.shape).ravel()
        init = np.clip(ffd.to_params(), -bound, bound)
        rep = lbfgs_bounded(
            fun, init, -bound, bound, memory=cfg.lbfgs_memory, grad_tol=cfg.lbfgs_grad_tol,
            max_iters=cfg.lbfgs_max_iters, cost_tol=cfg.lbfgs_cost_tol,
            initial_step=cfg.lbfgs_initial_step * float(np.min(ffd.grid_spacing)),
        )
        ffd = ffd.with_params(rep.final_params)
        reports.append(StageReport("local", level, rep, time.perf_counter() - t0))
        log.info("local level %d: %d its, cost %.5f -> %.5f (%s)", level, rep.iterations,
                 rep.initial_cost, rep.final_cost, rep.stop_reason)
    return ffd, reports


def fuse(mri: Volume, pet: Volume, mode: str = "checkerboard", tile: int = 8) -> Volume:
    """Fused display volume; both inputs are first normalised to [0, 1]."""
    if not mri.same_geometry(pet):
        raise ValueError("fuse needs volumes of identical geometry")

    def norm(v):
        lo, hi = float(v.data.min()), float(v.data.max())
        return (v.data - lo) / (hi - lo) if hi > lo else np.zeros_like(v.data)

    a, b = norm(mri), norm(pet)
    if mode == "alpha":
        return mri.with_data(0.5 * a + 0.5 * b)
    if mode == "checkerboard":
        k, j, i = np.indices(a.shape)
        from_mri = ((i // tile + j // tile + k // tile) % 2) == 0
        return mri.with_data(np.where(from_mri, a, b))
    raise ValueError(f"unknown fuse mode {mode!r}")


def register_full(mri: Volume, pet: Volume, voi_mri: BoundingBox | None = None,
                  voi_pet: BoundingBox | None = None, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Complete two-stage registration of ``pet`` onto ``mri``."""
    cfg = cfg or RegistrationConfig()
    timings = {}
    if voi_mri is not None:
        mri = extract_voi(mri, voi_mri)
    if voi_pet is not None:
        pet = extract_voi(pet, voi_pet)

    t0 = time.perf_counter()
    mri_h, pet_g, init = pca_initialization(mri, pet, cfg.sigmoid, cfg)
    affine, reports = _optimize_affine(
        build_pyramid(mri_h, cfg.schedule), build_pyramid(pet_g, cfg.schedule), init, cfg
    )
    timings["global"] = time.perf_counter() - t0

    pet_coeffs = prefilter(pet)
    ffd = None
    if not cfg.global_only:
        t0 = time.perf_counter()
        pet_global = local_moving(pet, affine, mri, cfg, coeffs=pet_coeffs)
        ffd, local_reports = register_local(mri, pet_global, cfg)
        reports += local_reports
        timings["local"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    mapping = ComposedTransform(affine, ffd)
    registered = resample(pet, mapping, mri, coeffs=pet_coeffs,
                          slab_samples=slab_samples_for(mri.spacing[2], pet.spacing[2]))
    fused = fuse(mri, registered, cfg.fuse_mode)
    timings["resample"] = time.perf_counter() - t0
    if ffd is None:
        lo = np.asarray(mri.origin)
        ffd = BSplineFFD.for_domain(lo, lo + mri.extent, _grid_spacing(cfg, mri))
    return RegistrationResult(affine, ffd, registered, reports, timings, init, fused)
