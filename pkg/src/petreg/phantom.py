"""Synthetic MRI/PET phantom pairs with exact ground truth, and TRE scoring.

The anatomy is an analytic function of fixed (MRI) world coordinates: a
soft-edged ellipsoidal body with three internal compartments and a smooth
tissue texture. The MRI samples it on thick slices (slab average over the
slice thickness). The PET sees the same anatomy at low uptake plus a few
small hot spots, pulled through the inverse of the true mapping
``x -> affine(warp(x))`` onto the PET grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .transform import AffineTransform, BSplineFFD, ComposedTransform, affine_from_prs
from .volume import Volume

__all__ = [
    "PhantomSpec",
    "GroundTruth",
    "make_pair",
    "random_spec",
    "evaluate",
    "tre",
    "write_truth",
]

EDGE_WIDTH = 0.8  # mm, soft boundary of every structure
WARP_SPACING = 4.0  # mm, control spacing of the synthetic warp
WARP_WAVELENGTH = (16.0, 28.0)  # mm


@dataclass(frozen=True)
class PhantomSpec:
    mri_dims: tuple = (128, 128, 7)
    mri_spacing: tuple = (0.27, 0.27, 3.0)
    pet_dims: tuple = (88, 88, 24)
    pet_spacing: tuple = (0.39, 0.39, 0.775)
    body_semi_axes: tuple = (6.5, 3.0, 4.5)
    n_hotspots: int = 3
    hotspot_radius: float = 0.75
    hotspot_ratio: float = 8.0
    # hot spots cluster in an off-centre "organ": centre and half-width relative to the body semi-axes
    hotspot_region: tuple = (0.5, 0.0, 0.0)
    hotspot_spread: float = 0.3
    noise_sigma: float = 0.03
    pet_noise_sigma: float = 0.03  # count-like: sigma * sqrt(activity / body uptake)
    texture_amplitude: float = 0.15
    seed: int = 0
    # true mapping, fixed -> moving
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    warp_max: float = 0.0
    mri_slab_samples: int = 5

    def __post_init__(self):
        if not self.hotspot_ratio > 1:
            raise ValueError(f"hotspot_ratio must exceed 1, got {self.hotspot_ratio}")
        if self.n_hotspots < 0:
            raise ValueError("n_hotspots must be >= 0")


@dataclass(eq=False)
class GroundTruth:
    affine: AffineTransform
    warp: BSplineFFD | None
    landmarks: np.ndarray  # fixed-space mm, (L, 3)
    landmark_images: np.ndarray = field(default=None)  # moving-space mm, (L, 3)

    def mapping(self) -> ComposedTransform:
        return ComposedTransform(self.affine, self.warp)

    def __post_init__(self):
        if self.landmark_images is None:
            self.landmark_images = self.mapping().apply(self.landmarks)


# Compartment layout relative to body semi-axes: centre, semi-axes, MRI and PET levels.
_COMPARTMENTS = (
    ((0.35, 0.25, 0.2), (0.35, 0.3, 0.4), 0.55, 0.45),
    ((-0.35, -0.15, -0.25), (0.3, 0.35, 0.35), 1.45, 1.35),
    ((0.0, -0.4, 0.35), (0.35, 0.22, 0.3), 0.8, 0.65),
)
_MRI_BODY = 1.0
_PET_BODY = 1.0


def _centered_origin(dims, spacing):
    return tuple(-(d - 1) * s / 2.0 for d, s in zip(dims, spacing))


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6 * t - 15) + 10)


def _ellipsoid(p, centre, semi):
    """Soft indicator of an ellipsoid, compactly supported, C2."""
    d = (p - np.asarray(centre)) / np.asarray(semi)
    r = np.sqrt(np.sum(d * d, axis=-1))
    scale = float(np.min(semi))
    return _smoothstep((1.0 - r) * scale / EDGE_WIDTH + 0.5)


class _Anatomy:
    def __init__(self, spec: PhantomSpec, rng):
        a = np.asarray(spec.body_semi_axes, dtype=float)
        self.semi = a
        self.comps = [(np.multiply(c, a), np.multiply(s, a), lm, lp) for c, s, lm, lp in _COMPARTMENTS]
        k = rng.normal(size=(4, 3))
        k /= np.linalg.norm(k, axis=1, keepdims=True)
        wavelengths = rng.uniform(4.0, 7.0, size=4)
        self.tex_k = k * (2 * np.pi / wavelengths)[:, None]
        self.tex_phase = rng.uniform(0, 2 * np.pi, size=4)
        self.tex_amp = spec.texture_amplitude
        self.hotspots = self._place_hotspots(spec, rng)
        self.hot_r = spec.hotspot_radius
        self.hot_level = spec.hotspot_ratio * _PET_BODY

    def _place_hotspots(self, spec, rng):
        out = []
        tries = 0
        while len(out) < spec.n_hotspots:
            tries += 1
            if tries > 1000:
                raise RuntimeError("could not place hot spots inside the body")
            p = (np.asarray(spec.hotspot_region) + spec.hotspot_spread * rng.uniform(-1, 1, size=3)) * self.semi
            if np.sum((p / self.semi) ** 2) > 0.75**2:
                continue
            if any(np.linalg.norm(p - q) < 2.5 * spec.hotspot_radius for q in out):
                continue
            out.append(p)
        return np.array(out).reshape(-1, 3)

    def texture(self, p):
        t = np.zeros(p.shape[:-1])
        for k, ph in zip(self.tex_k, self.tex_phase):
            t += np.cos(p @ k + ph)
        return 1.0 + self.tex_amp * t / 2.0

    def _levels(self, p, which):
        body = _ellipsoid(p, (0, 0, 0), self.semi)
        base = _MRI_BODY if which == "mri" else _PET_BODY
        level = np.full(p.shape[:-1], base)
        for c, s, lm, lp in self.comps:
            m = _ellipsoid(p, c, s)
            level += m * ((lm if which == "mri" else lp) - base)
        return body * level * self.texture(p)

    def mri(self, p):
        return self._levels(p, "mri")

    def pet(self, p):
        v = self._levels(p, "pet")
        for h in self.hotspots:
            m = _ellipsoid(p, h, (self.hot_r,) * 3)
            v = v + m * (self.hot_level - v)
        return v


def _make_warp(spec: PhantomSpec, rng) -> BSplineFFD | None:
    """Smooth in-plane, z-invariant warp: long-wavelength plane waves sampled at the control nodes."""
    if spec.warp_max <= 0:
        return None
    a = np.asarray(spec.body_semi_axes, dtype=float)
    h = WARP_SPACING
    ffd = BSplineFFD.for_domain(-(a + 2 * h), a + 2 * h, h)
    gx, gy, gz = ffd.grid_dims
    kz, ky, kx = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    nodes = ffd.grid_origin + np.stack([kx, ky, kz], axis=-1) * ffd.grid_spacing
    coeffs = np.zeros(ffd.coefficients.shape)
    for comp in (0, 1):
        for _ in range(3):
            d = np.append(rng.normal(size=2), 0.0)
            d /= np.linalg.norm(d)
            k = 2 * np.pi / rng.uniform(*WARP_WAVELENGTH)
            coeffs[..., comp] += rng.normal() * np.sin(k * nodes @ d + rng.uniform(0, 2 * np.pi))
    ffd = ffd.with_params(coeffs.ravel())
    probe = np.stack(np.meshgrid(*[np.linspace(-s, s, 15) for s in a], indexing="ij"), -1).reshape(-1, 3)
    probe = probe[np.sum((probe / a) ** 2, axis=1) <= 1.0]
    dmax = np.linalg.norm(ffd.displacement(probe, outside="zero"), axis=1).max()
    return ffd.with_params(coeffs.ravel() * (spec.warp_max / dmax))


def _invert_warp(warp: BSplineFFD, y, n_iter=60):
    """Solve ``x + d(x) = y`` by fixed-point iteration."""
    x = y.copy()
    for _ in range(n_iter):
        x_new = y - warp.displacement(x, outside="zero")
        if np.max(np.abs(x_new - x)) < 1e-10:
            return x_new
        x = x_new
    return x


def _landmarks(spec: PhantomSpec):
    a = np.asarray(spec.body_semi_axes, dtype=float)
    xs = np.linspace(-0.5, 0.5, 5) * a[0]
    ys = np.linspace(-0.5, 0.5, 5) * a[1]
    zs = np.linspace(-0.5, 0.5, 3) * a[2]
    z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def make_pair(spec: PhantomSpec):
    """Generate ``(mri, pet, truth)``; deterministic for a given spec."""
    rng = np.random.default_rng(spec.seed)
    anat = _Anatomy(spec, rng)
    affine = affine_from_prs(np.deg2rad(spec.rotation_deg), spec.translation, spec.scale, (0, 0, 0), (0, 0, 0))
    warp = _make_warp(spec, rng)

    mri_grid = Volume(np.zeros(spec.mri_dims[::-1]), spec.mri_spacing, _centered_origin(spec.mri_dims, spec.mri_spacing))
    pts = mri_grid.world_grid()
    n_sub = max(1, spec.mri_slab_samples)
    offsets = ((np.arange(n_sub) + 0.5) / n_sub - 0.5) * spec.mri_spacing[2]
    mri = np.zeros(len(pts))
    for dz in offsets:
        mri += anat.mri(pts + np.array([0.0, 0.0, dz]))
    mri /= n_sub
    mri += rng.normal(scale=spec.noise_sigma * _MRI_BODY, size=mri.shape)
    mri = np.clip(mri, 0.0, None)

    pet_grid = Volume(np.zeros(spec.pet_dims[::-1]), spec.pet_spacing, _centered_origin(spec.pet_dims, spec.pet_spacing))
    y = pet_grid.world_grid()
    x = affine.inverse().apply(y)
    if warp is not None:
        x = _invert_warp(warp, x)
    pet = anat.pet(x)
    active = pet > 0
    sd = spec.pet_noise_sigma * np.sqrt(_PET_BODY * pet[active])
    pet[active] += sd * rng.standard_normal(int(active.sum()))
    pet = np.clip(pet, 0.0, None)

    mri_vol = mri_grid.with_data(mri.reshape(mri_grid.data.shape))
    pet_vol = pet_grid.with_data(pet.reshape(pet_grid.data.shape))
    truth = GroundTruth(affine, warp, _landmarks(spec))
    return mri_vol, pet_vol, truth


def random_spec(seed: int, max_translation=10.0, max_rotation_deg=15.0, max_tilt_deg=4.0,
                max_z_translation=1.5, scale_range=(0.9, 1.1), warp_max=0.0, **kw) -> PhantomSpec:
    """Phantom spec with a seeded random misalignment.

    In-plane rotation up to ``max_rotation_deg``, tilts up to ``max_tilt_deg``,
    translation norm up to ``max_translation`` with the z part capped by
    ``max_z_translation`` (the thick MRI slab offers little z support).
    """
    rng = np.random.default_rng(10_000 + seed)
    rz = rng.uniform(-max_rotation_deg, max_rotation_deg)
    rx, ry = rng.uniform(-max_tilt_deg, max_tilt_deg, size=2)
    tz = rng.uniform(-max_z_translation, max_z_translation)
    r_max = np.sqrt(max(max_translation**2 - tz**2, 0.0))
    r = rng.uniform(0.0, r_max)
    phi = rng.uniform(0, 2 * np.pi)
    t = (r * np.cos(phi), r * np.sin(phi), tz)
    s = tuple(rng.uniform(*scale_range, size=3))
    return PhantomSpec(seed=seed, rotation_deg=(rx, ry, rz), translation=t, scale=s, warp_max=warp_max, **kw)


def tre(mapping, truth: GroundTruth) -> np.ndarray:
    """Per-landmark distance between ``mapping(landmark)`` and its true image (mm)."""
    got = mapping.apply(truth.landmarks)
    return np.linalg.norm(got - truth.landmark_images, axis=1)


@dataclass
class EvaluationReport:
    mean_tre: float
    max_tre: float
    matrix_delta: float
    translation_delta: float
    seconds: float

    def as_dict(self):
        return dict(self.__dict__)


def evaluate(result, truth: GroundTruth, seconds: float | None = None) -> EvaluationReport:
    """Score a registration result (or any transform with ``apply``) against the truth."""
    if hasattr(result, "affine") and hasattr(result, "ffd"):
        mapping = ComposedTransform(result.affine, result.ffd)
        affine = result.affine
        if seconds is None:
            seconds = float(sum(getattr(result, "timings", {}).values()))
    else:
        mapping = result
        affine = getattr(result, "affine", result)
    err = tre(mapping, truth)
    ta = truth.affine.recentered(np.zeros(3))
    ra = affine.recentered(np.zeros(3)) if isinstance(affine, AffineTransform) else ta
    return EvaluationReport(
        mean_tre=float(err.mean()),
        max_tre=float(err.max()),
        matrix_delta=float(np.abs(ra.matrix - ta.matrix).max()),
        translation_delta=float(np.linalg.norm(ra.translation - ta.translation)),
        seconds=float(seconds or 0.0),
    )


def write_truth(truth: GroundTruth, out_dir, prefix="truth") -> list:
    """Write the true affine/warp and landmark list; returns the written paths."""
    import os

    from .transform import write_transform

    paths = []
    p = os.path.join(out_dir, f"{prefix}_affine.txt")
    write_transform(p, truth.affine)
    paths.append(p)
    if truth.warp is not None:
        p = os.path.join(out_dir, f"{prefix}_bspline.txt")
        write_transform(p, truth.warp)
        paths.append(p)
    p = os.path.join(out_dir, f"{prefix}_landmarks.txt")
    with open(p, "w", newline="\n") as fh:
        fh.write("# fixed_x fixed_y fixed_z moving_x moving_y moving_z (mm)\n")
        for a, b in zip(truth.landmarks, truth.landmark_images):
            fh.write(" ".join(repr(float(v)) for v in (*a, *b)) + "\n")
    paths.append(p)
    return paths
