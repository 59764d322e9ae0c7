"""Synthetic paired T1-MRI / amyloid-PET subjects.

Each subject is a set of soft-edged ellipsoids (scalp, brain, white matter,
ventricles, cerebellum).  Atrophy enlarges the ventricles and darkens the
cortex on MRI; amyloid burden raises cortical PET uptake.  Both are drawn
from a shared severity that depends on cognitive status, so MRI carries
information about PET.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .transform import AffineTransform
from .volume import DynamicSeries, Mask3D, MaskLabel, Volume3D, resample_affine

MIN_DIM = 16
DEFAULT_NOISE = 0.02

# Normalized-coordinate geometry: (center, radii).  y runs posterior->anterior,
# z inferior->superior.
BRAIN = ((0.0, 0.0, 0.04), (0.58, 0.74, 0.48))
SCALP_INNER = 1.22
SCALP_OUTER = 1.34
WM_SCALE = 0.68
VENTRICLES = (((-0.12, 0.02, 0.08), (0.07, 0.20, 0.10)),
              ((0.12, 0.02, 0.08), (0.07, 0.20, 0.10)))
CEREBELLUM = ((0.0, -0.42, -0.16), (0.30, 0.18, 0.13))

# T1-like intensities.
MRI_GM, MRI_WM, MRI_CSF, MRI_CB, MRI_SCALP = 0.6, 1.0, 0.15, 0.7, 0.4
# PiB-like uptake before reference scaling.
PET_GM_BASE, PET_GM_AMYLOID, PET_WM, PET_CSF, PET_CB, PET_SCALP = 1.0, 1.8, 1.7, 0.3, 1.0, 0.4
PET_BLUR_SIGMA = 0.8
UPTAKE_TAU_MIN = 12.0

# Plane waves (normalized wavevector, phase) summed into a fixed gyral texture.
GYRI = (((9.0, 4.0, -3.0), 0.3), ((-2.0, 8.5, 5.0), 1.9), ((4.5, -5.0, 8.0), 4.1))
GYRAL_CONTRAST = 0.35
# Boundary undulation (fraction of radius) driven by the gyral texture.
BRAIN_FOLD = 0.04
WM_FOLD = 0.12
# Logistic edge scale in voxels; roughly one voxel of partial-volume blur.
EDGE_WIDTH_VOXELS = 1.0

CN_SEVERITY = (0.0, 0.35)
AD_SEVERITY = (0.55, 1.0)
CN_MEAN_AMYLOID = sum(CN_SEVERITY) / 2


class PhantomError(ValueError):
    pass


class Status(str, enum.Enum):
    CN = "CN"
    AD = "AD"


class Sex(str, enum.Enum):
    F = "F"
    M = "M"


@dataclass(frozen=True)
class SubjectSpec:
    seed: int
    cognitive_status: Status = Status.CN
    sex: Sex = Sex.F
    atrophy_level: float = 0.0
    amyloid_burden: float = 0.0
    dims: tuple = (32, 32, 32)
    noise: float = DEFAULT_NOISE
    subject_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "cognitive_status", Status(self.cognitive_status))
        object.__setattr__(self, "sex", Sex(self.sex))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        for name in ("atrophy_level", "amyloid_burden"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PhantomError(f"{name} must lie in [0, 1], got {v}")
        if self.noise < 0:
            raise PhantomError("noise must be nonnegative")

    def noise_free(self) -> SubjectSpec:
        return replace(self, noise=0.0)


def _grid(dims, pose: AffineTransform | None = None):
    """Normalized coordinates of each voxel; with ``pose``, of its pre-image
    under ``pose`` (so the anatomy appears moved by ``pose``)."""
    idx = np.indices(dims, dtype=np.float64)
    if pose is not None:
        inv = pose.inverse()
        idx = np.einsum("ij,j...->i...", inv.matrix, idx) + inv.translation[:, None, None, None]
    return [(idx[a] - (n - 1) / 2.0) / (n / 2.0) for a, n in enumerate(dims)]


def _soft_ellipsoid(grid, center, radii, dims, scale=1.0, fold=None):
    r = np.asarray(radii) * scale
    q = np.sqrt(sum(((g - c) / ri) ** 2 for g, c, ri in zip(grid, center, r)))
    if fold is not None:
        q = q - fold
    # Edge scale expressed in units of q.
    width = EDGE_WIDTH_VOXELS * np.mean([1.0 / (n / 2.0) for n in dims]) / np.mean(r)
    return 1.0 / (1.0 + np.exp(-(1.0 - q) / width))


def phantom_fields(spec: SubjectSpec, pose: AffineTransform | None = None) -> dict[str, np.ndarray]:
    """Soft tissue-membership fields in [0, 1] for ``spec``'s anatomy.

    ``pose`` (voxel coordinates) renders the anatomy rigidly or affinely
    moved without any resampling.
    """
    dims = spec.dims
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise PhantomError(f"phantom dims must be >= {MIN_DIM} per axis, got {dims}")
    g = _grid(dims, pose)
    gyri = sum(np.sin(sum(k * x for k, x in zip(kvec, g)) + phase) for kvec, phase in GYRI) / len(GYRI)
    brain = _soft_ellipsoid(g, *BRAIN, dims, fold=BRAIN_FOLD * gyri)
    outer = _soft_ellipsoid(g, *BRAIN, dims, SCALP_OUTER)
    inner = _soft_ellipsoid(g, *BRAIN, dims, SCALP_INNER)
    scalp = np.clip(outer - inner, 0.0, 1.0)
    wm = _soft_ellipsoid(g, *BRAIN, dims, WM_SCALE, fold=WM_FOLD * gyri)
    vent_scale = 1.0 + spec.atrophy_level
    vent = np.zeros(dims)
    for center, radii in VENTRICLES:
        vent = np.maximum(vent, _soft_ellipsoid(g, center, radii, dims, vent_scale))
    cb = _soft_ellipsoid(g, *CEREBELLUM, dims) * brain
    # Frontal-leaning amyloid deposition pattern.
    pattern = 0.7 + 0.3 / (1.0 + np.exp(-4.0 * g[1]))
    return {"brain": brain, "scalp": scalp, "wm": wm, "ventricles": vent,
            "cerebellum": cb, "amyloid_pattern": pattern, "gyri": gyri}


def _layer(base, value, weight):
    return base * (1.0 - weight) + value * weight


def _mri(spec, f):
    gm = MRI_GM * (1.0 - 0.25 * spec.atrophy_level) * (1.0 + GYRAL_CONTRAST * f["gyri"])
    tissue = _layer(np.full(spec.dims, gm), MRI_WM, f["wm"])
    tissue = _layer(tissue, MRI_CB, f["cerebellum"])
    tissue = _layer(tissue, MRI_CSF, f["ventricles"])
    return f["brain"] * tissue + MRI_SCALP * f["scalp"]


def _pet_raw(spec, f):
    gm = PET_GM_BASE + PET_GM_AMYLOID * spec.amyloid_burden * f["amyloid_pattern"] * (1.0 + GYRAL_CONTRAST * f["gyri"])
    tissue = _layer(gm, PET_WM, f["wm"])
    tissue = _layer(tissue, PET_CB, f["cerebellum"])
    tissue = _layer(tissue, PET_CSF, f["ventricles"])
    pet = f["brain"] * tissue + PET_SCALP * f["scalp"]
    return ndimage.gaussian_filter(pet, PET_BLUR_SIGMA, mode="constant")


def _masks(f):
    brain = f["brain"] > 0.5
    cb = (f["cerebellum"] > 0.5) & brain
    return Mask3D(brain, MaskLabel.BRAIN), Mask3D(cb, MaskLabel.CEREBELLUM_CORTEX)


def _add_noise(x, sigma_frac, rng):
    if sigma_frac <= 0:
        return x
    span = float(x.max() - x.min())
    return np.maximum(x + rng.normal(0.0, sigma_frac * span, size=x.shape), 0.0)


def noise_free_pet(spec: SubjectSpec, pose: AffineTransform | None = None) -> np.ndarray:
    """Static PET field scaled so the cerebellar-mask mean is exactly 1."""
    f = phantom_fields(spec, pose)
    pet = _pet_raw(spec, f)
    _, cb = _masks(f)
    return pet / pet[cb.data].mean()


def generate_pair(spec: SubjectSpec, pose: AffineTransform | None = None
                  ) -> tuple[Volume3D, Volume3D, Mask3D, Mask3D]:
    """Return ``(mri, pet, brain_mask, cerebellum_mask)`` for ``spec``.

    With ``spec.noise == 0`` the PET cerebellar mean is 1.  Noise is additive
    Gaussian at ``spec.noise`` times each volume's dynamic range, drawn from
    an RNG seeded only by ``spec.seed``.
    """
    f = phantom_fields(spec, pose)
    brain, cb = _masks(f)
    mri = _mri(spec, f)
    pet = _pet_raw(spec, f)
    pet = pet / pet[cb.data].mean()
    rng = np.random.default_rng([spec.seed, 0])
    mri = _add_noise(mri, spec.noise, rng)
    pet = _add_noise(pet, spec.noise, rng)
    return Volume3D(mri), Volume3D(pet), brain, cb


def uptake_curve(t0: float, t1: float, tau: float = UPTAKE_TAU_MIN) -> float:
    """Mean of the rising-then-plateau curve ``1 - exp(-t/tau)`` over ``[t0, t1]``."""
    return 1.0 - tau * (math.exp(-t0 / tau) - math.exp(-t1 / tau)) / (t1 - t0)


def window_overlap(start, end, w0: float, w1: float) -> np.ndarray:
    return np.clip(np.minimum(end, w1) - np.maximum(start, w0), 0.0, None)


def generate_dynamic(spec: SubjectSpec, n_frames: int = 6, total_minutes: float = 60.0,
                     window=(30.0, 60.0), pose: AffineTransform | None = None) -> DynamicSeries:
    """Uniform frames whose overlap-weighted mean over ``window`` is the static PET.

    ``pose`` renders the anatomy moved (e.g. by :func:`acquisition_transform`)
    without resampling.
    """
    if n_frames < 2:
        raise PhantomError("a dynamic series needs at least two frames")
    if total_minutes <= 0:
        raise PhantomError("total_minutes must be positive")
    dur = total_minutes / n_frames
    starts = np.arange(n_frames) * dur
    ends = starts + dur
    factors = np.array([uptake_curve(a, b) for a, b in zip(starts, ends)])
    w = window_overlap(starts, ends, *window)
    ref = float(w @ factors / w.sum()) if w.sum() > 0 else float(factors[-1])
    factors = factors / ref
    static = noise_free_pet(spec, pose)
    rng = np.random.default_rng([spec.seed, 1])
    frames = [Volume3D(_add_noise(static * g, spec.noise, rng)) for g in factors]
    return DynamicSeries(frames, starts, np.full(n_frames, dur))


def acquisition_transform(spec: SubjectSpec, max_shift_mm: float = 1.5,
                          max_rot_deg: float = 3.0) -> AffineTransform:
    """Seeded rigid PET-to-MRI misalignment used when writing raw phantom data."""
    rng = np.random.default_rng([spec.seed, 2])
    p = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0], dtype=np.float64)
    p[:3] = rng.uniform(-max_shift_mm, max_shift_mm, 3)
    p[3:6] = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg, 3))
    center = (np.array(spec.dims) - 1) / 2.0
    return AffineTransform.from_params(p, center)


def misalign(series: DynamicSeries, transform: AffineTransform) -> DynamicSeries:
    frames = [resample_affine(f, transform) for f in series.frames]
    return DynamicSeries(frames, series.frame_start, series.frame_duration)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def generate_cohort(n: int, cn_fraction: float = 0.55, female_fraction: float = 0.5,
                    seed: int = 0, dims=(32, 32, 32), noise: float = DEFAULT_NOISE) -> list[SubjectSpec]:
    """Seeded cohort with exactly ``round(n*fraction)`` CN and female subjects."""
    if n < 1:
        raise PhantomError("cohort size must be >= 1")
    for name, frac in (("cn_fraction", cn_fraction), ("female_fraction", female_fraction)):
        if not 0.0 <= frac <= 1.0:
            raise PhantomError(f"{name} must lie in [0, 1], got {frac}")
    rng = np.random.default_rng(seed)
    n_cn = round_half_up(n * cn_fraction)
    n_f = round_half_up(n * female_fraction)
    status = [Status.CN] * n_cn + [Status.AD] * (n - n_cn)
    sexes = [Sex.F] * n_f + [Sex.M] * (n - n_f)
    sex = [sexes[i] for i in rng.permutation(n)]
    seeds = rng.choice(2**31 - 1, size=n, replace=False)
    specs = []
    for i in range(n):
        lo, hi = CN_SEVERITY if status[i] == Status.CN else AD_SEVERITY
        severity = rng.uniform(lo, hi)
        amyloid, atrophy = np.clip(severity + rng.normal(0.0, 0.05, 2), 0.0, 1.0)
        if status[i] == Status.AD:
            amyloid = max(amyloid, CN_MEAN_AMYLOID)
        specs.append(SubjectSpec(
            seed=int(seeds[i]), cognitive_status=status[i], sex=sex[i],
            atrophy_level=float(atrophy), amyloid_burden=float(amyloid),
            dims=tuple(dims), noise=noise))
    order = rng.permutation(n)
    return [replace(specs[j], subject_id=f"sub-{i + 1:04d}") for i, j in enumerate(order)]
