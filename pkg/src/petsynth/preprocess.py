"""PET preprocessing: frame summation, brain extraction, SUVR scaling and
invertible intensity normalization.

Registration lives in :mod:`petsynth.registration`; it is re-exported here so
the whole chain is importable from one place.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .registration import RegistrationConfig, register_affine  # noqa: F401
from .transform import AffineTransform  # noqa: F401
from .volume import DynamicSeries, Mask3D, MaskLabel, Volume3D, apply_mask, masked_stats, resample_affine

REFERENCE_SIGMA = 49.72
DEFAULT_Z_RANGE = 3.0
# PET and MRI contrasts differ, so the PET->MRI step is rigid with global
# intensity matching; the 12-parameter search over-fits contrast differences.
PET_TO_MRI_REGISTRATION = RegistrationConfig(match_intensity=True, optimize_scale_shear=False)


class PreprocessError(ValueError):
    pass


def frame_weights(series: DynamicSeries, window_start: float, window_end: float) -> np.ndarray:
    start, end = series.frame_start, series.frame_end
    return np.clip(np.minimum(end, window_end) - np.maximum(start, window_start), 0.0, None)


def sum_frames(series: DynamicSeries, window_start: float = 30.0, window_end: float = 60.0) -> Volume3D:
    """Collapse a dynamic series to a static image over ``[window_start, window_end]`` minutes.

    Each frame is weighted by the minutes it overlaps the window, so the
    result is a duration-weighted mean rather than a raw sum.
    """
    if window_end <= window_start:
        raise PreprocessError("window_end must exceed window_start")
    w = frame_weights(series, window_start, window_end)
    if not np.any(w > 0):
        raise PreprocessError(
            f"no frame overlaps the {window_start:g}-{window_end:g} min window "
            f"(series spans {series.frame_start[0]:g}-{series.frame_end[-1]:g} min)")
    acc = np.zeros(series.frames[0].dims, dtype=np.float64)
    for weight, frame in zip(w, series.frames):
        if weight > 0:
            acc += weight * frame.data.astype(np.float64)
    return series.frames[0].with_data(acc / w.sum())


def suvr_normalize(pet: Volume3D, cerebellum: Mask3D) -> Volume3D:
    """Divide every voxel by the mean uptake inside the cerebellar reference mask."""
    ref = masked_stats(pet, cerebellum).mean
    if ref == 0.0 or not math.isfinite(ref):
        raise PreprocessError(f"cerebellar reference mean is {ref}; cannot form SUVR")
    return pet.with_data(pet.data.astype(np.float64) / ref)


@dataclass(frozen=True)
class NormalizationParams:
    """z-score with ``(mu, sigma)`` then a fixed linear map of ``[-k, k]`` onto
    ``[out_lo, out_hi]``.  Values outside the range are kept, not clipped."""

    mu: float
    sigma: float
    out_lo: float = 0.0
    out_hi: float = 1.0
    z_range: float = DEFAULT_Z_RANGE

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise PreprocessError(f"sigma must be positive and finite, got {self.sigma}")
        if not self.out_lo < self.out_hi:
            raise PreprocessError("out_lo must be below out_hi")
        if not self.z_range > 0:
            raise PreprocessError("z_range must be positive")

    @classmethod
    def reference(cls) -> NormalizationParams:
        return cls(mu=0.0, sigma=REFERENCE_SIGMA)

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> NormalizationParams:
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
        unknown = set(values) - {"mu", "sigma", "out_lo", "out_hi", "z_range"}
        if unknown:
            raise PreprocessError(f"unknown normalization keys: {sorted(unknown)}")
        return cls(**values)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> NormalizationParams:
        with open(path) as fh:
            return cls.from_text(fh.read())

    def forward(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma
        return self.out_lo + (z + self.z_range) * ((self.out_hi - self.out_lo) / (2.0 * self.z_range))

    def inverse(self, y) -> np.ndarray:
        z = (np.asarray(y, dtype=np.float64) - self.out_lo) * ((2.0 * self.z_range) / (self.out_hi - self.out_lo)) - self.z_range
        return self.mu + self.sigma * z


def fit_normalization(volumes, masks=None, **kwargs) -> NormalizationParams:
    """Pooled mean and population std over (masked) voxels of several volumes."""
    chunks = []
    for i, vol in enumerate(volumes):
        data = vol.data.astype(np.float64)
        chunks.append(data[masks[i].data] if masks is not None else data.ravel())
    pooled = np.concatenate(chunks)
    if pooled.size == 0:
        raise PreprocessError("no voxels to fit normalization on")
    return NormalizationParams(float(pooled.mean()), float(pooled.std()), **kwargs)


def normalize_intensity(vol: Volume3D, params: NormalizationParams) -> Volume3D:
    return vol.with_data(params.forward(vol.data))


def denormalize_intensity(vol: Volume3D, params: NormalizationParams) -> Volume3D:
    return vol.with_data(params.inverse(vol.data))


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing between-class variance; voxels ``> t`` are foreground."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        raise PreprocessError("image is constant; intensity classes are not separable")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)[:-1]
    w1 = 1.0 - w0
    m0 = np.cumsum(p * centers)[:-1]
    mt = float(np.sum(p * centers))
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros_like(w0)
    between[valid] = (mt * w0[valid] - m0[valid]) ** 2 / (w0[valid] * w1[valid])
    return float(edges[int(np.argmax(between)) + 1])


_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def extract_brain(mri: Volume3D) -> Mask3D:
    """Otsu threshold, largest 6-connected component, then a one-voxel closing."""
    data = mri.data
    if np.any(data < 0):
        raise PreprocessError("brain extraction expects a nonnegative MRI")
    if not np.any(data):
        raise PreprocessError("MRI is all zeros")
    fg = data > otsu_threshold(data)
    labels, n = ndimage.label(fg, structure=_SIX_CONNECTED)
    if n == 0:
        raise PreprocessError("no foreground component above the Otsu threshold")
    sizes = np.bincount(labels.ravel())[1:]
    brain = labels == (int(np.argmax(sizes)) + 1)
    closed = ndimage.binary_closing(brain, structure=_SIX_CONNECTED, iterations=1)
    return Mask3D(closed | brain, MaskLabel.BRAIN)



def scale_mri(mri: Volume3D, brain: Mask3D) -> Volume3D:
    """Brain-masked MRI divided by its in-mask maximum, so it spans [0, 1]."""
    masked = apply_mask(mri, brain).data.astype(np.float64)
    top = float(masked.max())
    if top <= 0:
        raise PreprocessError("MRI has no positive intensity inside the brain mask")
    return mri.with_data(masked / top)


class PreprocessedSubject(NamedTuple):
    mri: Volume3D          # brain-masked, scaled to [0, 1]
    pet: Volume3D          # brain-masked SUVR on the MRI grid
    brain: Mask3D
    cerebellum: Mask3D
    transform: AffineTransform
    registration_cost: float


def preprocess_subject(mri: Volume3D, pet, cerebellum: Mask3D, window=(30.0, 60.0), register: bool = True,
                       registration: RegistrationConfig | None = None) -> PreprocessedSubject:
    """sum_frames -> register to MRI -> brain extraction and masking -> SUVR.

    ``pet`` is a :class:`DynamicSeries` or an already-static volume.
    ``cerebellum`` is the reference region on the MRI grid; it is intersected
    with the extracted brain.  Intensity normalization is cohort-level and
    applied afterwards with :func:`normalize_intensity`.
    """
    static = sum_frames(pet, *window) if isinstance(pet, DynamicSeries) else pet
    if register:
        T, cost = register_affine(static, mri, registration or PET_TO_MRI_REGISTRATION)
        static = resample_affine(static, T, reference=mri)
    else:
        if static.dims != mri.dims:
            raise PreprocessError(f"PET grid {static.dims} differs from MRI grid {mri.dims}; enable registration")
        T, cost = AffineTransform.identity(), float("nan")
    brain = extract_brain(mri)
    cb = Mask3D(cerebellum.data & brain.data, MaskLabel.CEREBELLUM_CORTEX)
    if cb.count == 0:
        raise PreprocessError("cerebellar reference region lies outside the extracted brain")
    pet_suvr = suvr_normalize(apply_mask(static, brain), cb)
    return PreprocessedSubject(scale_mri(mri, brain), pet_suvr, brain, cb, T, cost)
