"""SSIM (with luminance/contrast/structure terms), PSNR and cohort reports.

SSIM uses a 7^3 Gaussian window (sigma 1.5) evaluated only where the window
lies fully inside the volume, K1=0.01, K2=0.03 and C3=C2/2.  Local variances
are clamped at zero and the covariance is clipped to the Cauchy-Schwarz
bound, which makes ``ssim3d(a, a)`` exactly 1 in floating point.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gan.training import GanModel, generate_normalized
from .preprocess import NormalizationParams
from .volume import Mask3D, Volume3D

K1, K2 = 0.01, 0.03
WINDOW_SIZE = 7
WINDOW_SIGMA = 1.5
HIST_BINS = 40
METRIC_FIELDS = ("ssim", "luminance", "contrast", "structure", "psnr")


class MetricsError(ValueError):
    pass


class SsimResult(NamedTuple):
    ssim: float
    luminance: float
    contrast: float
    structure: float
    ssim_map: np.ndarray | None = None


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, (Volume3D, Mask3D)) else x)


def gaussian_kernel1d(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-r * r / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully-contained windows."""
    for axis in range(3):
        x = sliding_window_view(x, g.size, axis=axis) @ g
    return x


def _check_pair(a: np.ndarray, b: np.ndarray, data_range: float):
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not data_range > 0:
        raise MetricsError(f"data_range must be positive, got {data_range}")


def data_range_of(real, mask=None) -> float:
    """``max - min`` of the real image over the mask (or everywhere)."""
    r = _array(real)
    vals = r[_array(mask).astype(bool)] if mask is not None else r
    if vals.size == 0:
        raise MetricsError("empty mask: no voxels to take a data range from")
    return float(vals.max() - vals.min())


def ssim3d(a, b, data_range: float, mask=None, window_size: int = WINDOW_SIZE,
           sigma: float = WINDOW_SIGMA, keep_map: bool = False) -> SsimResult:
    """Mean SSIM and component means over windows (centered in ``mask`` if given)."""
    a = _array(a).astype(np.float64)
    b = _array(b).astype(np.float64)
    _check_pair(a, b, data_range)
    if min(a.shape) < window_size:
        raise MetricsError(f"volume {a.shape} is smaller than the {window_size}^3 window")
    g = gaussian_kernel1d(window_size, sigma)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    c3 = c2 / 2.0
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = np.maximum(_filter_valid(a * a, g) - mu_a * mu_a, 0.0)
    var_b = np.maximum(_filter_valid(b * b, g) - mu_b * mu_b, 0.0)
    sig_ab = np.sqrt(var_a * var_b)
    cov = np.clip(_filter_valid(a * b, g) - mu_a * mu_b, -sig_ab, sig_ab)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    con = (2.0 * sig_ab + c2) / (var_a + var_b + c2)
    struct = (cov + c3) / (sig_ab + c3)
    smap = lum * con * struct
    if mask is not None:
        h = window_size // 2
        m = _array(mask).astype(bool)
        if m.shape != a.shape:
            raise MetricsError(f"mask shape {m.shape} does not match {a.shape}")
        centers = m[h:h + smap.shape[0], h:h + smap.shape[1], h:h + smap.shape[2]]
        if not centers.any():
            raise MetricsError("no SSIM window is centered inside the mask")
        sel = (lambda x: x[centers])
    else:
        sel = np.ravel
    return SsimResult(float(np.mean(sel(smap))), float(np.mean(sel(lum))), float(np.mean(sel(con))),
                      float(np.mean(sel(struct))), smap if keep_map else None)


def mse(a, b, mask=None) -> float:
    a = _array(a).astype(np.float64)
    b = _array(b).astype(np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    if mask is not None:
        d = d[_array(mask).astype(bool)]
        if d.size == 0:
            raise MetricsError("empty mask")
    # Correctly rounded sum: uniform errors give the exact per-voxel square.
    return math.fsum((d * d).ravel().tolist()) / d.size


def psnr_from_mse(err: float, data_range: float) -> float:
    """``20 log10(R / RMSE)``, i.e. ``10 log10(R^2 / MSE)``; ``math.inf`` for zero error.

    Going through the root keeps decimal cases exact: a uniform error of 0.1
    with R=1 gives 20.0 even though 0.1**2 is not 0.01 in binary.
    """
    if not data_range > 0:
        raise MetricsError(f"data_range must be positive, got {data_range}")
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range / math.sqrt(err))


def psnr(a, b, data_range: float, mask=None) -> float:
    _check_pair(_array(a), _array(b), data_range)
    return psnr_from_mse(mse(a, b, mask), data_range)


# cohort reports ------------------------------------------------------------

@dataclass
class SubjectMetrics:
    subject_id: str
    ssim: float = math.nan
    luminance: float = math.nan
    contrast: float = math.nan
    structure: float = math.nan
    psnr: float = math.nan
    data_range: float = math.nan
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class MetricsReport:
    records: list[SubjectMetrics]
    metadata: dict = field(default_factory=dict)

    def ok_records(self) -> list[SubjectMetrics]:
        return [r for r in self.records if r.ok]

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.ok_records()], dtype=np.float64)

    def mean(self, name: str) -> float:
        v = self.values(name)
        return float(np.mean(v)) if v.size else math.nan

    def std(self, name: str) -> float:
        v = self.values(name)
        # An infinite PSNR (perfect subject) leaves the spread undefined.
        return float(np.std(v)) if v.size and np.all(np.isfinite(v)) else math.nan

    def histogram(self, name: str, bins: int = HIST_BINS):
        v = self.values(name)
        v = v[np.isfinite(v)]
        if v.size == 0:
            return np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1)
        lo, hi = float(v.min()), float(v.max())
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        return np.histogram(v, bins=bins, range=(lo, hi))

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for r in self.records)


def score_pair(subject_id: str, synthetic, real, mask=None, data_range: float | None = None) -> SubjectMetrics:
    """Masked SSIM/PSNR of one synthetic/real pair; R defaults to the real image's masked range."""
    R = data_range if data_range is not None else data_range_of(real, mask)
    s = ssim3d(synthetic, real, R, mask)
    return SubjectMetrics(subject_id, s.ssim, s.luminance, s.contrast, s.structure,
                          psnr(synthetic, real, R, mask), R)


def evaluate_pairs(pairs, masked: bool = True, metadata: dict | None = None) -> MetricsReport:
    """``pairs`` yields ``(subject_id, synthetic, real, mask)``; failures are recorded, not raised."""
    records = []
    for sid, synth, real, mask in pairs:
        try:
            records.append(score_pair(sid, synth, real, mask if masked else None))
        except (MetricsError, ValueError) as exc:
            records.append(SubjectMetrics(sid, error=str(exc)))
    meta = {"window": f"{WINDOW_SIZE}^3 gaussian sigma={WINDOW_SIGMA}", "K1": K1, "K2": K2,
            "C3": "C2/2", "data_range": "real max-min over mask" if masked else "real max-min",
            "masked": masked}
    meta.update(metadata or {})
    return MetricsReport(records, meta)


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.10g}"


def write_report_csv(report: MetricsReport, path) -> None:
    """One row per subject, then ``mean`` and ``std`` footer rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", *METRIC_FIELDS, "data_range", "error"])
        for r in report.records:
            w.writerow([r.subject_id, *(_fmt(getattr(r, f)) for f in METRIC_FIELDS), _fmt(r.data_range), r.error])
        for label, fn in (("mean", report.mean), ("std", report.std)):
            w.writerow([label, *(_fmt(fn(f)) for f in METRIC_FIELDS), "", ""])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_histograms_csv(report: MetricsReport, path, bins: int = HIST_BINS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "bin_lo", "bin_hi", "count"])
        for name in METRIC_FIELDS:
            counts, edges = report.histogram(name, bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([name, f"{lo:.10g}", f"{hi:.10g}", int(c)])


def histogram_svg(counts: Sequence[int], edges: Sequence[float], title: str,
                  width: int = 480, height: int = 240) -> str:
    pad = 30
    n = len(counts)
    top = max(max(counts), 1) if n else 1
    bw = (width - 2 * pad) / max(n, 1)
    bars = []
    for i, c in enumerate(counts):
        h = (height - 2 * pad) * c / top
        bars.append(f'<rect x="{pad + i * bw:.2f}" y="{height - pad - h:.2f}" width="{bw * 0.9:.2f}" '
                    f'height="{h:.2f}" fill="#4a7ab5"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>'
            f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>'
            + "".join(bars)
            + f'<text x="{pad}" y="{height - 8}" font-size="11">{edges[0]:.4g}</text>'
            f'<text x="{width - pad}" y="{height - 8}" font-size="11" text-anchor="end">{edges[-1]:.4g}</text>'
            "</svg>\n")


def write_histogram_svgs(report: MetricsReport, out_dir, bins: int = HIST_BINS) -> list:
    out = Path(out_dir)
    paths = []
    for name in ("ssim", "psnr"):
        counts, edges = report.histogram(name, bins)
        p = out / f"hist_{name}.svg"
        p.write_text(histogram_svg(list(counts), list(edges), f"{name} (n={len(report.ok_records())})"))
        paths.append(p)
    return paths


class EvalSubject(NamedTuple):
    subject_id: str
    mri: Volume3D  # normalized generator input
    pet: Volume3D  # real PET in SUVR units
    mask: Mask3D


def evaluate_cohort(model: GanModel, subjects: Sequence[EvalSubject], norm_params: NormalizationParams | None = None,
                    masked: bool = True, space: str = "suvr") -> tuple[MetricsReport, dict[str, Volume3D]]:
    """Synthesize every subject and score it against the real PET.

    ``space="suvr"`` compares denormalized output with SUVR PET;
    ``space="normalized"`` compares in generator units.  The synthetic image
    is brain-masked like the real one.  Returns the report and per-subject
    difference volumes (real - synthetic).
    """
    if space not in ("suvr", "normalized"):
        raise MetricsError(f"unknown evaluation space {space!r}")
    params = norm_params or model.norm_params
    if params is None:
        raise MetricsError("evaluation needs normalization parameters")
    pairs, diffs = [], {}
    for subj in subjects:
        try:
            out = generate_normalized(model, subj.mri.data)
        except ValueError as exc:
            pairs.append((subj.subject_id, None, None, None))
            diffs[subj.subject_id] = exc
            continue
        # The real PET is brain-extracted (zero outside the mask); the
        # synthetic image gets the same masking before comparison.
        synth = np.where(subj.mask.data, params.inverse(out), 0.0)
        real = subj.pet.data.astype(np.float64)
        if space == "normalized":
            synth, real = params.forward(synth), params.forward(real)
        diffs[subj.subject_id] = subj.pet.with_data(real - synth)
        pairs.append((subj.subject_id, synth, real, subj.mask))
    records = []
    for sid, synth, real, mask in pairs:
        if synth is None:
            records.append(SubjectMetrics(sid, error=str(diffs.pop(sid))))
            continue
        try:
            records.append(score_pair(sid, synth, real, mask if masked else None))
        except (MetricsError, ValueError) as exc:
            records.append(SubjectMetrics(sid, error=str(exc)))
    meta = evaluate_pairs([], masked).metadata
    meta["space"] = space
    return MetricsReport(records, meta), diffs


def identity_baseline(subjects: Sequence[EvalSubject], norm_params: NormalizationParams, masked: bool = True,
                      space: str = "suvr") -> MetricsReport:
    """Score the MRI itself as the synthetic PET (an identity generator).

    The normalized MRI is mapped through the inverse intensity normalization
    and brain-masked exactly like generator output, so the comparison with
    :func:`evaluate_cohort` differs only in the image content.
    """
    pairs = []
    for subj in subjects:
        synth = np.where(subj.mask.data, norm_params.inverse(subj.mri.data), 0.0)
        real = subj.pet.data.astype(np.float64)
        if space == "normalized":
            synth, real = norm_params.forward(synth), norm_params.forward(real)
        pairs.append((subj.subject_id, synth, real, subj.mask))
    return evaluate_pairs(pairs, masked, {"space": space, "synthetic": "identity (MRI)"})
