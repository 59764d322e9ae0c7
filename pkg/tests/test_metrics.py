from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_psnr, naive_ssim
from petsynth.gan import GanModel, GeneratorConfig
from petsynth.metrics import (EvalSubject, MetricsError, MetricsReport, SubjectMetrics, data_range_of,
                              evaluate_cohort, evaluate_pairs, gaussian_kernel1d, histogram_svg, identity_baseline,
                              mse, psnr, psnr_from_mse, read_report_csv, score_pair, ssim3d, write_histogram_svgs,
                              write_histograms_csv, write_report_csv)
from petsynth.preprocess import NormalizationParams
from petsynth.volume import Mask3D, Volume3D

volumes = arrays(np.float64, (8, 8, 8), elements=st.floats(0, 1))


def _pair(seed, size=12):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (size,) * 3)
    return a, np.clip(a + rng.normal(0, 0.1, a.shape), 0, None)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_oracle(seed):
    a, b = _pair(seed)
    got = ssim3d(a, b, 1.0)
    np.testing.assert_allclose([got.ssim, got.luminance, got.contrast, got.structure], naive_ssim(a, b, 1.0),
                               atol=1e-10)


def test_masked_ssim_matches_oracle():
    a, b = _pair(5)
    m = np.zeros(a.shape, bool)
    m[3:9, 2:10, 4:8] = True
    got = ssim3d(a, b, 1.0, m)
    np.testing.assert_allclose(got.ssim, naive_ssim(a, b, 1.0, m)[0], atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(volumes)
def test_ssim_identity_is_exactly_one(a):
    r = ssim3d(a, a, 1.0)
    assert (r.ssim, r.luminance, r.contrast, r.structure) == (1.0, 1.0, 1.0, 1.0)


@settings(max_examples=25, deadline=None)
@given(volumes, volumes)
def test_ssim_symmetric_and_bounded(a, b):
    x, y = ssim3d(a, b, 1.0).ssim, ssim3d(b, a, 1.0).ssim
    assert x == pytest.approx(y, abs=1e-12)
    assert -1.0 - 1e-12 <= x <= 1.0 + 1e-12


def test_ssim_components_bounded_for_anticorrelated():
    a, _ = _pair(1)
    r = ssim3d(a, 1.0 - a, 1.0)
    assert r.structure < 0 < r.contrast <= 1.0


def test_ssim_errors():
    with pytest.raises(MetricsError):
        ssim3d(np.zeros((6, 8, 8)), np.zeros((6, 8, 8)), 1.0)
    with pytest.raises(MetricsError):
        ssim3d(np.zeros((8, 8, 8)), np.zeros((8, 8, 9)), 1.0)
    with pytest.raises(MetricsError):
        ssim3d(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)), 0.0)
    m = np.zeros((8, 8, 8), bool)
    m[0, 0, 0] = True
    with pytest.raises(MetricsError, match="centered"):
        ssim3d(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)), 1.0, m)


def test_gaussian_kernel_normalized():
    g = gaussian_kernel1d(7, 1.5)
    assert g.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(g, g[::-1])


@pytest.mark.parametrize("seed", range(3))
def test_psnr_matches_oracle(seed):
    a, b = _pair(seed)
    assert psnr(a, b, 1.0) == pytest.approx(naive_psnr(a, b, 1.0), abs=1e-9)


def test_psnr_uniform_error_is_exactly_20db():
    a = np.zeros((4, 4, 4))
    assert psnr(a, a + 0.1, 1.0) == 20.0
    assert psnr_from_mse(0.01, 1.0) == 20.0


def test_psnr_zero_error_is_infinite():
    a = np.ones((4, 4, 4))
    assert psnr(a, a, 1.0) == math.inf


def test_mse_masked_and_empty():
    a = np.zeros((2, 2, 2))
    b = a.copy()
    b[0, 0, 0] = 2.0
    m = np.zeros((2, 2, 2), bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert mse(a, b, m) == 2.0
    with pytest.raises(MetricsError):
        mse(a, b, np.zeros((2, 2, 2), bool))


def test_data_range_over_mask():
    x = np.arange(8.0).reshape(2, 2, 2)
    m = np.zeros((2, 2, 2), bool)
    m[0, 0, 1] = m[1, 0, 0] = True
    assert data_range_of(x) == 7.0
    assert data_range_of(x, m) == 3.0


# --- reports -------------------------------------------------------------

def _report():
    recs = [SubjectMetrics("a", 0.9, 0.95, 0.97, 0.98, 25.0, 2.0), SubjectMetrics("b", 0.8, 0.9, 0.95, 0.93, 21.0, 2.0),
            SubjectMetrics("c", error="boom")]
    return MetricsReport(recs, {})


def test_report_aggregates_skip_failures():
    r = _report()
    assert r.n_failed == 1
    assert r.mean("ssim") == pytest.approx(0.85)
    assert r.std("psnr") == pytest.approx(2.0)
    counts, edges = r.histogram("ssim", bins=4)
    assert counts.sum() == 2 and len(edges) == 5


def test_report_csv_round_trip(tmp_path):
    write_report_csv(_report(), tmp_path / "r.csv")
    rows = read_report_csv(tmp_path / "r.csv")
    assert [r["subject_id"] for r in rows] == ["a", "b", "c", "mean", "std"]
    assert float(rows[3]["ssim"]) == pytest.approx(0.85)
    assert rows[2]["error"] == "boom"


def test_report_csv_writes_inf(tmp_path):
    rep = MetricsReport([SubjectMetrics("a", 1.0, 1.0, 1.0, 1.0, math.inf, 1.0)])
    write_report_csv(rep, tmp_path / "r.csv")
    assert read_report_csv(tmp_path / "r.csv")[0]["psnr"] == "inf"


def test_histogram_outputs(tmp_path):
    write_histograms_csv(_report(), tmp_path / "h.csv", bins=5)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "metric,bin_lo,bin_hi,count"
    assert len(lines) == 1 + 5 * 5
    paths = write_histogram_svgs(_report(), tmp_path)
    assert [p.name for p in paths] == ["hist_ssim.svg", "hist_psnr.svg"]
    assert paths[0].read_text().startswith("<svg")
    assert histogram_svg([], [0.0, 1.0], "empty").count("<rect") == 0


def test_evaluate_pairs_records_failures():
    a, b = _pair(0)
    rep = evaluate_pairs([("ok", a, b, None), ("bad", a, b[:-1], None)], masked=False)
    assert rep.records[0].ok and not rep.records[1].ok
    assert rep.records[0].ssim == score_pair("ok", a, b).ssim


def _subjects(n=2, size=16):
    rng = np.random.default_rng(0)
    m = np.zeros((size,) * 3, bool)
    m[3:-3, 3:-3, 3:-3] = True
    out = []
    for i in range(n):
        mri = np.where(m, rng.uniform(0.2, 1.0, m.shape), 0.0)
        pet = np.where(m, 0.5 + mri, 0.0)
        out.append(EvalSubject(f"s{i}", Volume3D(mri), Volume3D(pet), Mask3D(m)))
    return out


def test_evaluate_cohort_masks_synthetic_output():
    norm = NormalizationParams(1.0, 0.5)
    model = GanModel.create(GeneratorConfig(depth=2, base_channels=4, zero_init_output=True), norm_params=norm)
    subjects = _subjects()
    report, diffs = evaluate_cohort(model, subjects)
    assert report.n_failed == 0 and report.metadata["space"] == "suvr"
    for s in subjects:
        d = diffs[s.subject_id].data
        # Outside the brain both images are zero.
        assert np.all(d[~s.mask.data] == 0)
        np.testing.assert_allclose(d[s.mask.data], s.pet.data[s.mask.data] - norm.inverse(0.5), atol=1e-5)
    rep_n, _ = evaluate_cohort(model, subjects, space="normalized")
    assert rep_n.metadata["space"] == "normalized"
    with pytest.raises(MetricsError):
        evaluate_cohort(model, subjects, space="bogus")


def test_evaluate_cohort_records_bad_dims():
    model = GanModel.create(GeneratorConfig(depth=2, base_channels=4), norm_params=NormalizationParams(1.0, 0.5))
    s = _subjects(1, size=18)
    report, diffs = evaluate_cohort(model, s)
    assert report.n_failed == 1 and not diffs


def test_identity_baseline_scores_mri_as_pet():
    norm = NormalizationParams(0.5, 1.0 / 6.0)
    subjects = _subjects()
    rep = identity_baseline(subjects, norm)
    s = subjects[0]
    synth = np.where(s.mask.data, norm.inverse(s.mri.data), 0.0)
    assert rep.records[0].ssim == score_pair("x", synth, s.pet.data, s.mask.data).ssim
