from __future__ import annotations

import csv
import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

from petsynth.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, main
from petsynth.cohort import read_manifest, write_manifest
from petsynth.config import RESOLVED_NAME, RunConfig, RunConfigError
from petsynth.nifti import read_nifti, write_nifti
from petsynth.volume import Volume3D


# --- config --------------------------------------------------------------

def test_config_round_trip():
    cfg = RunConfig(seed=5, out="x")
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_nested_overrides_keep_section_defaults():
    cfg = RunConfig.from_dict({"preprocess": {"registration": {"levels": 2}}, "train": {"generator": {"depth": 3}}})
    assert cfg.preprocess.registration.levels == 2
    assert cfg.preprocess.registration.match_intensity is True
    assert cfg.train.generator.depth == 3
    assert cfg.train.generator.base_channels == 16


@pytest.mark.parametrize("data", [{"sed": 1}, {"train": {"epoch": 2}}, {"preprocess": {"registration": {"x": 1}}},
                                  {"eval": {"space": "mni"}}, {"phantom": 3}])
def test_bad_config_rejected(data):
    with pytest.raises(RunConfigError):
        RunConfig.from_dict(data)


def test_config_file_errors(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(RunConfigError):
        RunConfig.load(tmp_path / "c.json")
    with pytest.raises(RunConfigError):
        RunConfig.load(tmp_path / "missing.json")


def test_train_config_takes_global_seed():
    assert RunConfig(seed=9).train.train_config(9).seed == 9


# --- commands ------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["split", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["phantom", "--n", "2"]) == EXIT_USAGE  # no output directory
    (tmp_path / "c.json").write_text('{"bogus": 1}')
    assert main(["phantom", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "bogus" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """phantom -> preprocess -> split 0.7 -> train 1 epoch -> eval on 20 subjects."""
    root = tmp_path_factory.mktemp("pipe")
    codes = [
        main(["phantom", "--n", "20", "--dims", "32", "--seed", "3", "--out", str(root / "ph")]),
        main(["preprocess", str(root / "ph" / "manifest.csv"), "--seed", "3", "--out", str(root / "pp")]),
        main(["split", str(root / "pp" / "manifest.csv"), "--fraction", "0.7", "--seed", "3",
              "--out", str(root / "sp")]),
        main(["train", str(root / "sp" / "manifest.csv"), "--epochs", "1", "--seed", "3", "--out", str(root / "tr")]),
        main(["eval", str(root / "sp" / "manifest.csv"), str(root / "tr" / "model.ckpt"), "--seed", "3",
              "--out", str(root / "ev")]),
    ]
    return root, codes


def test_pipeline_exit_codes_and_outputs(pipeline):
    root, codes = pipeline
    assert codes == [EXIT_OK] * 5
    for stage in ("ph", "pp", "sp", "tr", "ev"):
        assert (root / stage / RESOLVED_NAME).is_file()
    assert len(read_manifest(root / "ph" / "manifest.csv")) == 20
    assert (root / "pp" / "normalization.txt").is_file()
    assert (root / "pp" / "failures.csv").read_text().strip() == "id,error"
    split = read_manifest(root / "sp" / "manifest.csv")
    assert sum(r.split == "train" for r in split) == 14
    assert (root / "tr" / "model.ckpt").is_file() and (root / "tr" / "loss_log.csv").is_file()
    with open(root / "ev" / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["subject_id"] for r in rows[-2:]] == ["mean", "std"]
    assert len(rows) == 6 + 2 and all(not r["error"] for r in rows)
    assert all(np.isfinite(float(r["ssim"])) for r in rows[:-2])
    for name in ("histograms.csv", "hist_ssim.svg", "hist_psnr.svg", "baseline_mri_report.csv"):
        assert (root / "ev" / name).is_file()
    assert len(list((root / "ev" / "differences").glob("*_diff.nii"))) == 6


def test_preprocessed_pet_is_suvr(pipeline):
    root, _ = pipeline
    rec = read_manifest(root / "pp" / "manifest.csv")[0]
    pet = read_nifti(rec.path("pet", root / "pp")).data
    cb = read_nifti(rec.path("cerebellum", root / "pp")).data > 0.5
    assert pet[cb].astype(np.float64).mean() == pytest.approx(1.0, abs=1e-5)


def test_preprocess_partial_failure_exit_2(pipeline, tmp_path):
    root, _ = pipeline
    raw = tmp_path / "ph"
    shutil.copytree(root / "ph", raw)
    recs = read_manifest(raw / "manifest.csv")[:3]
    write_manifest(recs, raw / "manifest.csv")
    (raw / recs[1].files["pet"]).write_bytes(b"garbage")
    code = main(["preprocess", str(raw / "manifest.csv"), "--out", str(tmp_path / "pp")])
    assert code == EXIT_PARTIAL
    failures = (tmp_path / "pp" / "failures.csv").read_text().splitlines()
    assert len(failures) == 2 and failures[1].startswith(recs[1].id)
    assert len(read_manifest(tmp_path / "pp" / "manifest.csv")) == 2


def test_train_on_non_finite_pet_exits_3(pipeline, tmp_path):
    root, _ = pipeline
    recs = [r for r in read_manifest(root / "sp" / "manifest.csv") if r.split == "train"][:2]
    bad = tmp_path / "bad_pet.nii"
    write_nifti(Volume3D(np.full((32, 32, 32), np.nan)), bad)
    fixed = [replace(r, files={k: str(r.path(k, root / "sp").resolve()) for k in r.files}) for r in recs]
    fixed[0] = replace(fixed[0], files={**fixed[0].files, "pet": str(bad)})
    write_manifest(fixed, tmp_path / "m.csv")
    assert main(["train", str(tmp_path / "m.csv"), "--epochs", "1", "--out", str(tmp_path / "tr")]) == EXIT_NUMERICAL


def test_eval_missing_subject_file_exit_2(pipeline, tmp_path):
    root, _ = pipeline
    recs = [r for r in read_manifest(root / "sp" / "manifest.csv") if r.split == "validation"][:2]
    fixed = [replace(r, files={k: str(r.path(k, root / "sp").resolve()) for k in r.files}) for r in recs]
    fixed[1] = replace(fixed[1], files={**fixed[1].files, "mri": str(tmp_path / "nope.nii")})
    write_manifest(fixed, tmp_path / "m.csv")
    code = main(["eval", str(tmp_path / "m.csv"), str(root / "tr" / "model.ckpt"), "--out", str(tmp_path / "ev")])
    assert code == EXIT_PARTIAL
    with open(tmp_path / "ev" / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[1]["subject_id"] == recs[1].id and rows[1]["error"]
