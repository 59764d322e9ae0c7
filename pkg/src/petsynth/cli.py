"""``petsynth`` command line: phantom -> preprocess -> split -> train -> eval.

Stages hand off through files; every output directory receives the resolved
run config.  Exit codes: 0 success, 1 usage or config error, 2 some subjects
failed, 3 fatal numerical failure.

Per-subject work in ``preprocess`` runs on ``PETSYNTH_THREADS`` threads
(default 1); results are collected in manifest order either way.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import (TRAIN, ManifestError, SubjectRecord, read_manifest, select, stratified_split,
                     write_manifest)
from .config import RunConfig, RunConfigError
from .gan import ConfigError, NumericalError, TrainingPair, load_model, train, write_loss_log
from .metrics import (EvalSubject, MetricsReport, SubjectMetrics, evaluate_cohort, identity_baseline,
                      write_histogram_svgs, write_histograms_csv, write_report_csv)
from .nifti import NiftiError, read_dynamic, read_nifti, write_dynamic, write_nifti
from .phantom import acquisition_transform, generate_cohort, generate_dynamic, generate_pair
from .preprocess import PreprocessError, fit_normalization, preprocess_subject
from .volume import Mask3D, MaskLabel, Volume3D, VolumeError

log = logging.getLogger("petsynth")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "PETSYNTH_THREADS"
FILE_KEYS = ("mri", "pet", "brain", "cerebellum")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# file helpers --------------------------------------------------------------

def _write_mask(mask: Mask3D, path) -> None:
    write_nifti(Volume3D(mask.data.astype(np.float32)), path)


def _read_mask(path, label=MaskLabel.BRAIN) -> Mask3D:
    return Mask3D(read_nifti(path).data > 0.5, label)


def _read_pet(path):
    """A multi-frame file becomes a DynamicSeries, a single frame a Volume3D."""
    series = read_dynamic(path)
    return series.frames[0] if len(series) == 1 else series


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer") from None


def _map(fn, items):
    n = _threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out
    if not out:
        raise UsageError("an output directory is required (--out or 'out' in the config)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(path)
    return path


def _manifest_records(path) -> tuple[list[SubjectRecord], Path]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest {path} does not exist")
    return read_manifest(path), path.parent


# stages --------------------------------------------------------------------

def cmd_phantom(cfg: RunConfig, out: Path) -> int:
    """Raw phantom cohort: MRI, dynamic PET (rigidly misaligned), masks, manifest."""
    pc = cfg.phantom
    specs = generate_cohort(pc.n, pc.cn_fraction, pc.female_fraction, cfg.seed, pc.dims, pc.noise)
    raw = out / "raw"
    raw.mkdir(exist_ok=True)
    window = (cfg.preprocess.window_start, cfg.preprocess.window_end)
    records = []
    for spec in specs:
        mri, _, brain, cb = generate_pair(spec)
        pose = acquisition_transform(spec, pc.max_shift_mm, pc.max_rot_deg)
        series = generate_dynamic(spec, pc.n_frames, pc.total_minutes, window, pose)
        sid = spec.subject_id
        files = {k: f"raw/{sid}_{k}.nii" for k in FILE_KEYS}
        write_nifti(mri, out / files["mri"])
        write_dynamic(series, out / files["pet"])
        _write_mask(brain, out / files["brain"])
        _write_mask(cb, out / files["cerebellum"])
        records.append(SubjectRecord(sid, spec.cognitive_status.value, spec.sex.value, spec.seed, files))
    write_manifest(records, out / "manifest.csv")
    with open(out / "phantom_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "atrophy_level", "amyloid_burden"])
        for s in specs:
            w.writerow([s.subject_id, f"{s.atrophy_level:.10g}", f"{s.amyloid_burden:.10g}"])
    log.info("wrote %d phantom subjects to %s", len(records), out)
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, out: Path, manifest) -> int:
    """Frame summation, registration, brain extraction, SUVR; cohort normalization sidecar."""
    records, root = _manifest_records(manifest)
    pc = cfg.preprocess
    subjects = out / "subjects"
    subjects.mkdir(exist_ok=True)

    def run(rec: SubjectRecord):
        try:
            mri = read_nifti(rec.path("mri", root))
            pet = _read_pet(rec.path("pet", root))
            cb = _read_mask(rec.path("cerebellum", root), MaskLabel.CEREBELLUM_CORTEX)
            res = preprocess_subject(mri, pet, cb, (pc.window_start, pc.window_end), pc.register,
                                     pc.registration)
        except (OSError, NiftiError, VolumeError, PreprocessError, ManifestError, ValueError) as exc:
            return rec, None, f"{type(exc).__name__}: {exc}"
        return rec, res, ""

    results = _map(run, records)
    done, failures, pets, brains, costs = [], [], [], [], []
    for rec, res, err in results:
        if res is None:
            failures.append((rec.id, err))
            log.warning("subject %s failed: %s", rec.id, err)
            continue
        files = {k: f"subjects/{rec.id}_{k}.nii" for k in FILE_KEYS}
        write_nifti(res.mri, out / files["mri"])
        write_nifti(res.pet, out / files["pet"])
        _write_mask(res.brain, out / files["brain"])
        _write_mask(res.cerebellum, out / files["cerebellum"])
        done.append(replace(rec, files=files))
        pets.append(res.pet)
        brains.append(res.brain)
        costs.append((rec.id, res.registration_cost))
    write_manifest(done, out / "manifest.csv")
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "error"])
        w.writerows(failures)
    with open(out / "registration.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "cost"])
        w.writerows([(sid, f"{c:.10g}") for sid, c in costs])
    if pets:
        fit_normalization(pets, brains, z_range=pc.z_range).save(out / "normalization.txt")
    log.info("preprocessed %d subjects, %d failed", len(done), len(failures))
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_split(cfg: RunConfig, out: Path, manifest) -> int:
    records, root = _manifest_records(manifest)
    result = stratified_split(records, cfg.split.train_fraction, cfg.seed)
    labels = {r.id: r.split for r in (*result.train, *result.validation)}
    # Keep paths valid from the new manifest's directory.
    rebased = [replace(r, files={k: os.path.relpath(r.path(k, root).resolve(), out.resolve())
                                 for k in r.files}, split=labels[r.id]) for r in records]
    write_manifest(rebased, out / "manifest.csv")
    for msg in result.warnings:
        log.warning(msg)
    log.info("split %d subjects: %d train / %d validation", len(records), len(result.train),
             len(result.validation))
    return EXIT_OK


def _load_volumes(rec: SubjectRecord, root):
    mri = read_nifti(rec.path("mri", root))
    pet = read_nifti(rec.path("pet", root))
    brain = _read_mask(rec.path("brain", root))
    return mri, pet, brain


def _labelled(records, split):
    """Records of ``split`` if the manifest carries split labels, else all."""
    if any(r.split for r in records):
        return select(records, split)
    return list(records)


def cmd_train(cfg: RunConfig, out: Path, manifest) -> int:
    records, root = _manifest_records(manifest)
    records = _labelled(records, TRAIN)
    if not records:
        raise UsageError("manifest has no training subjects")
    loaded = [_load_volumes(r, root) for r in records]
    tc = cfg.train
    # Fitted on the training subjects only and stored with the model.
    try:
        norm = fit_normalization([p for _, p, _ in loaded], [b for _, _, b in loaded],
                                 z_range=cfg.preprocess.z_range)
    except PreprocessError as exc:
        raise NumericalError(f"cannot normalize training PET: {exc}") from None
    norm.save(out / "normalization.txt")
    dataset = [TrainingPair(m.data, norm.forward(p.data), b.data) for m, p, b in loaded]
    _, history = train(dataset, tc.train_config(cfg.seed), gen_config=tc.generator,
                       disc_config=tc.discriminator, out_dir=out, norm_params=norm)
    if not history:
        write_loss_log([], out / "loss_log.csv")
    log.info("trained %d epochs on %d subjects", len(history), len(dataset))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, manifest, checkpoint) -> int:
    records, root = _manifest_records(manifest)
    records = _labelled(records, cfg.eval.split)
    if not records:
        raise UsageError(f"manifest has no {cfg.eval.split!r} subjects")
    if not Path(checkpoint).is_file():
        raise UsageError(f"checkpoint {checkpoint} does not exist")
    model = load_model(checkpoint)
    subjects, load_errors = [], {}
    for rec in records:
        try:
            mri, pet, brain = _load_volumes(rec, root)
            subjects.append(EvalSubject(rec.id, mri, pet, brain))
        except (OSError, NiftiError, VolumeError, ManifestError) as exc:
            load_errors[rec.id] = f"{type(exc).__name__}: {exc}"
    ec = cfg.eval
    report, diffs = evaluate_cohort(model, subjects, masked=ec.masked, space=ec.space)
    baseline = identity_baseline(subjects, model.norm_params, masked=ec.masked, space=ec.space)
    by_id = {r.subject_id: r for r in report.records}
    ordered = [by_id.get(r.id) or SubjectMetrics(r.id, error=load_errors[r.id]) for r in records]
    report = MetricsReport(ordered, report.metadata)
    write_report_csv(report, out / "report.csv")
    write_report_csv(baseline, out / "baseline_mri_report.csv")
    write_histograms_csv(report, out / "histograms.csv")
    write_histogram_svgs(report, out)
    if ec.write_differences:
        ddir = out / "differences"
        ddir.mkdir(exist_ok=True)
        for sid, vol in diffs.items():
            write_nifti(vol, ddir / f"{sid}_diff.nii")
    log.info("evaluated %d subjects: mean SSIM %.4f (MRI baseline %.4f), mean PSNR %.3f dB, %d failed",
             len(records), report.mean("ssim"), baseline.mean("ssim"), report.mean("psnr"), report.n_failed)
    return EXIT_PARTIAL if report.n_failed else EXIT_OK


# argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="petsynth", description="MRI-to-amyloid-PET synthesis pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n", type=int, help="number of subjects")
    p.add_argument("--dims", type=int, nargs="+", help="grid size (one value or three)")
    p.add_argument("--cn-fraction", type=float)
    p.add_argument("--female-fraction", type=float)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("preprocess", parents=[common], help="sum frames, register, extract brain, SUVR")
    p.add_argument("manifest")
    p.add_argument("--no-register", action="store_true", help="assume PET is already on the MRI grid")

    p = sub.add_parser("split", parents=[common], help="stratified train/validation split")
    p.add_argument("manifest")
    p.add_argument("--fraction", type=float, help="training fraction")

    p = sub.add_parser("train", parents=[common], help="train the conditional GAN")
    p.add_argument("manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("eval", parents=[common], help="score synthetic PET against real PET")
    p.add_argument("manifest")
    p.add_argument("checkpoint")
    p.add_argument("--split", help="manifest split to evaluate (default from config)")
    p.add_argument("--space", choices=("suvr", "normalized"))
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    cmd = args.command
    if cmd == "phantom":
        over = {k: v for k, v in (("n", args.n), ("cn_fraction", args.cn_fraction),
                                  ("female_fraction", args.female_fraction), ("noise", args.noise))
                if v is not None}
        if args.dims:
            if len(args.dims) not in (1, 3):
                raise UsageError("--dims takes one or three integers")
            over["dims"] = tuple(args.dims * 3 if len(args.dims) == 1 else args.dims)
        cfg = replace(cfg, phantom=replace(cfg.phantom, **over))
    elif cmd == "preprocess" and args.no_register:
        cfg = replace(cfg, preprocess=replace(cfg.preprocess, register=False))
    elif cmd == "split" and args.fraction is not None:
        cfg = replace(cfg, split=replace(cfg.split, train_fraction=args.fraction))
    elif cmd == "train":
        over = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size)) if v is not None}
        cfg = replace(cfg, train=replace(cfg.train, **over))
    elif cmd == "eval":
        over = {k: v for k, v in (("split", args.split), ("space", args.space)) if v is not None}
        cfg = replace(cfg, eval=replace(cfg.eval, **over))
    return cfg


def run(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    if args.command == "phantom":
        return cmd_phantom(cfg, out)
    if args.command == "preprocess":
        return cmd_preprocess(cfg, out, args.manifest)
    if args.command == "split":
        return cmd_split(cfg, out, args.manifest)
    if args.command == "train":
        return cmd_train(cfg, out, args.manifest)
    return cmd_eval(cfg, out, args.manifest, args.checkpoint)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except (UsageError, RunConfigError, ConfigError, ManifestError) as exc:
        print(f"petsynth: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"petsynth: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
