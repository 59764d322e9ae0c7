"""Subject manifests and deterministic stratified train/validation splits."""
from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

BASE_COLUMNS = ("id", "status", "sex", "seed")
SPLIT_COLUMN = "split"
TRAIN, VALIDATION = "train", "validation"


class ManifestError(ValueError):
    pass


class StratumWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    """One manifest row.

    ``files`` maps column name to a path string (relative paths resolve
    against the manifest's directory); its order is the column order.
    """

    id: str
    status: str
    sex: str
    seed: int = 0
    files: dict = field(default_factory=dict)
    split: str | None = None

    @property
    def stratum(self) -> tuple[str, str]:
        return (self.sex, self.status)

    def path(self, key: str, root=None) -> Path:
        try:
            p = Path(self.files[key])
        except KeyError:
            raise ManifestError(f"subject {self.id} has no {key!r} column") from None
        return p if p.is_absolute() or root is None else Path(root) / p


def check_unique(records: Sequence[SubjectRecord]) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise ManifestError(f"duplicate subject id {r.id!r}")
        seen.add(r.id)


def write_manifest(records: Sequence[SubjectRecord], path) -> None:
    """CSV with ``id,status,sex,seed``, the file columns, then ``split`` if any
    record carries one."""
    check_unique(records)
    file_cols = list(records[0].files) if records else []
    if any(list(r.files) != file_cols for r in records):
        raise ManifestError("all records must share the same file columns")
    with_split = any(r.split is not None for r in records)
    header = [*BASE_COLUMNS, *file_cols] + ([SPLIT_COLUMN] if with_split else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            row = [r.id, r.status, r.sex, r.seed, *(r.files[c] for c in file_cols)]
            if with_split:
                row.append(r.split or "")
            w.writerow(row)


def read_manifest(path) -> list[SubjectRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if tuple(header[:4]) != BASE_COLUMNS:
            raise ManifestError(f"{path}: header must start with {','.join(BASE_COLUMNS)}")
        has_split = header[-1] == SPLIT_COLUMN
        file_cols = header[4:-1] if has_split else header[4:]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                seed = int(row[3])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: seed {row[3]!r} is not an integer") from None
            files = dict(zip(file_cols, row[4:4 + len(file_cols)]))
            split = (row[-1] or None) if has_split else None
            records.append(SubjectRecord(row[0], row[1], row[2], seed, files, split))
    check_unique(records)
    return records


# splitting -----------------------------------------------------------------

class SplitResult(NamedTuple):
    train: list
    validation: list
    warnings: list


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def stratum_targets(sizes: Sequence[int], train_fraction: float) -> list[int]:
    """Half-up per-stratum train counts, then a totals pass so the sum is
    ``round(train_fraction * N)``.

    The pass moves one subject at a time in the strata whose rounding error
    points the right way the most (ties to the earlier stratum), so each
    stratum stays within one subject of its exact share.
    """
    exact = [train_fraction * n for n in sizes]
    counts = [_round_half_up(e) for e in exact]
    target = _round_half_up(train_fraction * sum(sizes))
    diff = target - sum(counts)
    order = range(len(sizes))
    if diff > 0:
        cands = sorted((i for i in order if counts[i] < sizes[i]), key=lambda i: (counts[i] - exact[i], i))
        for i in cands[:diff]:
            counts[i] += 1
    elif diff < 0:
        cands = sorted((i for i in order if counts[i] > 0), key=lambda i: (exact[i] - counts[i], i))
        for i in cands[:-diff]:
            counts[i] -= 1
    return counts


def stratified_split(records: Sequence[SubjectRecord], train_fraction: float, seed: int = 0) -> SplitResult:
    """Seeded shuffle within each (sex, status) stratum, then a cut.

    Strata are the observed sexes crossed with the observed status levels.
    A combination with no subjects is reported as a warning (and through
    :mod:`warnings`) instead of failing.  Both returned lists keep manifest
    order and carry ``split`` labels.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    check_unique(records)
    groups: dict[tuple, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.stratum, []).append(i)
    sexes = sorted({r.sex for r in records})
    levels = sorted({r.status for r in records})
    notes = []
    for key in itertools.product(sexes, levels):
        if key not in groups:
            msg = f"stratum sex={key[0]} status={key[1]} is empty; nothing to split"
            notes.append(msg)
            warnings.warn(msg, StratumWarning, stacklevel=2)
    keys = sorted(groups)
    counts = stratum_targets([len(groups[k]) for k in keys], train_fraction)
    label = {}
    for idx, (key, k) in enumerate(zip(keys, counts)):
        members = groups[key]
        perm = np.random.default_rng([seed, idx]).permutation(len(members))
        for rank, j in enumerate(perm):
            label[members[j]] = TRAIN if rank < k else VALIDATION
    out = [replace(r, split=label[i]) for i, r in enumerate(records)]
    return SplitResult([r for r in out if r.split == TRAIN], [r for r in out if r.split == VALIDATION], notes)


def select(records: Sequence[SubjectRecord], split: str | None) -> list[SubjectRecord]:
    """Records with the given split label; ``None`` keeps everything."""
    if split is None:
        return list(records)
    return [r for r in records if r.split == split]
