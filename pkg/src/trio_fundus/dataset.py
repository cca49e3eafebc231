"""Label ingestion, splits, binary-relevance tasks, oversampling and pair sampling.

Records are immutable; every operation that needs randomness takes an explicit
seed and builds its own ``numpy.random.Generator``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DISEASES: tuple[str, ...] = (
    "DN", "ODC", "TSLN", "ARMD", "RS", "ODE", "ODP", "DR", "MH", "BRVO", "MYA", "CRVO",
)
DISEASE_NAMES = {
    "DN": "Drusen",
    "ODC": "Optic Disc Cupping",
    "TSLN": "Tessellation",
    "ARMD": "Age-Related Macular Degeneration",
    "RS": "Retinitis",
    "ODE": "Optic Disc Edema",
    "ODP": "Optic Disc Pallor",
    "DR": "Diabetic Retinopathy",
    "MH": "Media Haze",
    "BRVO": "Branch Retinal Vein Occlusion",
    "MYA": "Myopia",
    "CRVO": "Central Retinal Vein Occlusion",
}
NORMAL = "NORMAL"
SPLITS: tuple[str, ...] = ("train", "validation", "test")
LABEL_HEADER: tuple[str, ...] = ("ID", "Disease_Risk") + DISEASES

# allowed deviation of each split's share of a disease's positives
SPLIT_TOLERANCE: tuple[float, float, float] = (0.07, 0.07, 0.05)


class DatasetError(Exception):
    """Base class for data-layer failures."""


class LabelFormatError(DatasetError):
    pass


class StratificationError(DatasetError):
    pass


class SplitToleranceError(DatasetError):
    pass


class BalancingError(DatasetError):
    pass


class PairSamplingError(DatasetError):
    pass


def check_disease(code: str) -> str:
    if code not in DISEASES:
        raise ValueError(f"unknown disease code {code!r}; expected one of {', '.join(DISEASES)}")
    return code


@dataclass(frozen=True)
class ImageRecord:
    id: str
    image_path: Path
    labels: frozenset[str] = frozenset()
    split: str | None = None

    @property
    def is_normal(self) -> bool:
        return not self.labels

    def has(self, disease: str) -> bool:
        return disease in self.labels

    def bits(self, diseases: Sequence[str] = DISEASES) -> tuple[int, ...]:
        return tuple(int(d in self.labels) for d in diseases)


@dataclass(frozen=True)
class BinaryTask:
    disease: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]
    split: str

    @property
    def ids(self) -> tuple[str, ...]:
        return self.positives + self.negatives

    def labelled(self) -> list[tuple[str, int]]:
        return [(i, 1) for i in self.positives] + [(i, 0) for i in self.negatives]


@dataclass(frozen=True)
class PairSample:
    id_a: str
    id_b: str
    same: bool


def _resolve_image(data_root: Path, record_id: str) -> Path:
    for ext in (".png", ".jpg", ".jpeg"):
        p = data_root / f"{record_id}{ext}"
        if p.exists():
            return p
    return data_root / f"{record_id}.png"


def load_labels(csv_path: str | Path, data_root: str | Path | None = None,
                split: str | None = None) -> list[ImageRecord]:
    """Read an RFMiD-format label CSV into records.

    Image files are resolved lazily as ``<data_root>/<ID>.png`` (or ``.jpg``);
    ``data_root`` defaults to the CSV's directory. Columns that are neither
    ``ID``, ``Disease_Risk`` nor one of the 12 disease codes are ignored with a
    warning. A ``split`` column, when present, is honoured unless ``split`` is
    passed explicitly.
    """
    csv_path = Path(csv_path)
    root = Path(data_root) if data_root is not None else csv_path.parent
    if split is not None and split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    with csv_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "ID" not in header:
            raise LabelFormatError(f"{csv_path}: missing 'ID' column")
        known = {"ID", "Disease_Risk", "split", *DISEASES}
        unknown = [c for c in header if c not in known]
        if unknown:
            log.warning("%s: ignoring unknown columns %s", csv_path, ", ".join(unknown))
        present = [d for d in DISEASES if d in header]
        if len(present) < len(DISEASES):
            log.warning("%s: disease columns absent, treated as 0: %s", csv_path,
                        ", ".join(d for d in DISEASES if d not in present))
        records = []
        for rowno, row in enumerate(reader, start=2):
            labels = set()
            for d in present:
                cell = (row[d] or "").strip()
                if cell not in ("0", "1"):
                    raise LabelFormatError(
                        f"{csv_path}: row {rowno}, column {d}: expected 0 or 1, got {cell!r}")
                if cell == "1":
                    labels.add(d)
            rid = row["ID"].strip()
            rsplit = split
            if rsplit is None and row.get("split"):
                rsplit = row["split"].strip()
                if rsplit not in SPLITS:
                    raise LabelFormatError(f"{csv_path}: row {rowno}: unknown split {rsplit!r}")
            records.append(ImageRecord(rid, _resolve_image(root, rid), frozenset(labels), rsplit))
    return records


def write_labels(records: Iterable[ImageRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for r in records:
            bits = r.bits()
            w.writerow([r.id, int(any(bits)), *bits])


def write_split_manifest(records: Iterable[ImageRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ID", "split"])
        for r in records:
            w.writerow([r.id, r.split])


def read_split_manifest(path: str | Path) -> dict[str, str]:
    with Path(path).open(newline="") as fh:
        out = {row["ID"]: row["split"] for row in csv.DictReader(fh)}
    bad = {s for s in out.values() if s not in SPLITS}
    if bad:
        raise LabelFormatError(f"{path}: unknown split tags {sorted(bad)}")
    return out


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    raw = [total * r for r in ratios]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _check_ratios(ratios: Sequence[float], allow_zero: bool) -> None:
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries (train, validation, test)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if any(r < 0 for r in ratios) or (not allow_zero and any(r == 0 for r in ratios)):
        raise ValueError(f"invalid split ratios {tuple(ratios)}")


def stratified_split(records: Sequence[ImageRecord],
                     ratios: Sequence[float] = (0.6, 0.2, 0.2),
                     seed: int = 0,
                     diseases: Sequence[str] = DISEASES) -> list[ImageRecord]:
    """Assign train/validation/test by iterative multi-label stratification.

    Diseases are placed rarest first. Each disease's positives are spread so
    that per-split counts approach the largest-remainder rounding of
    ``n_pos * ratios``; records left over (normals included) then fill the
    per-split image quotas. Input order is preserved in the result.
    """
    _check_ratios(ratios, allow_zero=False)
    counts = {d: sum(r.has(d) for r in records) for d in diseases}
    for d, c in counts.items():
        if 0 < c < 3:
            raise StratificationError(f"{d} has {c} positives; need at least 3 to stratify")
    rng = np.random.default_rng(seed)
    n = len(records)
    quota = _largest_remainder(n, ratios)
    assigned: dict[int, int] = {}
    filled = [0, 0, 0]

    def place(idx: int, s: int) -> None:
        assigned[idx] = s
        filled[s] += 1

    for d in sorted((d for d in diseases if counts[d]), key=lambda d: (counts[d], d)):
        target = _largest_remainder(counts[d], ratios)
        have = [0, 0, 0]
        for i, s in assigned.items():
            if records[i].has(d):
                have[s] += 1
        todo = [i for i, r in enumerate(records) if r.has(d) and i not in assigned]
        for i in rng.permutation(todo):
            deficit = [target[s] - have[s] for s in range(3)]
            s = max(range(3), key=lambda s: (deficit[s], quota[s] - filled[s], -s))
            place(int(i), s)
            have[s] += 1

    rest = [i for i in range(n) if i not in assigned]
    for i in rng.permutation(rest):
        s = max(range(3), key=lambda s: (quota[s] - filled[s], -s))
        place(int(i), s)
    return [replace(r, split=SPLITS[assigned[i]]) for i, r in enumerate(records)]


def split_fractions(records: Sequence[ImageRecord],
                    diseases: Sequence[str] = DISEASES) -> dict[str, tuple[float, float, float]]:
    out = {}
    for d in diseases:
        per = [sum(1 for r in records if r.has(d) and r.split == s) for s in SPLITS]
        total = sum(per)
        if total:
            out[d] = tuple(c / total for c in per)
    return out


def validate_split(records: Sequence[ImageRecord],
                   ratios: Sequence[float] = (0.6, 0.2, 0.2),
                   tolerance: Sequence[float] = SPLIT_TOLERANCE,
                   diseases: Sequence[str] = DISEASES) -> dict[str, tuple[float, float, float]]:
    """Accept an existing split and check every disease against ``ratios ± tolerance``.

    Zero ratios are permitted here. Returns the per-disease fractions.
    """
    _check_ratios(ratios, allow_zero=True)
    missing = [r.id for r in records if r.split not in SPLITS]
    if missing:
        raise SplitToleranceError(f"{len(missing)} records have no split (first: {missing[0]})")
    fractions = split_fractions(records, diseases)
    bad = []
    for d, fr in fractions.items():
        for s, f, r, tol in zip(SPLITS, fr, ratios, tolerance):
            if abs(f - r) > tol + 1e-12:
                bad.append(f"{d}/{s}: {f:.3f} vs {r:.2f}±{tol:.2f}")
    if bad:
        raise SplitToleranceError("split outside tolerance: " + "; ".join(bad))
    return fractions


def apply_split_manifest(records: Sequence[ImageRecord], manifest: dict[str, str]) -> list[ImageRecord]:
    out = []
    for r in records:
        if r.id not in manifest:
            raise SplitToleranceError(f"record {r.id} missing from split manifest")
        out.append(replace(r, split=manifest[r.id]))
    return out


def make_binary_task(records: Sequence[ImageRecord], disease: str, split: str) -> BinaryTask:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if any(r.split is None for r in records):
        raise ValueError("records must have splits assigned")
    pos, neg = [], []
    for r in records:
        if r.split == split:
            (pos if r.has(disease) else neg).append(r.id)
    return BinaryTask(disease, tuple(pos), tuple(neg), split)


def oversample(task: BinaryTask, seed: int = 0) -> BinaryTask:
    """Duplicate minority-class ids (with replacement) until both classes match.

    Original ids keep their order and come first; extra draws follow.
    """
    if task.split != "train":
        raise BalancingError(f"oversampling is restricted to the train split, got {task.split!r}")
    pos, neg = task.positives, task.negatives
    if not pos or not neg:
        raise BalancingError(f"{task.disease}: cannot balance with an empty class "
                             f"({len(pos)} positives, {len(neg)} negatives)")
    if len(pos) == len(neg):
        return task
    rng = np.random.default_rng(seed)
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    extra = rng.choice(len(minority), size=len(majority) - len(minority), replace=True)
    grown = minority + tuple(minority[i] for i in extra)
    if minority is pos:
        return replace(task, positives=grown)
    return replace(task, negatives=grown)


def sample_pairs(task: BinaryTask, n_pairs: int, same_ratio: float = 0.5,
                 seed: int = 0) -> list[PairSample]:
    """Draw labelled pairs for metric learning.

    ``round(n_pairs * same_ratio)`` (half up) pairs share a class, split as
    evenly as possible between positive-positive and negative-negative;
    the rest pair a positive with a negative in random order.
    """
    pos = list(dict.fromkeys(task.positives))
    neg = list(dict.fromkeys(task.negatives))
    if len(pos) < 2 or len(neg) < 2:
        raise PairSamplingError(f"{task.disease}: need >= 2 positives and >= 2 negatives, "
                                f"have {len(pos)} and {len(neg)}")
    if n_pairs < 0 or not 0.0 <= same_ratio <= 1.0:
        raise ValueError("n_pairs must be >= 0 and same_ratio in [0, 1]")
    rng = np.random.default_rng(seed)
    n_same = math.floor(n_pairs * same_ratio + 0.5)
    n_pp = n_same // 2
    n_nn = n_same - n_pp
    pairs: list[PairSample] = []
    for ids, k in ((pos, n_pp), (neg, n_nn)):
        for _ in range(k):
            a, b = rng.choice(len(ids), size=2, replace=False)
            pairs.append(PairSample(ids[a], ids[b], True))
    for _ in range(n_pairs - n_same):
        p = pos[rng.integers(len(pos))]
        q = neg[rng.integers(len(neg))]
        if rng.random() < 0.5:
            p, q = q, p
        pairs.append(PairSample(p, q, False))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]
