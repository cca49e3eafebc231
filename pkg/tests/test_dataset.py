import collections
import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trio_fundus import dataset as ds
from trio_fundus.dataset import DISEASES, ImageRecord

# per-disease positives (train, validation, test) of the public retinal set
PUBLISHED_COUNTS = {
    "DN": (138, 46, 46), "ODC": (282, 72, 91), "TSLN": (186, 65, 53), "ARMD": (100, 38, 31),
    "RS": (43, 14, 14), "ODE": (58, 21, 17), "ODP": (65, 26, 24), "DR": (376, 132, 124),
    "MH": (317, 102, 104), "BRVO": (73, 23, 23), "MYA": (101, 34, 32), "CRVO": (28, 8, 9),
}
TRAIN_TOTAL, TRAIN_NORMAL = 3286, 1519


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def rec(i, labels=(), split=None):
    return ImageRecord(str(i), None, frozenset(labels), split)


def row(rid, labels):
    return [rid, int(bool(labels))] + [int(d in labels) for d in DISEASES]


def test_row_maps_to_label_set(tmp_path):
    write_csv(tmp_path / "l.csv", ds.LABEL_HEADER, [row("7", {"DN", "DR"}), row("8", set())])
    a, b = ds.load_labels(tmp_path / "l.csv")
    assert a.id == "7" and a.labels == {"DN", "DR"}
    assert b.labels == frozenset() and b.is_normal
    assert a.image_path == tmp_path / "7.png"


def test_missing_id_column(tmp_path):
    write_csv(tmp_path / "l.csv", ["Name", "DN"], [["1", "0"]])
    with pytest.raises(ds.LabelFormatError, match="ID"):
        ds.load_labels(tmp_path / "l.csv")


def test_bad_cell_names_row_and_column(tmp_path):
    write_csv(tmp_path / "l.csv", ["ID", "DN", "MYA"], [["1", "0", "1"], ["2", "0", "2"]])
    with pytest.raises(ds.LabelFormatError, match=r"row 3, column MYA"):
        ds.load_labels(tmp_path / "l.csv")


def test_unknown_columns_warn(tmp_path, caplog):
    write_csv(tmp_path / "l.csv", ["ID", "DN", "EXTRA"], [["1", "1", "x"]])
    (r,) = ds.load_labels(tmp_path / "l.csv")
    assert r.labels == {"DN"}
    assert "EXTRA" in caplog.text


def test_split_column_honoured(tmp_path):
    write_csv(tmp_path / "l.csv", ["ID", "DN", "split"], [["1", "1", "test"], ["2", "0", "train"]])
    assert [r.split for r in ds.load_labels(tmp_path / "l.csv")] == ["test", "train"]


def published_records():
    """Synthetic label table whose column sums reproduce the published per-split counts."""
    out, k = [], 0
    for si, split in enumerate(ds.SPLITS):
        n_split = (TRAIN_TOTAL, 1087, 1074)[si]
        n_norm = (TRAIN_NORMAL, 506, 506)[si]
        labels = [set() for _ in range(n_split)]
        cursor = n_norm
        for d in DISEASES:
            for _ in range(PUBLISHED_COUNTS[d][si]):
                labels[n_norm + (cursor - n_norm) % (n_split - n_norm)].add(d)
                cursor += 1
        for lab in labels:
            k += 1
            out.append(rec(k, lab, split))
    return out


def test_published_train_counts(tmp_path):
    recs = published_records()
    write_csv(tmp_path / "l.csv", list(ds.LABEL_HEADER) + ["split"],
              [row(r.id, r.labels) + [r.split] for r in recs])
    loaded = ds.load_labels(tmp_path / "l.csv")
    train = [r for r in loaded if r.split == "train"]
    assert sum(r.has("DN") for r in train) == 138
    assert ds.make_binary_task(loaded, "DN", "test").positives.__len__() == 46
    # independent column sum over the published training column
    assert sum(v[0] for v in PUBLISHED_COUNTS.values()) == 1767 == TRAIN_TOTAL - TRAIN_NORMAL
    assert sum(len(ds.make_binary_task(loaded, d, "train").positives) for d in DISEASES) == 1767


def test_published_fractions_within_tolerance():
    fr = ds.validate_split(published_records())
    assert fr["DN"] == pytest.approx((0.6, 0.2, 0.2))


def test_validate_split_rejects_skew():
    recs = [rec(i, {"DN"}, "train") for i in range(9)] + [rec(9, {"DN"}, "test")]
    with pytest.raises(ds.SplitToleranceError, match="DN/validation"):
        ds.validate_split(recs)


def test_stratified_split_rejects_zero_ratio():
    recs = [rec(i, {"DN"} if i < 10 else ()) for i in range(30)]
    with pytest.raises(ValueError):
        ds.stratified_split(recs, (1.0, 0.0, 0.0), diseases=("DN",))
    # the alternate entry point accepts it
    done = [ImageRecord(r.id, None, r.labels, "train") for r in recs]
    assert ds.validate_split(done, (1.0, 0.0, 0.0), diseases=("DN",))["DN"] == (1.0, 0.0, 0.0)


def test_stratified_split_too_few_positives():
    recs = [rec(i, {"DN"} if i < 2 else ()) for i in range(30)]
    with pytest.raises(ds.StratificationError):
        ds.stratified_split(recs, diseases=("DN",))


def test_stratified_split_deterministic_and_exact():
    recs = [rec(i, {"DN"} if i < 50 else ()) for i in range(100)]
    a = ds.stratified_split(recs, seed=3, diseases=("DN",))
    b = ds.stratified_split(recs, seed=3, diseases=("DN",))
    assert [r.split for r in a] == [r.split for r in b]
    c = collections.Counter((r.split, r.has("DN")) for r in a)
    assert (c["train", True], c["validation", True], c["test", True]) == (30, 10, 10)
    assert c["train", True] + c["train", False] == 60


def test_stratified_split_full_scale():
    recs = [ImageRecord(r.id, None, r.labels, None) for r in published_records()]
    ds.validate_split(ds.stratified_split(recs, seed=0))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sets(st.sampled_from(("DN", "MYA", "DR"))), min_size=40, max_size=120),
       st.integers(0, 2**31 - 1))
def test_split_property_every_record_once(labels, seed):
    recs = [rec(i, lab) for i, lab in enumerate(labels)]
    counts = {d: sum(d in lab for lab in labels) for d in ("DN", "MYA", "DR")}
    if any(0 < c < 3 for c in counts.values()):
        with pytest.raises(ds.StratificationError):
            ds.stratified_split(recs, seed=seed, diseases=("DN", "MYA", "DR"))
        return
    out = ds.stratified_split(recs, seed=seed, diseases=("DN", "MYA", "DR"))
    assert [r.id for r in out] == [r.id for r in recs]
    assert all(r.split in ds.SPLITS for r in out)
    n = len(out)
    sizes = collections.Counter(r.split for r in out)
    assert abs(sizes["train"] - 0.6 * n) <= 1 and abs(sizes["test"] - 0.2 * n) <= 1


def test_binary_task_and_empty_positives():
    recs = [rec(1, {"DN"}, "test"), rec(2, (), "test"), rec(3, {"DN"}, "train")]
    t = ds.make_binary_task(recs, "DN", "test")
    assert t.positives == ("1",) and t.negatives == ("2",)
    t = ds.make_binary_task(recs, "MYA", "test")
    assert t.positives == () and len(t.negatives) == 2


def make_task(n_pos, n_neg, split="train"):
    return ds.BinaryTask("DN", tuple(f"p{i}" for i in range(n_pos)),
                         tuple(f"n{i}" for i in range(n_neg)), split)


def test_oversample_balances():
    t = ds.oversample(make_task(10, 90), seed=1)
    assert len(t.positives) == len(t.negatives) == 90
    assert t.positives[:10] == tuple(f"p{i}" for i in range(10))
    assert ds.oversample(make_task(50, 50)) == make_task(50, 50)


def test_oversample_dn_scale_recount():
    task = make_task(138, 1782)
    t = ds.oversample(task, seed=5)
    assert len(t.positives) == len(t.negatives) == 1782
    # independent tally: every original present, extras drawn only from originals
    tally = collections.Counter(t.positives)
    assert set(tally) == set(task.positives)
    assert sum(tally.values()) == 1782 and min(tally.values()) >= 1
    assert t.negatives == task.negatives


def test_oversample_errors():
    with pytest.raises(ds.BalancingError):
        ds.oversample(make_task(0, 5))
    with pytest.raises(ds.BalancingError):
        ds.oversample(make_task(3, 5, "validation"))


def test_pairs_exact_ratio():
    ps = ds.sample_pairs(make_task(20, 30), 100, 0.5, seed=2)
    assert sum(p.same for p in ps) == 50
    for p in ps:
        assert p.same == (p.id_a[0] == p.id_b[0])
        assert p.id_a != p.id_b


def test_pairs_forced_by_availability():
    ps = ds.sample_pairs(make_task(2, 2), 4, 0.5, seed=0)
    same = {frozenset((p.id_a, p.id_b)) for p in ps if p.same}
    assert same == {frozenset(("p0", "p1")), frozenset(("n0", "n1"))}


def test_pairs_odd_count_recount():
    ps = ds.sample_pairs(make_task(5, 5), 101, 0.5, seed=9)
    n_same = sum(1 for p in ps if p.id_a[0] == p.id_b[0])
    assert len(ps) == 101 and n_same in (50, 51)
    assert n_same == sum(p.same for p in ps)


def test_pairs_insufficient():
    with pytest.raises(ds.PairSamplingError):
        ds.sample_pairs(make_task(1, 5), 10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 15), st.integers(2, 15), st.integers(0, 60), st.floats(0, 1), st.integers(0, 1000))
def test_pairs_property(n_pos, n_neg, n, ratio, seed):
    ps = ds.sample_pairs(make_task(n_pos, n_neg), n, ratio, seed)
    assert len(ps) == n
    assert sum(p.same for p in ps) == math.floor(n * ratio + 0.5)


def test_split_manifest_roundtrip(tmp_path):
    recs = [rec(1, {"DN"}, "train"), rec(2, (), "test")]
    ds.write_split_manifest(recs, tmp_path / "s.csv")
    m = ds.read_split_manifest(tmp_path / "s.csv")
    assert m == {"1": "train", "2": "test"}
    bare = [ImageRecord(r.id, None, r.labels) for r in recs]
    assert ds.apply_split_manifest(bare, m) == recs


def test_labels_roundtrip(tmp_path):
    recs = [rec(1, {"DN", "CRVO"}), rec(2, ())]
    ds.write_labels(recs, tmp_path / "l.csv")
    back = ds.load_labels(tmp_path / "l.csv")
    assert [(r.id, r.labels) for r in back] == [(r.id, r.labels) for r in recs]
    assert np.array(back[0].bits()).sum() == 2
