"""Stage orchestration used by the command line: prepare, train, search, eval, predict.

Everything here reads its parameters from a :class:`~trio_fundus.config.Config`
and derives every random seed from the root seed with ``child_seed``.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import fusion as fu
from . import imgproc as ip
from . import nets
from .config import Config, ConfigError, child_seed, write_snapshot

log = logging.getLogger(__name__)

COMPONENT_TAGS = fu.COMPONENT_TAGS
COMPONENT_NUMBER = {"component1": 1, "component2": 2, "siamese": 3}
TAG_FOR_CHOICE = {"1": "component1", "2": "component2", "3": "siamese"}


class DataError(Exception):
    """Missing or malformed inputs (exit code 2)."""


class StageError(Exception):
    """Training or evaluation failure (exit code 3)."""


def apply_runtime(cfg: Config) -> None:
    import cv2
    import torch

    if cfg["runtime.single_threaded"]:
        torch.set_num_threads(1)
        cv2.setNumThreads(1)
    torch.use_deterministic_algorithms(True)


def preprocess_params(cfg: Config) -> dict:
    return {
        "cache_size": cfg["imgproc.cache_size"],
        "border_threshold": cfg["imgproc.border_threshold"],
        "clahe_clip": cfg["imgproc.clahe_clip"],
        "clahe_grid": cfg["imgproc.clahe_grid"],
        "posterize_bits": cfg["imgproc.posterize_bits"],
        "posterize_mode": cfg["imgproc.posterize_mode"],
        "input_sizes": {t: cfg[f"nets.{t}.input_size"] for t in COMPONENT_TAGS},
    }


def filter_spec(cfg: Config) -> ip.FilterSpec:
    return ip.FilterSpec(cfg["imgproc.posterize_bits"], cfg["imgproc.posterize_mode"])


def augment_spec(cfg: Config) -> ip.AugmentSpec | None:
    if not cfg["imgproc.augment"]:
        return None
    names = ("rotation_deg", "crop_fraction", "shear_deg", "gauss_sigma", "pixel_noise_amp",
             "blur_radius", "zoom_factor", "flip", "brightness_delta")
    return ip.AugmentSpec(**{n: cfg[f"augment.{n}"] for n in names})


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


# --------------------------------------------------------------------------- synth / prepare


def synth(cfg: Config, n: int, diseases: Sequence[str], co_occurrence: float = 0.1) -> Path:
    root = cfg.path("paths.data_root")
    ds_seed = child_seed(cfg["seed"], "synth")
    from .synthetic import generate_synthetic

    generate_synthetic(n, diseases, ds_seed, root, co_occurrence)
    write_snapshot(root, "synth", {"n": n, "diseases": list(diseases), "co_occurrence": co_occurrence}, cfg)
    return root


def resolve_records(cfg: Config) -> list[ds.ImageRecord]:
    root = cfg.path("paths.data_root")
    labels = root / cfg["dataset.labels_csv"]
    if not labels.is_file():
        raise DataError(f"labels CSV not found: {labels}")
    recs = ds.load_labels(labels, root)
    ratios = cfg["dataset.split_ratios"]
    mode = cfg["dataset.split_mode"]
    if mode == "given":
        if cfg["dataset.split_manifest"]:
            recs = ds.apply_split_manifest(recs, ds.read_split_manifest(root / cfg["dataset.split_manifest"]))
        ds.validate_split(recs, ratios, diseases=cfg.diseases)
        return recs
    if mode == "stratify":
        return ds.stratified_split(recs, ratios, child_seed(cfg["seed"], "split"), cfg.diseases)
    raise ConfigError(f"dataset.split_mode must be 'stratify' or 'given', got {mode!r}")


@dataclass
class PrepareResult:
    processed: int = 0
    skipped: int = 0
    errors: list[tuple[str, str, str]] = field(default_factory=list)


MANIFEST_HEADER = ("id", "split", "source_sha256", "params", "png_sha256", "stack_sha256")


def _read_manifest(path: Path) -> dict[str, dict]:
    if not path.is_file():
        return {}
    with path.open(newline="") as fh:
        return {r["id"]: r for r in csv.DictReader(fh)}


def prepare(cfg: Config) -> PrepareResult:
    """Crop, equalize and filter every labelled image into the cache.

    Images whose source bytes, parameters and cached outputs are unchanged
    are skipped. Unreadable images are listed in ``prepare_errors.csv``.
    """
    cache = cfg.path("paths.cache_dir")
    cache.mkdir(parents=True, exist_ok=True)
    try:
        recs = resolve_records(cfg)
    except (ds.DatasetError, OSError) as exc:
        raise DataError(str(exc)) from exc
    params = preprocess_params(cfg)
    pkey = _sha(json.dumps(params, sort_keys=True).encode())[:16]
    fspec = filter_spec(cfg)
    old = _read_manifest(cache / "manifest.csv")
    result, rows = PrepareResult(), []
    for r in recs:
        png_path = cache / r.split / f"{r.id}.png"
        stk_path = cache / r.split / f"{r.id}.fstk"
        try:
            src = r.image_path.read_bytes()
        except OSError as exc:
            result.errors.append((r.id, str(r.image_path), f"unreadable: {exc.strerror or exc}"))
            continue
        src_sha = _sha(src)
        prev = old.get(r.id)
        if (prev and prev["source_sha256"] == src_sha and prev["params"] == pkey and prev["split"] == r.split
                and png_path.is_file() and stk_path.is_file()
                and _sha(png_path.read_bytes()) == prev["png_sha256"]
                and _sha(stk_path.read_bytes()) == prev["stack_sha256"]):
            rows.append([prev[k] for k in MANIFEST_HEADER])
            result.skipped += 1
            continue
        try:
            img = ip.decode_image(src)
            prepped = ip.preprocess(img, params["cache_size"], params["border_threshold"],
                                    params["clahe_clip"], params["clahe_grid"])
            png = ip.encode_png(prepped)
            stk = ip.pack_stack(ip.filter_stack(prepped, fspec).planes())
        except ip.ImageError as exc:
            result.errors.append((r.id, str(r.image_path), str(exc)))
            continue
        atomic_write(png_path, png)
        atomic_write(stk_path, stk)
        rows.append([r.id, r.split, src_sha, pkey, _sha(png), _sha(stk)])
        result.processed += 1
    kept = {row[0] for row in rows}
    ds.write_labels([r for r in recs if r.id in kept], cache / "labels.csv")
    ds.write_split_manifest(recs, cache / "splits.csv")
    _write_rows(cache / "manifest.csv", MANIFEST_HEADER, rows)
    _write_rows(cache / "prepare_errors.csv", ("id", "path", "error"), result.errors)
    write_snapshot(cache, "prepare", {}, cfg)
    log.info("prepare: %d processed, %d skipped, %d errors", result.processed, result.skipped,
             len(result.errors))
    return result


class CacheView:
    """Read-only access to prepared images and their records."""

    def __init__(self, cfg: Config):
        self.root = cfg.path("paths.cache_dir").absolute()
        manifest = _read_manifest(self.root / "manifest.csv")
        if not manifest:
            raise DataError(f"no prepared cache at {self.root}; run `prepare` first")
        labels = {r.id: r.labels for r in ds.load_labels(self.root / "labels.csv", self.root)}
        self.records = [ds.ImageRecord(rid, self.root / m["split"] / f"{rid}.png", labels[rid], m["split"])
                        for rid, m in manifest.items()]
        self.by_id = {r.id: r for r in self.records}
        self._images: dict[str, np.ndarray] = {}

    def image(self, rid: str) -> np.ndarray:
        if rid not in self._images:
            self._images[rid] = ip.read_image(self.by_id[rid].image_path)
        return self._images[rid]

    def images(self, ids: Sequence[str]) -> list[np.ndarray]:
        return [self.image(i) for i in ids]

    def split_records(self, split: str) -> list[ds.ImageRecord]:
        return [r for r in self.records if r.split == split]


# --------------------------------------------------------------------------- training


def head_config(cfg: Config, disease: str, tag: str) -> nets.HeadConfig:
    return nets.HeadConfig(
        component=COMPONENT_NUMBER[tag],
        backbone_id=cfg[f"nets.{tag}.backbone"],
        head_dims=cfg[f"nets.{tag}.head_dims"],
        input_size=cfg[f"nets.{tag}.input_size"],
        seed=child_seed(cfg["seed"], disease, tag, "init"),
        dropout=cfg["nets.dropout"],
        weights_path=cfg[f"nets.{tag}.weights_path"],
        embedding_dim=cfg["nets.siamese.embedding_dim"],
        margin=cfg["nets.siamese.margin"],
    )


def train_config(cfg: Config, disease: str, tag: str) -> nets.TrainConfig:
    p = f"train.{tag}."
    return nets.TrainConfig(
        epochs=cfg[p + "epochs"], batch_size=cfg[p + "batch_size"], learning_rate=cfg[p + "learning_rate"],
        early_stop_patience=cfg[p + "early_stop_patience"], seed=child_seed(cfg["seed"], disease, tag, "train"),
        optimizer_name=cfg[p + "optimizer"], unfreeze_epoch=cfg[p + "unfreeze_epoch"])


def _tasks(cfg: Config, view: CacheView, disease: str):
    train = ds.make_binary_task(view.records, disease, "train")
    val = ds.make_binary_task(view.records, disease, "validation")
    balanced = ds.oversample(train, child_seed(cfg["seed"], disease, "oversample"))
    return train, val, balanced


def _labels(task: ds.BinaryTask) -> tuple[list[str], np.ndarray]:
    pairs = task.labelled()
    return [i for i, _ in pairs], np.array([y for _, y in pairs], dtype=np.int64)


def train_components(cfg: Config, disease: str, view: CacheView,
                     tags: Sequence[str] = COMPONENT_TAGS) -> dict[str, tuple[object, nets.History]]:
    ds.check_disease(disease)
    try:
        train, val, balanced = _tasks(cfg, view, disease)
    except ds.DatasetError as exc:
        raise DataError(f"{disease}: {exc}") from exc
    fspec, aspec = filter_spec(cfg), augment_spec(cfg)
    bal_ids, bal_y = _labels(balanced)
    val_ids, val_y = _labels(val)
    out = {}
    for tag in tags:
        comp, size = COMPONENT_NUMBER[tag], cfg[f"nets.{tag}.input_size"]
        hcfg, tcfg = head_config(cfg, disease, tag), train_config(cfg, disease, tag)
        inputs = lambda ids: np.stack([ip.component_input(view.image(i), comp, size, fspec) for i in ids])  # noqa: E731
        try:
            if tag == "siamese":
                model, hist = _train_siamese(cfg, disease, view, train, val, hcfg, tcfg, inputs)
            else:
                model = nets.ComponentHead(hcfg)
                if aspec is None:
                    source = (inputs(bal_ids), bal_y)
                else:
                    aug_seed = child_seed(cfg["seed"], disease, tag, "augment")

                    def source(epoch, comp=comp, size=size):
                        x = np.stack([
                            ip.component_input(ip.augment(view.image(i), aspec, child_seed(aug_seed, epoch, j), size),
                                               comp, size, fspec)
                            for j, i in enumerate(bal_ids)])
                        return x, bal_y
                val_data = (inputs(val_ids), val_y) if val_ids else None
                model, hist = nets.train_binary_head(model, source, val_data, tcfg)
        except nets.AssetError:
            raise
        except nets.TrainingDivergedError as exc:
            raise StageError(f"{disease}/{tag}: {exc}") from exc
        out[tag] = (model, hist)
    return out


def _train_siamese(cfg, disease, view, train, val, hcfg, tcfg, inputs):
    n_pairs, ratio = cfg["nets.siamese.n_pairs"], cfg["nets.siamese.same_ratio"]
    try:
        pairs = ds.sample_pairs(train, n_pairs, ratio, child_seed(cfg["seed"], disease, "pairs", "train"))
    except ds.PairSamplingError as exc:
        raise DataError(f"{disease}: {exc}") from exc
    cache: dict[str, np.ndarray] = {}

    def arrays(ps):
        for p in ps:
            for i in (p.id_a, p.id_b):
                if i not in cache:
                    cache[i] = inputs([i])[0]
        return (np.stack([cache[p.id_a] for p in ps]), np.stack([cache[p.id_b] for p in ps]),
                np.array([p.same for p in ps], dtype=np.int64))

    try:
        vpairs = ds.sample_pairs(val, max(2, n_pairs // 4), ratio, child_seed(cfg["seed"], disease, "pairs", "val"))
        val_data = arrays(vpairs)
    except ds.PairSamplingError:
        val_data = None
    model = nets.SiameseModel(hcfg)
    model, hist = nets.train_siamese(model, arrays(pairs), val_data, tcfg)
    ids, y = _labels(train)
    nets.set_prototypes(model, inputs(ids), y)
    return model, hist


def ensemble_config(cfg: Config, disease: str) -> fu.EnsembleConfig:
    return fu.EnsembleConfig(
        voting_mode=cfg["fusion.voting"], threshold=cfg["fusion.threshold"], tree_depth=cfg["fusion.tree_depth"],
        forest_trees=cfg["fusion.forest_trees"], logistic_c=cfg["fusion.logistic_c"], svm_c=cfg["fusion.svm_c"],
        knn_k=cfg["fusion.knn_k"], seed=child_seed(cfg["seed"], disease, "ensemble"))


def fit_fusion(cfg: Config, disease: str, view: CacheView,
               components: dict[str, object]) -> tuple[fu.DetectorBundle, dict[str, fu.FeatureMatrix]]:
    """PCA on the train split's trio features, ensemble on the oversampled rows."""
    train, val, balanced = _tasks(cfg, view, disease)
    spec = [(t, components[t].feature_dim) for t in COMPONENT_TAGS]
    bundle = fu.DetectorBundle(disease, dict(components), None, None, spec, preprocess_params(cfg))
    ids = list(train.ids)
    feats = {"train": fu.bundle_features(bundle, view.images(ids), ids)}
    try:
        pca = fu.fit_pca(feats["train"], cfg["fusion.variance_target"])
    except fu.DegenerateInputError as exc:
        raise StageError(f"{disease}/pca: {exc}") from exc
    row = {i: k for k, i in enumerate(ids)}
    bal_ids, bal_y = _labels(balanced)
    Z = fu.project(pca, feats["train"].X[[row[i] for i in bal_ids]])
    ensemble = fu.train_ensemble(Z, bal_y, ensemble_config(cfg, disease))
    bundle.pca, bundle.ensemble = pca, ensemble
    if val.ids:
        vids = list(val.ids)
        feats["validation"] = fu.bundle_features(bundle, view.images(vids), vids)
        if cfg["fusion.threshold_policy"] == "tune_f1" and val.positives and val.negatives:
            prob, _ = ensemble.predict(fu.project(pca, feats["validation"]))
            ensemble.threshold = fu.tune_threshold(prob, _labels(val)[1])
    elif cfg["fusion.threshold_policy"] not in ("fixed", "tune_f1"):
        raise ConfigError(f"unknown threshold policy {cfg['fusion.threshold_policy']!r}")
    return bundle, feats


def _replace_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def train(cfg: Config, disease: str, component: str = "all") -> Path:
    """Train one disease's components; ``all`` also fits fusion into a complete bundle."""
    ds.check_disease(disease)
    view = CacheView(cfg)
    bundles = cfg.path("paths.bundles_dir")
    final = bundles / disease
    tmp = bundles / f".{disease}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    args = {"disease": disease, "component": component}
    if component == "all":
        trained = train_components(cfg, disease, view)
        bundle, feats = fit_fusion(cfg, disease, view, {t: m for t, (m, _) in trained.items()})
        fu.save_bundle(bundle, tmp, {t: h for t, (_, h) in trained.items()})
        write_snapshot(tmp, "train", args, cfg)
        _replace_dir(tmp, final)
        fdir = cfg.path("paths.cache_dir") / "features" / disease
        fdir.mkdir(parents=True, exist_ok=True)
        for split, fm in feats.items():
            fu.write_feature_csv(fm, fdir / f"features_{split}.csv")
    else:
        tag = TAG_FOR_CHOICE[component]
        model, hist = train_components(cfg, disease, view, (tag,))[tag]
        nets.save_component(model, hist, tmp)
        final.mkdir(parents=True, exist_ok=True)
        _replace_dir(tmp, final / tag)
        write_snapshot(final, "train", args, cfg)
    return final


# --------------------------------------------------------------------------- evaluation


def score_split(bundle: fu.DetectorBundle, view: CacheView, split: str):
    recs = view.split_records(split)
    ids = [r.id for r in recs]
    y = np.array([int(r.has(bundle.disease)) for r in recs])
    prob, label = fu.predict_batch(bundle, view.images(ids))
    return ids, y, prob, label


@dataclass
class EvalResult:
    rows: list[ev.MetricsRow]
    errors: dict[str, str]
    report: Path


def evaluate(cfg: Config, split: str = "test", benchmark: str | Path | None = None,
             plots: bool = False, diseases: Sequence[str] | None = None) -> EvalResult:
    """Score every requested bundle on ``split`` and write the report files."""
    view = CacheView(cfg)
    out = cfg.path("paths.reports_dir")
    out.mkdir(parents=True, exist_ok=True)
    diseases = list(diseases or cfg.diseases)
    rows, errors = [], {}
    n = len(view.split_records(split))
    if n == 0:
        raise DataError(f"split {split!r} is empty")
    for d in diseases:
        bdir = cfg.path("paths.bundles_dir") / d
        if not (bdir / "manifest.json").is_file():
            errors[d] = f"missing bundle {bdir}"
            continue
        try:
            bundle = fu.load_bundle(bdir)
            _, y, prob, label = score_split(bundle, view, split)
            row, curve = ev.evaluate_scores(d, prob, y, label)
        except Exception as exc:  # per-disease failures must not stop the others
            log.exception("evaluation failed for %s", d)
            errors[d] = str(exc)
            continue
        rows.append(row)
        if curve is not None:
            ev.write_roc(curve, out / f"roc_{d}.csv")
            if plots:
                ev.plot_roc(curve, d, out / f"roc_{d}.png")
    report = out / "report.csv"
    written = ev.write_report(rows, report)
    for r in ev.read_report(report)[: len(rows)]:
        if not ev.is_integer_consistent(r, n):
            raise StageError(f"report row {r.disease} is not integer-consistent at n={n}")
    if benchmark is not None:
        deltas = ev.benchmark_compare(rows, ev.read_benchmark_csv(benchmark))
        ev.write_benchmark_delta(deltas, out / "benchmark_delta.csv")
    _write_rows(out / "eval_errors.csv", ("disease", "error"), sorted(errors.items()))
    write_snapshot(out, "eval", {"split": split, "benchmark": None if benchmark is None else str(benchmark),
                                 "plots": plots}, cfg)
    return EvalResult(written, errors, report)


# --------------------------------------------------------------------------- search


SEARCH_HEADER = ("rank", "head_dims", "learning_rate", "variance_target", "voting", "f1", "auc")


def _candidate_key(hd, lr, vt, voting) -> str:
    return f"head_dims={'x'.join(map(str, hd))};learning_rate={lr!r};variance_target={vt!r};voting={voting}"


def candidate_config(cfg: Config, hd, lr, vt, voting) -> Config:
    c = Config(dict(cfg))
    c.set("nets.component1.head_dims", tuple(hd))
    for tag in COMPONENT_TAGS:
        c.set(f"train.{tag}.learning_rate", float(lr))
    c.set("fusion.variance_target", float(vt))
    c.set("fusion.voting", voting)
    return c


def validation_metrics(cfg: Config, disease: str, view: CacheView, bundle: fu.DetectorBundle) -> tuple[float, float]:
    _, y, prob, label = score_split(bundle, view, "validation")
    row, _ = ev.evaluate_scores(disease, prob, y, label)
    return row.f1, row.auc


def rank_candidates(board: list[dict]) -> list[dict]:
    """Best first: higher F1, then higher AUC (undefined counts as lowest), then config key."""
    return sorted(board, key=lambda b: (-b["f1"], -(b["auc"] if np.isfinite(b["auc"]) else -1.0), b["key"]))


def search(cfg: Config, disease: str) -> tuple[Config, list[dict]]:
    """Exhaustive grid on the validation split; leaderboard sorted by F1, AUC, then config key."""
    ds.check_disease(disease)
    grids = [cfg["search.component1.head_dims"], cfg["search.learning_rate"],
             cfg["search.variance_target"], cfg["search.voting"]]
    if any(len(g) == 0 for g in grids):
        raise ConfigError("search space is empty")
    view = CacheView(cfg)
    board = []
    for hd, lr in itertools.product(grids[0], grids[1]):
        base = candidate_config(cfg, hd, lr, grids[2][0], grids[3][0])
        comps = {t: m for t, (m, _) in train_components(base, disease, view).items()}
        for vt, voting in itertools.product(grids[2], grids[3]):
            c = candidate_config(cfg, hd, lr, vt, voting)
            bundle, _ = fit_fusion(c, disease, view, comps)
            f1, auc = validation_metrics(c, disease, view, bundle)
            board.append({"head_dims": tuple(hd), "learning_rate": lr, "variance_target": vt, "voting": voting,
                          "f1": f1, "auc": auc, "key": _candidate_key(hd, lr, vt, voting), "config": c})
    board = rank_candidates(board)
    out = cfg.path("paths.reports_dir") / "search" / disease
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "leaderboard.csv", SEARCH_HEADER, [
        [k + 1, "x".join(map(str, b["head_dims"])), repr(b["learning_rate"]), repr(b["variance_target"]),
         b["voting"], repr(b["f1"]), repr(b["auc"])] for k, b in enumerate(board)])
    best = board[0]["config"]
    atomic_write(out / "best.cfg", best.to_text().encode())
    write_snapshot(out, "search", {"disease": disease}, cfg)
    return best, board


# --------------------------------------------------------------------------- predict


def predict(cfg: Config, image_path: str | Path, diseases: Sequence[str]) -> list[tuple[str, float, int]]:
    """Per-disease ``(name, probability, label)`` rows followed by the ``NORMAL`` row."""
    try:
        img = ip.read_image(image_path)
    except ip.ImageError as exc:
        raise DataError(str(exc)) from exc
    out = []
    for d in diseases:
        bdir = cfg.path("paths.bundles_dir") / d
        if not (bdir / "manifest.json").is_file():
            raise DataError(f"missing bundle {bdir}")
        prob, label = fu.predict_disease(fu.load_bundle(bdir), img)
        out.append((d, prob, label))
    p_norm = float(np.prod([1.0 - p for _, p, _ in out])) if out else 1.0
    out.append((ds.NORMAL, p_norm, int(all(lbl == 0 for _, _, lbl in out))))
    return out
