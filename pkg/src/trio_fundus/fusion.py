"""Feature fusion: PCA over concatenated trio features and the five-member voting ensemble."""

from __future__ import annotations

import csv
import hashlib
import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.calibration import CalibratedClassifierCV
from sklearn.ensemble import RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold
from sklearn.neighbors import KNeighborsClassifier
from sklearn.svm import SVC
from sklearn.tree import DecisionTreeClassifier

from .nets import SchemaError

MEMBERS = ("decision_tree", "random_forest", "logistic_regression",
           "support_vector_machine", "k_nearest_neighbors")
COMPONENT_TAGS = ("component1", "component2", "siamese")
BUNDLE_VERSION = "1"


class DegenerateInputError(ValueError):
    pass


class DegenerateLabelError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    ids: list[str]
    X: np.ndarray
    column_spec: list[tuple[str, int]]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] != len(self.ids):
            raise SchemaError(f"matrix shape {self.X.shape} does not match {len(self.ids)} ids")
        if sum(d for _, d in self.column_spec) != self.X.shape[1]:
            raise SchemaError(f"column_spec widths sum to {sum(d for _, d in self.column_spec)}, "
                              f"matrix has {self.X.shape[1]} columns")
        if not np.isfinite(self.X).all():
            raise SchemaError("feature matrix contains non-finite entries")

    @classmethod
    def concat(cls, ids: Sequence[str], blocks: dict[str, np.ndarray]) -> "FeatureMatrix":
        """Join per-component blocks in the fixed order component1, component2, siamese."""
        unknown = set(blocks) - set(COMPONENT_TAGS)
        if unknown:
            raise SchemaError(f"unknown component tags {sorted(unknown)}")
        tags = [t for t in COMPONENT_TAGS if t in blocks]
        X = np.hstack([np.asarray(blocks[t], dtype=np.float64) for t in tags])
        return cls(list(ids), X, [(t, np.asarray(blocks[t]).shape[1]) for t in tags])

    def columns(self) -> list[str]:
        return [f"{tag}_{i}" for tag, d in self.column_spec for i in range(d)]

    def take(self, rows: Sequence[int]) -> "FeatureMatrix":
        rows = list(rows)
        return FeatureMatrix([self.ids[i] for i in rows], self.X[rows], list(self.column_spec))


def write_feature_csv(fm: FeatureMatrix, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *fm.columns()])
        for rid, row in zip(fm.ids, fm.X):
            w.writerow([rid, *(f"{v:.9g}" for v in row)])
    spec = path.with_name("column_spec.json")
    spec.write_text(json.dumps([list(c) for c in fm.column_spec]) + "\n")


def read_feature_csv(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    spec = [tuple(c) for c in json.loads(path.with_name("column_spec.json").read_text())]
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    fm = FeatureMatrix([r[0] for r in rows],
                       np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), -1),
                       spec)
    if header[1:] != fm.columns():
        raise SchemaError(f"{path}: header does not match column_spec.json")
    return fm


# --------------------------------------------------------------------------- PCA


@dataclass
class PCATransform:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def _as_matrix(X) -> np.ndarray:
    return X.X if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)


def fit_pca(X_train, variance_target: float = 0.95) -> PCATransform:
    """Principal axes from the SVD of the centered training matrix.

    Keeps the fewest components whose cumulative explained-variance ratio
    reaches ``variance_target``. Each component is sign-fixed so its
    largest-magnitude entry is nonnegative.
    """
    X = _as_matrix(X_train)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("PCA needs a 2-D matrix with at least two rows")
    if not 0.0 < variance_target <= 1.0:
        raise ValueError(f"variance_target must lie in (0, 1], got {variance_target}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2 / (X.shape[0] - 1)
    total = var.sum()
    if total <= 0 or s[0] <= 1e-12 * max(1.0, np.abs(X).max()):
        raise DegenerateInputError("all rows identical; nothing to decompose")
    ratio = var / total
    k = int(np.searchsorted(np.cumsum(ratio), variance_target - 1e-12) + 1)
    k = min(k, len(s))
    comps = vt[:k].copy()
    lead = np.argmax(np.abs(comps), axis=1)
    comps *= np.where(comps[np.arange(k), lead] < 0, -1.0, 1.0)[:, None]
    return PCATransform(mean, comps, var[:k], ratio[:k])


def project(pca: PCATransform, X) -> np.ndarray:
    A = _as_matrix(X)
    if A.ndim == 1:
        A = A[None]
    if A.shape[1] != pca.mean.shape[0]:
        raise SchemaError(f"matrix has {A.shape[1]} columns, PCA expects {pca.mean.shape[0]}")
    return (A - pca.mean) @ pca.components.T


# --------------------------------------------------------------------------- ensemble


@dataclass
class EnsembleConfig:
    voting_mode: str = "soft"
    threshold: float = 0.5
    tree_depth: int = 8
    forest_trees: int = 100
    logistic_c: float = 1.0
    svm_c: float = 1.0
    knn_k: int = 5
    knn_weights: str = "distance"
    seed: int = 0

    def __post_init__(self):
        if self.voting_mode not in ("soft", "hard"):
            raise ValueError(f"voting_mode must be 'soft' or 'hard', got {self.voting_mode!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def _member_seed(seed: int, name: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}/{name}".encode()).digest()[:4], "little")


def _make_member(name: str, cfg: EnsembleConfig, n_min: int):
    rs = _member_seed(cfg.seed, name)
    if name == "decision_tree":
        return DecisionTreeClassifier(max_depth=cfg.tree_depth, random_state=rs)
    if name == "random_forest":
        return RandomForestClassifier(n_estimators=cfg.forest_trees, max_depth=None,
                                      random_state=rs, n_jobs=1)
    if name == "logistic_regression":
        return LogisticRegression(C=cfg.logistic_c, max_iter=2000)
    if name == "support_vector_machine":
        svc = SVC(kernel="rbf", C=cfg.svm_c, random_state=rs)
        if n_min < 2:
            return SVC(kernel="rbf", C=cfg.svm_c, probability=True, random_state=rs)
        folds = StratifiedKFold(n_splits=min(3, n_min), shuffle=True, random_state=rs)
        return CalibratedClassifierCV(svc, method="sigmoid", cv=folds)
    if name == "k_nearest_neighbors":
        return KNeighborsClassifier(n_neighbors=cfg.knn_k, weights=cfg.knn_weights)
    raise ValueError(f"unknown member {name!r}")


@dataclass
class EnsembleModel:
    members: dict[str, object]
    voting_mode: str = "soft"
    threshold: float = 0.5

    def member_proba(self, Z: np.ndarray) -> np.ndarray:
        """Positive-class probability per member, shape ``(len(Z), n_members)``."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        cols = []
        for m in self.members.values():
            p = m.predict_proba(Z)
            cols.append(p[:, list(m.classes_).index(1)] if 1 in m.classes_ else np.zeros(len(Z)))
        return np.column_stack(cols)

    def member_labels(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return np.column_stack([np.asarray(m.predict(Z)).astype(int) for m in self.members.values()])

    def predict(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vote over rows of ``Z``; returns ``(probability, label)`` arrays."""
        if self.voting_mode == "soft":
            prob = self.member_proba(Z).mean(axis=1)
            return prob, (prob >= self.threshold).astype(int)
        votes = self.member_labels(Z)
        pos = votes.sum(axis=1)
        n = votes.shape[1]
        return pos / n, (2 * pos > n).astype(int)


def train_ensemble(Z_train: np.ndarray, y_train: np.ndarray, cfg: EnsembleConfig = EnsembleConfig(),
                   members: Sequence[str] = MEMBERS) -> EnsembleModel:
    Z = np.asarray(Z_train, dtype=np.float64)
    y = np.asarray(y_train).astype(int)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise DegenerateLabelError("training labels contain a single class")
    if not set(classes) <= {0, 1}:
        raise DegenerateLabelError(f"labels must be binary 0/1, got {classes}")
    fitted = {}
    for name in members:
        m = _make_member(name, cfg, int(counts.min()))
        m.fit(Z, y)
        fitted[name] = m
    return EnsembleModel(fitted, cfg.voting_mode, cfg.threshold)


def vote(ensemble: EnsembleModel, z: np.ndarray) -> tuple[float, int]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("vote expects a single projected vector")
    prob, label = ensemble.predict(z[None])
    return float(prob[0]), int(label[0])


def tune_threshold(prob: np.ndarray, y: np.ndarray) -> float:
    """Cut maximizing F1 on held-out scores; ties go to the cut nearest 0.5."""
    from .evaluation import Confusion, compute_metrics

    y = np.asarray(y).astype(int)
    cands = np.unique(np.clip(prob, 1e-6, 1 - 1e-6))
    best = (-1.0, 0.0, 0.5)
    for t in cands:
        pred = (prob >= t).astype(int)
        c = Confusion.from_labels(y, pred)
        f1 = compute_metrics(c).f1
        key = (f1, -abs(t - 0.5), float(t))
        if key > best:
            best = key
    return best[2]


# --------------------------------------------------------------------------- bundle


@dataclass
class DetectorBundle:
    """Everything one disease detector needs besides the raw image."""

    disease: str
    components: dict[str, object]
    pca: PCATransform
    ensemble: EnsembleModel
    column_spec: list[tuple[str, int]]
    preprocess: dict = field(default_factory=dict)
    version: str = BUNDLE_VERSION


def _write_csv_matrix(path: Path, A: np.ndarray) -> None:
    A = np.atleast_2d(A)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in A:
            w.writerow([repr(float(v)) for v in row])


def _read_csv_matrix(path: Path) -> np.ndarray:
    with path.open(newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def save_fusion(bundle: DetectorBundle, directory: str | Path) -> None:
    """Write PCA, ensemble members and the manifest; components are saved by the caller."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv_matrix(d / "pca_mean.csv", bundle.pca.mean)
    _write_csv_matrix(d / "pca_components.csv", bundle.pca.components)
    _write_csv_matrix(d / "pca_variance.csv",
                      np.vstack([bundle.pca.explained_variance, bundle.pca.explained_variance_ratio]))
    (d / "members").mkdir(exist_ok=True)
    for name, m in bundle.ensemble.members.items():
        (d / "members" / f"{name}.pkl").write_bytes(pickle.dumps(m, protocol=4))
    (d / "thresholds.json").write_text(json.dumps(
        {"voting_mode": bundle.ensemble.voting_mode, "threshold": bundle.ensemble.threshold},
        sort_keys=True) + "\n")
    manifest = {"disease": bundle.disease, "version": bundle.version,
                "column_spec": [list(c) for c in bundle.column_spec],
                "members": list(bundle.ensemble.members), "preprocess": bundle.preprocess,
                "components": sorted(bundle.components)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_fusion(directory: str | Path) -> tuple[dict, PCATransform, EnsembleModel]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    var = _read_csv_matrix(d / "pca_variance.csv")
    pca = PCATransform(_read_csv_matrix(d / "pca_mean.csv")[0], _read_csv_matrix(d / "pca_components.csv"),
                       var[0], var[1])
    th = json.loads((d / "thresholds.json").read_text())
    members = {n: pickle.loads((d / "members" / f"{n}.pkl").read_bytes()) for n in manifest["members"]}
    return manifest, pca, EnsembleModel(members, th["voting_mode"], th["threshold"])


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def save_bundle(bundle: DetectorBundle, directory: str | Path, histories: dict | None = None) -> None:
    from .nets import History, save_component

    d = Path(directory)
    for tag, model in bundle.components.items():
        save_component(model, (histories or {}).get(tag, History()), d / tag)
    save_fusion(bundle, d)


def load_bundle(directory: str | Path) -> DetectorBundle:
    from .nets import load_component

    d = Path(directory)
    manifest, pca, ensemble = load_fusion(d)
    comps = {tag: load_component(d / tag) for tag in manifest["components"]}
    return DetectorBundle(manifest["disease"], comps, pca, ensemble,
                          [tuple(c) for c in manifest["column_spec"]], manifest["preprocess"],
                          manifest["version"])


def bundle_features(bundle: DetectorBundle, images: Sequence[np.ndarray],
                    ids: Sequence[str] | None = None) -> FeatureMatrix:
    """Trio features for images already cropped, equalized and resized to the cache size."""
    from .imgproc import FilterSpec, component_input
    from .nets import extract_features

    pp = bundle.preprocess
    spec = FilterSpec(pp["posterize_bits"], pp["posterize_mode"])
    blocks = {}
    for tag, comp in (("component1", 1), ("component2", 2), ("siamese", 3)):
        model = bundle.components[tag]
        size = pp["input_sizes"][tag]
        x = np.stack([component_input(im, comp, size, spec) for im in images])
        blocks[tag] = extract_features(model, x, dict(bundle.column_spec).get(tag))
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    fm = FeatureMatrix.concat(ids, blocks)
    if fm.column_spec != [tuple(c) for c in bundle.column_spec]:
        raise SchemaError(f"feature schema {fm.column_spec} differs from bundle {bundle.column_spec}")
    return fm


def predict_batch(bundle: DetectorBundle, images: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    try:
        fm = bundle_features(bundle, images)
    except Exception as exc:
        raise PipelineStageError("features", exc) from exc
    try:
        Z = project(bundle.pca, fm)
    except Exception as exc:
        raise PipelineStageError("project", exc) from exc
    try:
        return bundle.ensemble.predict(Z)
    except Exception as exc:
        raise PipelineStageError("vote", exc) from exc


def predict_disease(bundle: DetectorBundle, img: np.ndarray) -> tuple[float, int]:
    """Raw RGB fundus image to ``(probability, label)`` for one disease."""
    from .imgproc import preprocess

    pp = bundle.preprocess
    try:
        prepped = preprocess(img, pp["cache_size"], pp["border_threshold"], pp["clahe_clip"], pp["clahe_grid"])
    except Exception as exc:
        raise PipelineStageError("preprocess", exc) from exc
    prob, label = predict_batch(bundle, [prepped])
    return float(prob[0]), int(label[0])
