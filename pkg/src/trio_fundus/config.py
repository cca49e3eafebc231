"""Flat dotted-key configuration, snapshots and hierarchical seeding.

A config file holds ``key=value`` lines (``#`` starts a comment). Values are
parsed according to the type of the built-in default for that key; tuples
are comma-separated and search grids separate choices with ``;``.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable

from .dataset import DISEASES

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "paths.data_root": "data",
    "paths.cache_dir": "cache",
    "paths.bundles_dir": "bundles",
    "paths.reports_dir": "reports",
    "dataset.labels_csv": "labels.csv",
    "dataset.diseases": DISEASES,
    "dataset.split_mode": "stratify",
    "dataset.split_manifest": "",
    "dataset.split_ratios": (0.6, 0.2, 0.2),
    "imgproc.cache_size": 320,
    "imgproc.border_threshold": 20,
    "imgproc.clahe_clip": 2.0,
    "imgproc.clahe_grid": 8,
    "imgproc.posterize_bits": 3,
    "imgproc.posterize_mode": "truncate",
    "imgproc.augment": True,
    "augment.rotation_deg": (-20.0, 20.0),
    "augment.crop_fraction": (0.85, 1.0),
    "augment.shear_deg": (-10.0, 10.0),
    "augment.gauss_sigma": (0.0, 2.0),
    "augment.pixel_noise_amp": (0.0, 0.01),
    "augment.blur_radius": (0.0, 1.5),
    "augment.zoom_factor": (0.9, 1.1),
    "augment.flip": 0.5,
    "augment.brightness_delta": (-0.15, 0.15),
    "nets.component1.backbone": "large_backbone",
    "nets.component1.head_dims": (256, 128),
    "nets.component1.input_size": 300,
    "nets.component1.weights_path": "",
    "nets.component2.backbone": "small_backbone",
    "nets.component2.head_dims": (128, 64),
    "nets.component2.input_size": 224,
    "nets.component2.weights_path": "",
    "nets.siamese.backbone": "small_backbone",
    "nets.siamese.head_dims": (128, 64),
    "nets.siamese.input_size": 224,
    "nets.siamese.weights_path": "",
    "nets.siamese.embedding_dim": 32,
    "nets.siamese.margin": 1.0,
    "nets.siamese.n_pairs": 2000,
    "nets.siamese.same_ratio": 0.5,
    "nets.dropout": 0.3,
    "fusion.variance_target": 0.95,
    "fusion.voting": "soft",
    "fusion.threshold": 0.5,
    "fusion.threshold_policy": "fixed",
    "fusion.tree_depth": 8,
    "fusion.forest_trees": 100,
    "fusion.logistic_c": 1.0,
    "fusion.svm_c": 1.0,
    "fusion.knn_k": 5,
    "search.component1.head_dims": ((256, 128),),
    "search.learning_rate": (1e-4,),
    "search.variance_target": (0.95,),
    "search.voting": ("soft",),
    "runtime.single_threaded": False,
}
for _c in ("component1", "component2", "siamese"):
    DEFAULTS.update({
        f"train.{_c}.epochs": 20,
        f"train.{_c}.batch_size": 16,
        f"train.{_c}.learning_rate": 1e-4,
        f"train.{_c}.early_stop_patience": 5,
        f"train.{_c}.optimizer": "adam",
        f"train.{_c}.unfreeze_epoch": 3,
    })

ENV_CACHE = "TRIO_FUNDUS_CACHE"


class ConfigError(ValueError):
    pass


def _parse_scalar(text: str, like: Any) -> Any:
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def parse_value(key: str, text: str) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    like = DEFAULTS[key]
    try:
        if key.startswith("search."):
            inner = like[0]
            return tuple(_parse_tuple(c, inner) if isinstance(inner, tuple) else _parse_scalar(c, inner)
                         for c in text.split(";") if c.strip())
        if isinstance(like, tuple):
            return _parse_tuple(text, like)
        return _parse_scalar(text, like)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None


def _parse_tuple(text: str, like: tuple) -> tuple:
    sep = "x" if isinstance(like[0], int) and "x" in text and "," not in text else ","
    parts = [p for p in text.split(sep) if p.strip()]
    return tuple(_parse_scalar(p, like[0]) for p in parts)


def format_value(v: Any) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(format_value(x) for x in v)
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v).lower() if isinstance(v, bool) else str(v)


class Config(dict):
    """Mapping from dotted key to typed value, seeded with ``DEFAULTS``."""

    def __init__(self, values: dict[str, Any] | None = None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = parse_value(key, value)
        elif isinstance(value, list):
            value = _freeze(value)
        self[key] = value

    def override(self, assignments: Iterable[str]) -> "Config":
        for a in assignments:
            if "=" not in a:
                raise ConfigError(f"expected key=value, got {a!r}")
            k, v = a.split("=", 1)
            self.set(k.strip(), v.strip())
        return self

    def path(self, key: str) -> Path:
        if key == "paths.cache_dir" and os.environ.get(ENV_CACHE):
            return Path(os.environ[ENV_CACHE])
        return Path(self[key])

    @property
    def diseases(self) -> tuple[str, ...]:
        return tuple(self["dataset.diseases"])

    def to_text(self) -> str:
        return "".join(f"{k}={format_value(v)}\n" for k, v in sorted(self.items()))

    def to_json(self) -> dict[str, Any]:
        return {k: _thaw(v) for k, v in sorted(self.items())}


def _freeze(v):
    return tuple(_freeze(x) for x in v) if isinstance(v, (list, tuple)) else v


def _thaw(v):
    return [_thaw(x) for x in v] if isinstance(v, tuple) else v


def load_config(path: str | Path | None = None) -> Config:
    """Read a ``key=value`` file, or the ``config`` section of a ``run.json`` snapshot."""
    cfg = Config()
    if path is None:
        return cfg
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        for k, v in data.get("config", data).items():
            cfg.set(k, v)
        return cfg
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def child_seed(root: int, *stage: object) -> int:
    """32-bit seed for a named stage: first 4 bytes of sha256("root/stage/...")."""
    key = "/".join([str(root), *map(str, stage)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little")


def write_snapshot(directory: str | Path, command: str, args: dict[str, Any], cfg: Config) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, "args": args, "seed": cfg["seed"], "config": cfg.to_json()}
    path = d / "run.json"
    tmp = d / "run.json.tmp"
    tmp.write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def read_snapshot(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())
