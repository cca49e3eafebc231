"""Procedural fundus-like images with one visual motif per synthetic disease.

Used as a desk-scale stand-in for the real dataset: 64x64 orange discs on a
black border with vessels and an optic disc, where each disease stamps a
distinct motif (bright blob, dark streak, speckles, ring, dark blob, pale
patch) inside the central 32x32 window.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .dataset import DISEASES, ImageRecord, check_disease, write_labels
from .imgproc import write_image

SIZE = 64
MOTIFS = ("bright_blob", "dark_streak", "speckles", "ring", "dark_blob", "pale_patch")
NORMAL_FRACTION = 0.4


def _quota(n: int, weights: Sequence[float]) -> list[int]:
    raw = [n * w / sum(weights) for w in weights]
    out = [math.floor(x) for x in raw]
    for i in sorted(range(len(raw)), key=lambda i: (out[i] - raw[i], i))[: n - sum(out)]:
        out[i] += 1
    return out


def label_sets(n: int, diseases: Sequence[str], co_occurrence: float, seed: int) -> list[frozenset[str]]:
    """Exact per-category quotas (dual-label, normal, single per disease), shuffled."""
    k = len(diseases)
    n_multi = round(co_occurrence * n) if k > 1 else 0
    rest = n - n_multi
    n_normal = round(NORMAL_FRACTION * rest)
    singles = _quota(rest - n_normal, [1.0] * k)
    sets: list[frozenset[str]] = [frozenset()] * n_normal
    for d, c in zip(diseases, singles):
        sets += [frozenset({d})] * c
    for i in range(n_multi):
        sets.append(frozenset({diseases[i % k], diseases[(i + 1) % k]}))
    order = np.random.default_rng(seed).permutation(len(sets))
    return [sets[i] for i in order]


def _stamp(img: np.ndarray, motif: str, rng: np.random.Generator) -> None:
    c = lambda: (int(32 + rng.integers(-9, 10)), int(32 + rng.integers(-9, 10)))  # noqa: E731
    if motif == "bright_blob":
        cv2.circle(img, c(), int(rng.integers(4, 6)), (250, 245, 190), -1, cv2.LINE_8)
    elif motif == "dark_streak":
        x, y = c()
        a = rng.uniform(0, np.pi)
        dx, dy = int(round(9 * np.cos(a))), int(round(9 * np.sin(a)))
        cv2.line(img, (x - dx, y - dy), (x + dx, y + dy), (35, 25, 20), 3, cv2.LINE_8)
    elif motif == "speckles":
        for _ in range(12):
            x, y = c()
            cv2.circle(img, (x + int(rng.integers(-4, 5)), y + int(rng.integers(-4, 5))), 1,
                       (245, 235, 160), -1, cv2.LINE_8)
    elif motif == "ring":
        cv2.circle(img, c(), 7, (250, 240, 200), 2, cv2.LINE_8)
    elif motif == "dark_blob":
        cv2.circle(img, c(), 5, (40, 20, 10), -1, cv2.LINE_8)
    elif motif == "pale_patch":
        mask = np.zeros(img.shape[:2], np.uint8)
        cv2.ellipse(mask, c(), (9, 6), float(rng.uniform(0, 180)), 0, 360, 1, -1, cv2.LINE_8)
        m = mask.astype(bool)
        img[m] = (0.4 * img[m] + 0.6 * np.array([235, 200, 170])).astype(np.uint8)
    else:
        raise ValueError(f"unknown motif {motif!r}")


def render(labels: frozenset[str], diseases: Sequence[str], rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((SIZE, SIZE, 3), np.uint8)
    cx, cy = 32 + int(rng.integers(-2, 3)), 32 + int(rng.integers(-2, 3))
    r = int(rng.integers(27, 30))
    base = np.array([190, 80, 35]) + rng.integers(-10, 11, size=3)
    yy, xx = np.mgrid[:SIZE, :SIZE]
    rho = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) / r
    shade = (1.0 - 0.25 * rho**2)[..., None]
    disc = np.clip(base * shade + rng.normal(0, 4, (SIZE, SIZE, 3)), 0, 255).astype(np.uint8)
    inside = rho <= 1.0
    img[inside] = disc[inside]
    side = 1 if rng.random() < 0.5 else -1
    od = (cx + side * 15, cy + int(rng.integers(-3, 4)))
    cv2.circle(img, od, 4, (225, 140, 90), -1, cv2.LINE_8)
    for _ in range(3):
        a = rng.uniform(0, 2 * np.pi)
        end = (int(od[0] + 26 * np.cos(a)), int(od[1] + 26 * np.sin(a)))
        mid = (int((od[0] + end[0]) / 2 + rng.integers(-4, 5)), int((od[1] + end[1]) / 2 + rng.integers(-4, 5)))
        cv2.line(img, od, mid, (120, 30, 15), 1, cv2.LINE_8)
        cv2.line(img, mid, end, (120, 30, 15), 1, cv2.LINE_8)
    for i, d in enumerate(diseases):
        if d in labels:
            _stamp(img, MOTIFS[i], rng)
    img[~inside] = 0
    return img


def generate_synthetic(n: int, diseases: Sequence[str] = ("DN", "MYA"), seed: int = 0,
                       out_dir: str | Path | None = None,
                       co_occurrence: float = 0.1) -> tuple[list[ImageRecord], list[np.ndarray]]:
    """Render ``n`` labelled images; when ``out_dir`` is given also write PNGs and ``labels.csv``.

    The ``i``-th entry of ``diseases`` is drawn with the ``i``-th motif.
    """
    if n < 20:
        raise ValueError("synthetic datasets need at least 20 images")
    diseases = [check_disease(d) for d in diseases]
    if not 1 <= len(diseases) <= len(MOTIFS):
        raise ValueError(f"between 1 and {len(MOTIFS)} synthetic diseases supported")
    if not 0.0 <= co_occurrence <= 1.0:
        raise ValueError("co_occurrence must lie in [0, 1]")
    sets = label_sets(n, diseases, co_occurrence, seed)
    root = Path(out_dir) if out_dir is not None else Path(".")
    records, images = [], []
    for i, labels in enumerate(sets, start=1):
        img = render(labels, diseases, np.random.default_rng([seed, i]))
        rid = str(i)
        records.append(ImageRecord(rid, root / f"{rid}.png", labels))
        images.append(img)
    if out_dir is not None:
        root.mkdir(parents=True, exist_ok=True)
        for rec, img in zip(records, images):
            write_image(rec.image_path, img)
        write_labels(records, root / "labels.csv")
    return records, images


__all__ = ["generate_synthetic", "label_sets", "render", "MOTIFS", "DISEASES"]
