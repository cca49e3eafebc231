"""
Desk-scale run through the library API
======================================

Synthesises 300 images with two diseases, trains both detectors with the
tiny backbone, evaluates on the test split and predicts one image.
Takes a couple of minutes on one CPU.  Run from an empty directory.
"""

import sys
from pathlib import Path

from trio_fundus import pipeline as pl
from trio_fundus.config import load_config

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk_scale.cfg")
pl.apply_runtime(cfg)

pl.synth(cfg, 300, ("DN", "MYA"))
res = pl.prepare(cfg)
print("prepared", res.processed, "skipped", res.skipped)

for disease in ("DN", "MYA"):
    print("bundle", pl.train(cfg, disease))

result = pl.evaluate(cfg, "test")
for r in result.rows:
    print(f"{r.disease:>8}  acc={r.accuracy:.5f} f1={r.f1:.5f} auc={r.auc:.5f}")

for name, prob, label in pl.predict(cfg, "data/5.png", ["DN", "MYA"]):
    print(f"{name:>7} p={prob:.4f} label={label}")
sys.exit(0)
