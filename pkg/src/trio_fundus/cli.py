"""Command-line entry point: ``trio-fundus <command> [options]``.

Exit codes: 0 success, 1 usage, 2 data error, 3 training/evaluation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import Config, ConfigError, load_config, read_snapshot, write_snapshot
from .dataset import DISEASES, DatasetError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STAGE = 0, 1, 2, 3

log = logging.getLogger("trio_fundus")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _disease(code: str) -> str:
    if code not in DISEASES:
        raise argparse.ArgumentTypeError(f"invalid disease {code!r}; choose from {', '.join(DISEASES)}")
    return code


def _disease_list(text: str) -> list[str]:
    return [_disease(c.strip()) for c in text.split(",") if c.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="key=value config file or a run.json snapshot")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    g.add_argument("--seed", type=int, help="root seed")
    g.add_argument("--single-threaded", action="store_true", help="bit-reproducible single-thread mode")
    g.add_argument("--plots", action="store_true", help="also write ROC plots")
    g.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="trio-fundus", description="Per-disease fundus detectors from three feature networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled dataset")
    s.add_argument("--n", type=int, default=300)
    s.add_argument("--diseases", type=_disease_list, default=["DN", "MYA"])
    s.add_argument("--co-occurrence", type=float, default=0.1)

    s = sub.add_parser("prepare", parents=[common], help="crop, equalize and filter images into the cache")
    s.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic images first")
    s.add_argument("--synthetic-diseases", type=_disease_list, default=["DN", "MYA"])

    s = sub.add_parser("train", parents=[common], help="train one disease detector")
    s.add_argument("--disease", type=_disease, required=True)
    s.add_argument("--component", choices=["1", "2", "3", "all"], default="all")

    s = sub.add_parser("search", parents=[common], help="grid search on the validation split")
    s.add_argument("--disease", type=_disease, required=True)

    s = sub.add_parser("eval", parents=[common], help="evaluate bundles and write reports")
    s.add_argument("--split", choices=["train", "validation", "test"], default="test")
    s.add_argument("--benchmark", help="CSV with columns disease,f1")
    s.add_argument("--diseases", type=_disease_list)

    s = sub.add_parser("predict", parents=[common], help="diagnose one image")
    s.add_argument("image")
    grp = s.add_mutually_exclusive_group(required=True)
    grp.add_argument("--all", action="store_true", help="every disease in dataset.diseases")
    grp.add_argument("--disease", type=_disease)
    s.add_argument("--jsonl", help="also write results as JSON lines to this file")

    s = sub.add_parser("replay", parents=[common], help="rerun a command from its run.json snapshot")
    s.add_argument("snapshot")
    return p


def make_config(args) -> Config:
    cfg = load_config(args.config)
    cfg.override(args.overrides)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.single_threaded:
        cfg.set("runtime.single_threaded", True)
    return cfg


def run(command: str, params: dict, cfg: Config, plots: bool = False) -> int:
    from . import pipeline as pl

    pl.apply_runtime(cfg)
    if command == "synth":
        root = pl.synth(cfg, params["n"], params["diseases"], params["co_occurrence"])
        print(f"wrote {params['n']} images to {root}")
    elif command == "prepare":
        if params.get("synthetic"):
            pl.synth(cfg, params["synthetic"], params["synthetic_diseases"], 0.1)
        res = pl.prepare(cfg)
        print(f"prepared {res.processed}, skipped {res.skipped}, errors {len(res.errors)}")
    elif command == "train":
        path = pl.train(cfg, params["disease"], params["component"])
        print(f"bundle written to {path}")
    elif command == "search":
        _, board = pl.search(cfg, params["disease"])
        for b in board:
            print(f"{b['key']}  f1={b['f1']:.5f}  auc={b['auc']:.5f}")
    elif command == "eval":
        res = pl.evaluate(cfg, params["split"], params.get("benchmark"), plots or params.get("plots", False),
                          params.get("diseases"))
        print(res.report.read_text(), end="")
        for d, msg in res.errors.items():
            print(f"error: {d}: {msg}", file=sys.stderr)
        if res.errors:
            return EXIT_STAGE
    elif command == "predict":
        diseases = list(cfg.diseases) if params["all"] else [params["disease"]]
        rows = pl.predict(cfg, params["image"], diseases)
        for name, p, lbl in rows:
            print(f"{name},{p:.9g},{lbl}")
        out_dir = cfg.path("paths.reports_dir")
        if params.get("jsonl"):
            jpath = Path(params["jsonl"])
            jpath.parent.mkdir(parents=True, exist_ok=True)
            with jpath.open("w") as fh:
                for name, p, lbl in rows:
                    fh.write(json.dumps({"image": str(params["image"]), "disease": name,
                                         "probability": p, "label": lbl}) + "\n")
            out_dir = jpath.parent
        write_snapshot(out_dir, "predict", params, cfg)
    else:
        raise UsageError(f"unknown command {command!r}")
    return EXIT_OK


def _params(args) -> dict:
    skip = {"config", "overrides", "seed", "single_threaded", "verbose", "command", "snapshot"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"trio-fundus: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import pipeline as pl
    from .nets import AssetError, SchemaError, TrainingDivergedError

    try:
        if args.command == "replay":
            snap = read_snapshot(args.snapshot)
            cfg = Config(snap["config"])
            return run(snap["command"], snap["args"], cfg)
        cfg = make_config(args)
        return run(args.command, _params(args), cfg, args.plots)
    except (pl.DataError, DatasetError, FileNotFoundError, AssetError) as exc:
        print(f"trio-fundus: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"trio-fundus: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pl.StageError, TrainingDivergedError, SchemaError) as exc:
        print(f"trio-fundus: stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
