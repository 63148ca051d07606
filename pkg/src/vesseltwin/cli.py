"""Command-line entry point: ``vesseltwin <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline, twin
from .dataset import DatasetError
from .metrics import MetricError
from .scenario import ScenarioError
from .vessels import NonFiniteStateError, UnknownPresetError


def _load_config(path: str | None) -> dict | None:
    if path is None:
        return None
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise pipeline.PipelineError(f"cannot read config {path}: {exc}") from exc


def _config_for(args, default_profile: str | None = None) -> dict:
    cfg = _load_config(args.config)
    if cfg is None:
        profile = getattr(args, "experiment", None) or default_profile
        if profile is None:
            raise pipeline.PipelineError("--config is required")
        cfg = pipeline.profile_config(profile, args.profile, args.seed or 0,
                                      getattr(args, "vessel", None))
    else:
        if "model" not in cfg:
            cfg["model"] = pipeline.model_config(args.profile)
        if args.seed is not None:
            cfg["seed"] = args.seed
    pipeline.validate_config(cfg)
    return cfg


def cmd_simulate(args) -> dict:
    cfg = _config_for(args)
    manifest = pipeline.simulate(cfg, args.out)
    return {"out": args.out, "train": len(manifest["split"]["train"]),
            "test": len(manifest["split"]["test"])}


def cmd_train(args) -> dict:
    cfg = _load_config(args.config)
    if cfg is not None and args.seed is not None:
        cfg["seed"] = args.seed
    ckpt = pipeline.train(args.dataset, args.out, cfg)
    return {"checkpoint": str(ckpt)}


def cmd_detect(args) -> dict:
    variants = args.variant or ["oddit"]
    paths = pipeline.detect(args.checkpoint, args.trajectories, args.out, variants)
    return {"verdicts": [str(p) for p in paths]}


def cmd_evaluate(args) -> dict:
    cfg = _load_config(args.config) or {}
    fields = cfg.get("group_fields", ["vessel", "kind", "magnitude"])
    report = pipeline.evaluate(args.verdicts, args.out, fields)
    return pipeline.summarize(report)


def cmd_repro(args) -> dict:
    cfg = _load_config(args.config)
    result = pipeline.repro(args.experiment, args.out, args.seed or 0, args.profile,
                            args.vessel, cfg)
    return {"summary": result["summary"],
            "timings": {k: round(v, 1) for k, v in result["timings"].items()}}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesseltwin",
                                     description="Digital-twin OOD detection for vessels.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--profile", choices=pipeline.SCALES, default="desk",
                       help="model scale")

    p = sub.add_parser("simulate", help="generate scenario CSVs and a manifest")
    common(p)
    p.add_argument("--experiment", choices=pipeline.PROFILES,
                   help="use a built-in experiment instead of --config")
    p.add_argument("--vessel")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a twin checkpoint from a dataset")
    common(p)
    p.add_argument("--dataset", required=True, help="directory holding manifest.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score trajectories with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", action="append", choices=twin.VARIANTS)
    p.add_argument("trajectories", nargs="+")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="build metric reports from verdict files")
    common(p)
    p.add_argument("verdicts", nargs="+")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("repro", help="run a full experiment end to end")
    common(p)
    p.add_argument("experiment", choices=pipeline.PROFILES)
    p.add_argument("--vessel")
    p.set_defaults(func=cmd_repro)
    return parser


_EXPECTED_ERRORS = (pipeline.PipelineError, twin.TwinError, DatasetError, ScenarioError,
                    MetricError, UnknownPresetError, NonFiniteStateError, OSError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except _EXPECTED_ERRORS as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
