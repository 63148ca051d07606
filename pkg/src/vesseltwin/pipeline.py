"""Experiment orchestration: simulate, train, detect, evaluate, repro.

Every stage is a pure function of its config and input files. Outputs are
written once: rewriting a file with different content is refused.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics, twin
from .dataset import DatasetSplit, column_schema, load_trajectory
from .scenario import (DisturbanceSpec, ScenarioSpec, WaypointSpec, ZigzagSpec,
                       run_scenario, validate_spec)
from .vessels import EnvCondition, make_preset

log = logging.getLogger(__name__)

SCALES = ("smoke", "desk", "paper")
PROFILES = ("sensor", "actuator", "current")

# window, horizon, hidden, dtm pretrain/train epochs, dtc epochs, strides
_SCALE_MODEL = {
    "smoke": dict(window=10, horizon=10, hidden=16, pretrain_epochs=2, train_epochs=2,
                  dtc_epochs=2, dtm_stride=8, dtc_stride=8),
    "desk": dict(window=30, horizon=30, hidden=64, pretrain_epochs=60, train_epochs=100,
                 dtc_epochs=20, dtm_stride=6, dtc_stride=3),
    "paper": dict(window=60, horizon=60, hidden=256, pretrain_epochs=600, train_epochs=1000,
                  dtc_epochs=100, dtm_stride=1, dtc_stride=1),
}


class PipelineError(ValueError):
    pass


def sub_seed(master: int, stage: str, index: int = 0) -> int:
    """Stable 63-bit seed for (master, stage, index)."""
    digest = hashlib.sha256(f"{int(master)}/{stage}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# -- config ------------------------------------------------------------------

def model_config(scale: str) -> dict:
    if scale not in _SCALE_MODEL:
        raise PipelineError(f"unknown scale {scale!r}; choose from {', '.join(SCALES)}")
    m = _SCALE_MODEL[scale]
    return {
        "window": m["window"], "horizon": m["horizon"], "hidden": m["hidden"],
        "aggregation": "max", "predictive_labels": True,
        "dtm": {"lr": 0.0025, "batch_size": 128, "pretrain_epochs": m["pretrain_epochs"],
                "train_epochs": m["train_epochs"], "clip_norm": 5.0,
                "window_stride": m["dtm_stride"]},
        "dtc": {"lr": 0.002, "batch_size": 64, "epochs": m["dtc_epochs"],
                "window_stride": m["dtc_stride"]},
    }


def profile_config(profile: str, scale: str = "desk", seed: int = 0,
                   vessel: str | None = None) -> dict:
    """Run config for one of the named experiments."""
    if profile not in PROFILES:
        raise PipelineError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    small = scale == "smoke"
    cfg = {"profile": profile, "scale": scale, "seed": int(seed),
           "variants": list(twin.VARIANTS), "model": model_config(scale),
           "group_fields": ["vessel", "kind", "magnitude"]}
    if profile == "sensor":
        cfg["vessel"] = vessel or "mariner"
        cfg["env"] = _default_env(cfg["vessel"])
        sigmas = [2, 8] if small else list(range(2, 9))
        cfg["train"] = [{"maneuver": {"type": "waypoint"}, "count": 2 if small else 20}]
        cfg["test"] = [{"maneuver": {"type": "waypoint"}, "count": 1 if small else 10,
                        "disturbance": {"kind": "sensor_noise", "magnitude": s}}
                       for s in sigmas]
    elif profile == "actuator":
        cfg["vessel"] = vessel or "mariner"
        cfg["env"] = _default_env(cfg["vessel"])
        deltas = [10, 15, 20, 30]
        per = 1 if small else 5
        cfg["train"] = [{"maneuver": {"type": "zigzag", "delta": d, "psi": d}, "count": per}
                        for d in deltas]
        cfg["test"] = [{"maneuver": {"type": "zigzag", "delta": d, "psi": d},
                        "count": 1 if small else 3,
                        "disturbance": {"kind": "actuator_extreme", "magnitude": 40}}
                       for d in deltas]
    else:
        cfg["vessel"] = vessel or "remus100"
        cfg["env"] = {"current_speed": 0.5, "current_direction": 0.7}
        cfg["train"] = [{"maneuver": {"type": "waypoint"}, "count": 2 if small else 20}]
        cfg["test"] = [{"maneuver": {"type": "waypoint"}, "count": 2 if small else 10,
                        "disturbance": {"kind": "current_spike", "magnitude": 0.65}}]
    validate_config(cfg)
    return cfg


def _default_env(vessel: str) -> dict:
    if make_preset(vessel).supports_current:
        return {"current_speed": 0.5, "current_direction": 0.7}
    return {"current_speed": 0.0, "current_direction": 0.0}


def validate_config(cfg: dict) -> None:
    """Check structure and every scenario before anything runs."""
    for key in ("vessel", "seed", "train", "test", "model"):
        if key not in cfg:
            raise PipelineError(f"config is missing {key!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise PipelineError("seed must be a non-negative integer")
    params = make_preset(cfg["vessel"])
    for variant in cfg.get("variants", ["oddit"]):
        if variant not in twin.VARIANTS:
            raise PipelineError(f"unknown variant {variant!r}")
    for split in ("train", "test"):
        for group in cfg[split]:
            if int(group.get("count", 0)) < 1:
                raise PipelineError(f"{split} groups need a positive count")
            if split == "train" and group.get("disturbance"):
                raise PipelineError("training groups must be disturbance-free")
            validate_spec(_scenario(cfg, group, 0), params)


def _maneuver(vessel: str, m: dict):
    params = make_preset(vessel)
    kind = m.get("type", "waypoint")
    if kind == "zigzag":
        return ZigzagSpec(delta=float(m["delta"]), psi=float(m.get("psi", m["delta"])),
                          duration=int(m.get("duration", 600)),
                          propeller=m.get("propeller")), int(m.get("duration", 600))
    if kind != "waypoint":
        raise PipelineError(f"unknown maneuver type {kind!r}")
    if not params.waypoints:
        raise PipelineError(f"preset {vessel!r} has no waypoint defaults")
    wp = {**params.waypoints, **{k: v for k, v in m.items() if k != "type"}}
    spec = WaypointSpec(
        n_waypoints=int(wp["n_waypoints"]), r_switch=float(wp["r_switch"]),
        x_range=tuple(wp["x_range"]), y_range=tuple(wp["y_range"]),
        z_range=tuple(wp["z_range"]) if wp.get("z_range") else None,
        min_distance=wp.get("min_distance"), propeller=wp.get("propeller"))
    return spec, int(wp["duration"])


def _scenario(cfg: dict, group: dict, seed: int) -> ScenarioSpec:
    maneuver, duration = _maneuver(cfg["vessel"], group["maneuver"])
    dist = group.get("disturbance")
    return ScenarioSpec(
        vessel=cfg["vessel"], maneuver=maneuver, seed=seed, duration=duration,
        env=EnvCondition(**cfg.get("env", {})),
        disturbance=DisturbanceSpec(**dist) if dist else None,
        horizon_margin=int(cfg["model"]["horizon"]))


# -- file helpers ------------------------------------------------------------

def _write_once(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        if path.read_text() == text:
            return
        raise PipelineError(f"{path} exists with different content; choose a new --out")
    path.write_text(text)


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _traj_csv(traj) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(traj.columns)
    for row in traj.data:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# -- stages ------------------------------------------------------------------

def simulate(cfg: dict, out: str | Path) -> dict:
    """Generate every train/test scenario and write CSV + sidecar + manifest."""
    validate_config(cfg)
    out = Path(out)
    metadata = {}
    train_names, test_names = [], []
    for split, names in (("train", train_names), ("test", test_names)):
        index = 0
        for gi, group in enumerate(cfg[split]):
            for _ in range(int(group["count"])):
                seed = sub_seed(cfg["seed"], f"simulate/{split}", index)
                spec = _scenario(cfg, group, seed)
                traj = run_scenario(spec)
                name = f"{split}/{index:04d}_{cfg['vessel']}.csv"
                _write_once(out / name, _traj_csv(traj))
                dist = group.get("disturbance") or {}
                label = {"vessel": cfg["vessel"], "kind": dist.get("kind", "none"),
                         "magnitude": dist.get("magnitude", 0), "group_index": gi}
                side = {"spec": spec.to_dict(), "seed": seed,
                        "disturbance_interval": list(traj.interval) if traj.interval else None,
                        "group": label}
                _write_once((out / name).with_suffix(".json"), _dumps(side))
                metadata[name] = side
                names.append(name)
                index += 1
    split = DatasetSplit(cfg["vessel"], train_names, test_names)
    manifest = {"config": cfg, "split": split.to_manifest(metadata),
                "columns": column_schema(cfg["vessel"])}
    _write_once(out / "manifest.json", _dumps(manifest))
    return manifest


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise PipelineError(f"no manifest.json in {dataset_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("columns") != column_schema(manifest["split"]["vessel"]):
        raise PipelineError("manifest column schema does not match the preset")
    return manifest


def train(dataset_dir: str | Path, out: str | Path, cfg: dict | None = None) -> Path:
    """Train DTM then DTC on the manifest's training split."""
    dataset_dir, out = Path(dataset_dir), Path(out)
    manifest = load_manifest(dataset_dir)
    cfg = cfg or manifest["config"]
    m = cfg["model"]
    trajs = [load_trajectory(dataset_dir / e["file"])[0] for e in manifest["split"]["train"]]
    dtm_cfg = twin.TrainConfig(seed=sub_seed(cfg["seed"], "dtm"), **m["dtm"])
    dtc_cfg = twin.AeTrainConfig(seed=sub_seed(cfg["seed"], "dtc"), **m["dtc"])
    checkpoint, history = twin.fit_twin(
        trajs, dtm_cfg, dtc_cfg, m["window"], m["horizon"], m["hidden"],
        aggregation=m.get("aggregation", "max"),
        predictive_labels=m.get("predictive_labels", True),
        extra_config={"master_seed": cfg["seed"]})
    ckpt_path = out / "checkpoint.json"
    _write_once(ckpt_path, json.dumps(checkpoint.to_dict(), sort_keys=True))
    _write_once(out / "loss_curves.csv", _loss_csv(history))
    return ckpt_path


def _loss_csv(history: dict[str, list[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "epoch", "loss"])
    for phase in ("dtm_pretrain", "dtm_train", "dtc"):
        for i, v in enumerate(history[phase]):
            w.writerow([phase, i, repr(float(v))])
    return buf.getvalue()


VERDICT_COLUMNS = ("anchor", "label", "score", "decision")


def _verdict_csv(det: twin.Detection) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_steps = det.step_errors.shape[1] if det.step_errors is not None else 0
    w.writerow(list(VERDICT_COLUMNS) + [f"re_{k + 1}" for k in range(n_steps)])
    for i, t in enumerate(det.anchors):
        row = [int(t), int(det.labels[i]), repr(float(det.scores[i])),
               "OOD" if det.decisions[i] else "IND"]
        if n_steps:
            row += [repr(float(v)) for v in det.step_errors[i]]
        w.writerow(row)
    return buf.getvalue()


def read_verdicts(path: str | Path) -> dict:
    """Parse a verdict CSV and its sidecar into plain arrays."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0][:4]) != VERDICT_COLUMNS:
        raise PipelineError(f"{path} is not a verdict file")
    body = rows[1:]
    meta = json.loads(path.with_suffix(".json").read_text())
    return {"meta": meta,
            "anchors": np.array([int(r[0]) for r in body], dtype=int),
            "labels": np.array([int(r[1]) for r in body], dtype=int),
            "scores": np.array([float(r[2]) for r in body]),
            "decisions": np.array([r[3] == "OOD" for r in body], dtype=int)}


def detect(checkpoint_path: str | Path, trajectories: Sequence[str | Path],
           out: str | Path, variants: Sequence[str] = ("oddit",)) -> list[Path]:
    """Score trajectories; one verdict CSV (+ sidecar) per trajectory and variant."""
    for v in variants:
        if v not in twin.VARIANTS:
            raise PipelineError(f"unknown variant {v!r}")
    ckpt = twin.load_checkpoint(checkpoint_path)
    out = Path(out)
    written = []
    for traj_path in trajectories:
        traj_path = Path(traj_path)
        traj, meta = load_trajectory(traj_path)
        if traj.vessel != ckpt.vessel:
            raise PipelineError(f"{traj_path} is a {traj.vessel} trajectory; checkpoint is "
                                f"for {ckpt.vessel}")
        dets = twin.detect(ckpt, traj, variants)
        for v in variants:
            target = out / v / traj_path.name
            _write_once(target, _verdict_csv(dets[v]))
            side = {"trajectory": traj_path.name, "variant": v, "vessel": traj.vessel,
                    "group": meta.get("group", {}), "t_ood": ckpt.thresholds[v].t_ood,
                    "disturbance_interval": meta.get("disturbance_interval")}
            _write_once(target.with_suffix(".json"), _dumps(side))
            written.append(target)
    return written


def verdict_records(paths: Sequence[str | Path]) -> list[dict]:
    records = []
    for p in paths:
        v = read_verdicts(p)
        meta = v["meta"]
        group = meta.get("group", {})
        for i in range(len(v["anchors"])):
            records.append({"method": meta["variant"], "path": meta["trajectory"],
                            "vessel": meta["vessel"], "kind": group.get("kind", "none"),
                            "magnitude": group.get("magnitude", 0),
                            "score": float(v["scores"][i]), "label": int(v["labels"][i]),
                            "decision": int(v["decisions"][i])})
    return records


def evaluate(verdict_paths: Sequence[str | Path], out: str | Path,
             group_fields: Sequence[str] = ("vessel", "kind", "magnitude")) -> dict:
    report = metrics.build_report(verdict_records(verdict_paths), group_fields)
    out = Path(out)
    _write_once(out / "report.json", metrics.report_json(report) + "\n")
    _write_once(out / "report.csv", metrics.report_csv(report))
    return report


def summarize(report: dict) -> dict:
    """Compact per-group metrics for printing."""
    rows = []
    for g in report["groups"]:
        rows.append({**g["group"], "method": g["method"], "auroc": g["auroc"],
                     "tnr_at_tpr95": g["tnr_at_tpr95"]})
    a12 = [{**c["group"], "a": c["method_a"], "b": c["method_b"], "a12": c["a12"],
            "magnitude_class": c["magnitude"], "cohens_h": c["cohens_h"]}
           for c in report["comparisons"]]
    return {"groups": rows, "spearman": report["spearman"], "effect_sizes": a12,
            "warnings": report["warnings"]}


def repro(profile: str, out: str | Path, seed: int = 0, scale: str = "desk",
          vessel: str | None = None, cfg: dict | None = None) -> dict:
    """simulate -> train -> detect -> evaluate for a named experiment."""
    cfg = cfg or profile_config(profile, scale, seed, vessel)
    out = Path(out)
    timings = {}
    t0 = time.perf_counter()
    manifest = simulate(cfg, out / "dataset")
    timings["simulate"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ckpt = train(out / "dataset", out / "model", cfg)
    timings["train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    tests = [out / "dataset" / e["file"] for e in manifest["split"]["test"]]
    verdicts = detect(ckpt, tests, out / "verdicts", cfg.get("variants", ["oddit"]))
    timings["detect"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    report = evaluate(verdicts, out / "report", cfg.get("group_fields",
                                                       ("vessel", "kind", "magnitude")))
    timings["evaluate"] = time.perf_counter() - t0
    summary = summarize(report)
    _write_once(out / "summary.json", _dumps(summary))
    log.info("timings %s", {k: round(v, 1) for k, v in timings.items()})
    return {"summary": summary, "report": report, "checkpoint": str(ckpt),
            "timings": timings, "config": copy.deepcopy(cfg)}


def training_flag_rate(checkpoint_path: str | Path, dataset_dir: str | Path) -> float:
    """Fraction of DTC training vectors above T_OOD (Chebyshev audit)."""
    ckpt = twin.load_checkpoint(checkpoint_path)
    manifest = load_manifest(dataset_dir)
    trajs = [load_trajectory(Path(dataset_dir) / e["file"])[0]
             for e in manifest["split"]["train"]]
    stride = int(ckpt.config["dtc"]["window_stride"])
    vec = twin.training_vectors(ckpt, trajs, stride)
    re = twin.reconstruction_error(vec, ckpt.dtc.reconstruct(vec))
    return float(np.mean(re > ckpt.threshold.t_ood))

