"""Trajectory persistence, Min-Max scaling, windowing and split assembly."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scenario import LabeledTrajectory
from .vessels import ControlInput, EnvCondition, VesselParams, VesselState, make_preset

TIME_COLUMN = "time_s"

_STATE_FEATURES = {
    3: (("surge_velocity", "u"), ("sway_velocity", "v"), ("yaw_rate", "r"),
        ("yaw_angle", "psi")),
    4: (("surge_velocity", "u"), ("sway_velocity", "v"), ("yaw_rate", "r"),
        ("yaw_angle", "psi"), ("roll_rate", "p"), ("roll_angle", "phi")),
    6: (("surge_velocity", "u"), ("sway_velocity", "v"), ("heave_velocity", "w"),
        ("roll_rate", "p"), ("pitch_rate", "q"), ("yaw_rate", "r"),
        ("roll_angle", "phi"), ("pitch_angle", "theta"), ("yaw_angle", "psi")),
}

_CONTROL_FEATURES = {
    "rudder": "rudder_angle",
    "stern_plane": "stern_plane_angle",
    "bow_port": "port_bow_plane_angle",
    "bow_starboard": "starboard_bow_plane_angle",
    "propeller": "propeller_speed",
    "left_propeller": "left_propeller_speed",
    "right_propeller": "right_propeller_speed",
}

ENV_FEATURES = ("ocean_current_speed",)

UNITS = {
    "time_s": "s", "surge_velocity": "m/s", "sway_velocity": "m/s", "heave_velocity": "m/s",
    "roll_rate": "rad/s", "pitch_rate": "rad/s", "yaw_rate": "rad/s",
    "roll_angle": "rad", "pitch_angle": "rad", "yaw_angle": "rad",
    "rudder_angle": "rad", "stern_plane_angle": "rad", "port_bow_plane_angle": "rad",
    "starboard_bow_plane_angle": "rad", "propeller_speed": "rpm",
    "left_propeller_speed": "rpm", "right_propeller_speed": "rpm",
    "ocean_current_speed": "m/s",
}


class DatasetError(ValueError):
    pass


def state_columns(params: VesselParams) -> list[str]:
    return [name for name, _ in _STATE_FEATURES[params.dof]]


def input_columns(params: VesselParams) -> list[str]:
    """Control columns followed by environment columns (exogenous inputs)."""
    cols = [_CONTROL_FEATURES[c] for c in params.controls]
    if params.supports_current:
        cols += list(ENV_FEATURES)
    return cols


def column_schema(params: VesselParams | str) -> list[str]:
    if isinstance(params, str):
        params = make_preset(params)
    return [TIME_COLUMN] + state_columns(params) + input_columns(params)


def row_values(params: VesselParams, state: VesselState, control: ControlInput,
               env: EnvCondition) -> list[float]:
    row = [state.time]
    row += [getattr(state, attr) for _, attr in _STATE_FEATURES[params.dof]]
    row += [control.channel(c) for c in params.controls]
    if params.supports_current:
        row.append(env.current_speed)
    return row


# -- CSV ---------------------------------------------------------------------

def write_csv(traj: LabeledTrajectory, path: str | Path) -> None:
    """Write ``traj`` with round-trip float formatting."""
    expected = column_schema(traj.vessel)
    if list(traj.columns) != expected:
        raise DatasetError(f"columns {traj.columns} do not match schema for {traj.vessel}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(expected)
        for row in traj.data:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path: str | Path, vessel: str, interval: tuple[int, int] | None = None
             ) -> LabeledTrajectory:
    schema = column_schema(vessel)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != schema:
            raise DatasetError(f"{path}: header {header} does not match schema {schema}")
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != len(schema):
                raise DatasetError(
                    f"{path}: row {lineno} has {len(cells)} cells, expected {len(schema)}")
            try:
                values = [float(c) for c in cells]
            except ValueError as exc:
                raise DatasetError(f"{path}: row {lineno}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise DatasetError(f"{path}: row {lineno}: non-finite cell")
            if rows and values[0] - rows[-1][0] != 1.0:
                raise DatasetError(f"{path}: row {lineno}: timestamps not at 1 s spacing")
            rows.append(values)
    data = np.array(rows, dtype=float).reshape(-1, len(schema))
    return LabeledTrajectory(vessel=vessel, columns=schema, data=data, interval=interval)


def write_sidecar(path: str | Path, spec_dict: dict, interval: tuple[int, int] | None,
                  **extra) -> None:
    doc = {"spec": spec_dict, "seed": spec_dict.get("seed"),
           "disturbance_interval": list(interval) if interval else None, **extra}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_sidecar(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def load_trajectory(csv_path: str | Path) -> tuple[LabeledTrajectory, dict]:
    """Load a CSV and its ``.json`` sidecar."""
    csv_path = Path(csv_path)
    meta = read_sidecar(csv_path.with_suffix(".json"))
    interval = meta.get("disturbance_interval")
    traj = read_csv(csv_path, meta["spec"]["vessel"], tuple(interval) if interval else None)
    return traj, meta


# -- scaling -----------------------------------------------------------------

@dataclass(frozen=True)
class ScalerParams:
    minimum: np.ndarray
    maximum: np.ndarray

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(np.asarray(d["min"], dtype=float), np.asarray(d["max"], dtype=float))

    def _span(self):
        span = self.maximum - self.minimum
        # constant columns: unit span centred so the training value maps to 0.5
        const = span == 0
        return np.where(const, 1.0, span), const

    def apply(self, x: np.ndarray) -> np.ndarray:
        span, const = self._span()
        return (x - self.minimum) / span + np.where(const, 0.5, 0.0)

    def invert(self, y: np.ndarray) -> np.ndarray:
        span, const = self._span()
        return (y - np.where(const, 0.5, 0.0)) * span + self.minimum


def fit_scaler(rows: np.ndarray | Iterable[np.ndarray]) -> ScalerParams:
    if not isinstance(rows, np.ndarray):
        rows = [np.asarray(r, dtype=float) for r in rows]
        rows = np.concatenate(rows, axis=0) if rows else np.empty((0, 0))
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise DatasetError("fit_scaler needs at least 2 rows")
    return ScalerParams(rows.min(axis=0), rows.max(axis=0))


# -- windowing ---------------------------------------------------------------

@dataclass
class Windows:
    """Windowed samples of one trajectory, stacked as arrays.

    ``inputs`` is (n, W, n_state + n_input), ``targets`` (n, H, n_state) and
    ``future_inputs`` (n, H, n_input) holds the exogenous inputs that
    accompany each horizon state. ``anchors`` is the time of the last input
    row; ``labels`` is 1 for OOD.
    """

    inputs: np.ndarray
    targets: np.ndarray
    future_inputs: np.ndarray
    anchors: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.anchors)

    def subset(self, idx) -> "Windows":
        return Windows(self.inputs[idx], self.targets[idx], self.future_inputs[idx],
                       self.anchors[idx], self.labels[idx])

    @staticmethod
    def concat(parts: Sequence["Windows"]) -> "Windows":
        return Windows(*(np.concatenate([getattr(p, f) for p in parts], axis=0)
                         for f in ("inputs", "targets", "future_inputs", "anchors", "labels")))


def window_labels(anchors: np.ndarray, interval: tuple[int, int] | None, horizon: int,
                  predictive: bool = True) -> np.ndarray:
    """OOD iff the forward horizon (t, t+H] meets [start, end).

    With ``predictive=False`` a sample is OOD iff the disturbance is active at t.
    """
    if interval is None:
        return np.zeros(len(anchors), dtype=int)
    start, end = interval
    if predictive:
        hit = (anchors + horizon >= start) & (anchors < end)
    else:
        hit = (anchors >= start) & (anchors < end)
    return hit.astype(int)


def make_windows(traj: LabeledTrajectory, window: int, horizon: int,
                 scaler: ScalerParams | None = None, n_state: int | None = None,
                 predictive: bool = True) -> Windows:
    """All (window, horizon) samples of ``traj``: L - W - H + 1 of them.

    Features exclude the time column. When ``scaler`` is given features are
    scaled first. ``n_state`` defaults to the preset's state feature count.
    """
    if window < 1 or horizon < 1:
        raise DatasetError("window and horizon must be >= 1")
    L = len(traj)
    if L < window + horizon:
        raise DatasetError(f"trajectory of length {L} is shorter than W + H = {window + horizon}")
    if n_state is None:
        n_state = len(state_columns(make_preset(traj.vessel)))
    feats = traj.data[:, 1:]
    if scaler is not None:
        feats = scaler.apply(feats)
    n = L - window - horizon + 1
    span = window + horizon
    # (n, W + H, d) view of every contiguous block
    blocks = np.lib.stride_tricks.sliding_window_view(feats, span, axis=0)[:n]
    blocks = np.moveaxis(blocks, -1, 1)
    inputs = np.ascontiguousarray(blocks[:, :window])
    future = blocks[:, window:]
    anchors = traj.data[window - 1:window - 1 + n, 0].astype(int)
    labels = window_labels(anchors, traj.interval, horizon, predictive)
    return Windows(inputs=inputs,
                   targets=np.ascontiguousarray(future[:, :, :n_state]),
                   future_inputs=np.ascontiguousarray(future[:, :, n_state:]),
                   anchors=anchors, labels=labels)


# -- splits ------------------------------------------------------------------

@dataclass
class DatasetSplit:
    vessel: str
    train: list[str]
    test: list[str]

    def to_manifest(self, metadata: dict[str, dict]) -> dict:
        def entry(name):
            meta = metadata[name]
            return {"file": name, "seed": meta.get("seed"),
                    "disturbance_interval": meta.get("disturbance_interval"),
                    "group": meta.get("group", {})}
        return {"vessel": self.vessel,
                "train": [entry(n) for n in self.train],
                "test": [entry(n) for n in self.test]}


def assemble_split(vessel: str, metadata: dict[str, dict], n_train: int,
                   n_test: int | None = None, train: Sequence[str] | None = None
                   ) -> DatasetSplit:
    """Assign scenario outputs to train/test.

    ``metadata`` maps file name to its sidecar. When ``train`` is given it is
    used verbatim (and must be disturbance-free); otherwise the first
    ``n_train`` disturbance-free files in name order train and the remaining
    files (up to ``n_test``) test.
    """
    names = sorted(metadata)
    clean = [n for n in names if not metadata[n].get("disturbance_interval")]
    if train is not None:
        train = list(train)
        for name in train:
            if metadata[name].get("disturbance_interval"):
                raise DatasetError(f"{name} is disturbed and cannot be used for training")
    else:
        if len(clean) < n_train:
            raise DatasetError(f"need {n_train} clean runs for training, found {len(clean)}")
        train = clean[:n_train]
    chosen = set(train)
    test = [n for n in names if n not in chosen]
    if n_test is not None:
        test = test[:n_test]
    return DatasetSplit(vessel=vessel, train=train, test=test)
