"""The digital twin: multistep state predictor, autoencoder OOD scorer,
thresholds, detection and checkpoint persistence.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .dataset import ScalerParams, Windows, make_windows
from .scenario import LabeledTrajectory

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "vesseltwin-checkpoint/1"
VARIANTS = ("oddit", "dtm-r", "dtm-e")
AE_DIMS = (64, 32, 16, 8, 16, 32, 64)
TWO_PI = 2.0 * math.pi

IND, OOD = "IND", "OOD"


class TwinError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.0025
    batch_size: int = 128
    pretrain_epochs: int = 60
    train_epochs: int = 100
    seed: int = 0
    clip_norm: float = 5.0
    window_stride: int = 1

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.window_stride > 0):
            raise TwinError("learning rate, batch size and stride must be positive")
        if self.pretrain_epochs < 0 or self.train_epochs < 0:
            raise TwinError("epoch counts must be non-negative")


@dataclass
class AeTrainConfig:
    lr: float = 0.002
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    window_stride: int = 1

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.epochs >= 0):
            raise TwinError("invalid autoencoder training config")


# -- DTM ---------------------------------------------------------------------

class Dtm:
    """Two stacked ReLU recurrent layers and a linear head.

    The head predicts the change from the current state, so one step is
    ``s_{t+1} = s_t + head(h_t)``. Multistep prediction feeds each predicted
    state back together with the known future inputs.

    ``angle_wrap`` lists ``(index, minimum, span)`` for scaled angle features;
    predictions of those are re-wrapped into (-pi, pi] after every step. The
    wrap is a constant shift almost everywhere, so gradients pass unchanged.
    """

    def __init__(self, n_state: int, n_input: int, hidden: int = 64, window: int = 30,
                 horizon: int = 30, seed: int = 0,
                 angle_wrap: Sequence[Sequence[float]] = ()):
        if window < 1 or horizon < 1:
            raise TwinError("window and horizon must be >= 1")
        rng = np.random.default_rng(seed)
        self.n_state = n_state
        self.n_input = n_input
        self.hidden = hidden
        self.window = window
        self.horizon = horizon
        self.layers = [nn.Recurrent(n_state + n_input, hidden, rng),
                       nn.Recurrent(hidden, hidden, rng)]
        self.head = nn.Dense(hidden, n_state, "identity", rng)
        self.angle_wrap = [(int(i), float(lo), float(span)) for i, lo, span in angle_wrap]

    def config(self) -> dict:
        return {"n_state": self.n_state, "n_input": self.n_input, "hidden": self.hidden,
                "window": self.window, "horizon": self.horizon,
                "angle_wrap": [list(a) for a in self.angle_wrap]}

    def _wrap(self, pred: np.ndarray) -> np.ndarray:
        for i, lo, span in self.angle_wrap:
            raw = pred[..., i] * span + lo
            raw = raw - TWO_PI * np.ceil((raw - math.pi) / TWO_PI)
            pred[..., i] = (raw - lo) / span
        return pred

    def residual(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        """``pred - target`` with angle differences taken the short way round."""
        diff = pred - target
        for i, lo, span in self.angle_wrap:
            raw = diff[..., i] * span
            diff[..., i] = (raw - TWO_PI * np.ceil((raw - math.pi) / TWO_PI)) / span
        return diff

    def loss(self, pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
        diff = self.residual(pred, target)
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"rnn{i}.{k}"] = v
        for k, v in self.head.params.items():
            out[f"head.{k}"] = v
        return out

    def _zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _recur(self, x, hs, caches):
        l0, l1 = self.layers
        h0, c0 = l0.step(x, hs[0])
        h1, c1 = l1.step(h0, hs[1])
        if caches is not None:
            caches.append((c0, c1))
        return [h0, h1]

    def _recur_backward(self, cache, dh, grads_l):
        c0, c1 = cache
        dx1, dh1 = self.layers[1].step_backward(c1, dh[1], grads_l[1])
        dx0, dh0 = self.layers[0].step_backward(c0, dh[0] + dx1, grads_l[0])
        return dx0, [dh0, dh1]

    def _init_hidden(self, batch):
        return [np.zeros((batch, self.hidden)), np.zeros((batch, self.hidden))]

    # one-step-ahead over a teacher-forced sequence (pretraining)
    def teacher_forward(self, seq: np.ndarray, keep_cache: bool = True):
        B, T, _ = seq.shape
        hs = self._init_hidden(B)
        caches = [] if keep_cache else None
        head_caches = []
        preds = np.empty((B, T, self.n_state))
        for t in range(T):
            hs = self._recur(seq[:, t], hs, caches)
            delta, hc = self.head.forward(hs[1])
            head_caches.append(hc)
            preds[:, t] = self._wrap(seq[:, t, :self.n_state] + delta)
        return preds, (caches, head_caches)

    def teacher_backward(self, cache, dpreds: np.ndarray) -> dict[str, np.ndarray]:
        caches, head_caches = cache
        B, T, _ = dpreds.shape
        grads_l = [layer.zero_grads() for layer in self.layers]
        head_g = {k: np.zeros_like(v) for k, v in self.head.params.items()}
        dh = self._init_hidden(B)
        for t in range(T - 1, -1, -1):
            dhead, g = self.head.backward(head_caches[t], dpreds[:, t])
            for k in head_g:
                head_g[k] += g[k]
            dh[1] = dh[1] + dhead
            _, dh = self._recur_backward(caches[t], dh, grads_l)
        return self._pack(grads_l, head_g)

    def _pack(self, grads_l, head_g):
        out = {}
        for i, g in enumerate(grads_l):
            for k, v in g.items():
                out[f"rnn{i}.{k}"] = v
        for k, v in head_g.items():
            out[f"head.{k}"] = v
        return out

    def _check_inputs(self, window: np.ndarray, future_inputs: np.ndarray):
        if window.ndim != 3 or window.shape[1] != self.window \
                or window.shape[2] != self.n_state + self.n_input:
            raise TwinError(f"window must be (B, {self.window}, {self.n_state + self.n_input}), "
                            f"got {window.shape}")
        if future_inputs.ndim != 3 or future_inputs.shape[1] != self.horizon \
                or future_inputs.shape[2] != self.n_input:
            raise TwinError(f"future inputs must be (B, {self.horizon}, {self.n_input}), "
                            f"got {future_inputs.shape}")

    def rollout(self, window: np.ndarray, future_inputs: np.ndarray, keep_cache: bool = True):
        """Predict ``horizon`` states after each window; returns (B, H, n_state)."""
        self._check_inputs(window, future_inputs)
        B = window.shape[0]
        W, H = self.window, self.horizon
        hs = self._init_hidden(B)
        caches = [] if keep_cache else None
        for t in range(W):
            hs = self._recur(window[:, t], hs, caches)
        preds = np.empty((B, H, self.n_state))
        head_caches = []
        base = window[:, W - 1, :self.n_state]
        for k in range(H):
            delta, hc = self.head.forward(hs[1])
            head_caches.append(hc)
            preds[:, k] = self._wrap(base + delta)
            base = preds[:, k]
            if k < H - 1:
                x = np.concatenate([base, future_inputs[:, k]], axis=1)
                hs = self._recur(x, hs, caches)
        return preds, (caches, head_caches)

    def rollout_backward(self, cache, dpreds: np.ndarray) -> dict[str, np.ndarray]:
        caches, head_caches = cache
        B, H, ns = dpreds.shape
        W = self.window
        grads_l = [layer.zero_grads() for layer in self.layers]
        head_g = {k: np.zeros_like(v) for k, v in self.head.params.items()}
        dh = self._init_hidden(B)
        carry = np.zeros((B, ns))
        for s in range(W + H - 2, -1, -1):
            if s >= W - 1:
                k = s - (W - 1)
                g = dpreds[:, k] + carry
                dhead, hg = self.head.backward(head_caches[k], g)
                for name in head_g:
                    head_g[name] += hg[name]
                dh[1] = dh[1] + dhead
                # residual path: pred_k = pred_{k-1} + delta_k
                carry = g
            dx, dh = self._recur_backward(caches[s], dh, grads_l)
            if s >= W:
                carry = carry + dx[:, :ns]
        return self._pack(grads_l, head_g)

    def predict_horizon(self, window: np.ndarray, future_inputs: np.ndarray,
                        batch_size: int = 1024) -> np.ndarray:
        single = window.ndim == 2
        if single:
            window, future_inputs = window[None], future_inputs[None]
        self._check_inputs(window, future_inputs)
        out = np.empty((window.shape[0], self.horizon, self.n_state))
        for i in range(0, len(window), batch_size):
            out[i:i + batch_size], _ = self.rollout(window[i:i + batch_size],
                                                    future_inputs[i:i + batch_size],
                                                    keep_cache=False)
        return out[0] if single else out


def predict_horizon(dtm: Dtm, window: np.ndarray, future_inputs: np.ndarray) -> np.ndarray:
    return dtm.predict_horizon(window, future_inputs)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_dtm(windows: Windows, n_state: int, n_input: int, cfg: TrainConfig,
              hidden: int = 64, angle_wrap: Sequence[Sequence[float]] = ()
              ) -> tuple[Dtm, dict[str, list[float]]]:
    """Pretrain on one-step-ahead prediction, then train the full rollout."""
    if len(windows) == 0:
        raise TwinError("no training windows")
    W = windows.inputs.shape[1]
    H = windows.targets.shape[1]
    dtm = Dtm(n_state, n_input, hidden, W, H, seed=cfg.seed, angle_wrap=angle_wrap)
    rng = np.random.default_rng([cfg.seed, 1])
    params = dtm.params
    history = {"pretrain": [], "train": []}

    # one-step targets: window rows 1..W-1 plus the first horizon state
    seq = windows.inputs
    next_states = np.concatenate([seq[:, 1:, :n_state], windows.targets[:, :1]], axis=1)

    opt = nn.AdamState(lr=cfg.lr)
    for epoch in range(cfg.pretrain_epochs):
        total = 0.0
        for idx in _minibatches(len(seq), cfg.batch_size, rng):
            preds, cache = dtm.teacher_forward(seq[idx])
            loss, dpred = dtm.loss(preds, next_states[idx])
            grads = dtm.teacher_backward(cache, dpred)
            nn.clip_by_global_norm(grads, cfg.clip_norm)
            nn.adam_step(opt, params, grads)
            total += loss * len(idx)
        history["pretrain"].append(total / len(seq))
        log.debug("dtm pretrain epoch %d loss %.6g", epoch, history["pretrain"][-1])

    opt = nn.AdamState(lr=cfg.lr)
    for epoch in range(cfg.train_epochs):
        total = 0.0
        for idx in _minibatches(len(seq), cfg.batch_size, rng):
            preds, cache = dtm.rollout(seq[idx], windows.future_inputs[idx])
            loss, dpred = dtm.loss(preds, windows.targets[idx])
            grads = dtm.rollout_backward(cache, dpred)
            nn.clip_by_global_norm(grads, cfg.clip_norm)
            nn.adam_step(opt, params, grads)
            total += loss * len(idx)
        history["train"].append(total / len(seq))
        log.debug("dtm train epoch %d loss %.6g", epoch, history["train"][-1])
    return dtm, history


# -- DTC ---------------------------------------------------------------------

class Autoencoder:
    """Mirrored dense autoencoder: RReLU inside, sigmoid on the output."""

    def __init__(self, n_features: int, dims: Sequence[int] = AE_DIMS, seed: int = 0):
        rng = np.random.default_rng(seed)
        sizes = [n_features, *dims, n_features]
        self.n_features = n_features
        self.dims = tuple(dims)
        self.layers = [
            nn.Dense(a, b, "sigmoid" if i == len(sizes) - 2 else "rrelu", rng)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def config(self) -> dict:
        return {"n_features": self.n_features, "dims": list(self.dims)}

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"dense{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.params.items()}

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, training, rng)
            caches.append(c)
        return x, caches

    def backward(self, caches, dy: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(caches[i], dy)
            for k, v in g.items():
                grads[f"dense{i}.{k}"] = v
        return grads

    def reconstruct(self, x: np.ndarray, batch_size: int = 8192) -> np.ndarray:
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        out = np.empty_like(flat)
        for i in range(0, len(flat), batch_size):
            out[i:i + batch_size], _ = self.forward(flat[i:i + batch_size])
        return out.reshape(shape)


def reconstruction_error(state: np.ndarray, reconstruction: np.ndarray) -> np.ndarray:
    """Euclidean norm of the residual over the last axis."""
    state = np.asarray(state, dtype=float)
    reconstruction = np.asarray(reconstruction, dtype=float)
    if state.shape != reconstruction.shape:
        raise TwinError(f"shape mismatch {state.shape} vs {reconstruction.shape}")
    diff = state - reconstruction
    return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass(frozen=True)
class OodThreshold:
    mean: float
    std: float
    t_ood: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "t_ood": self.t_ood}


def compute_threshold(errors) -> OodThreshold:
    """``mean + 3 * std`` with the population standard deviation."""
    errors = np.asarray(errors, dtype=float).ravel()
    if errors.size == 0:
        raise TwinError("cannot compute a threshold from an empty error list")
    mu = float(np.mean(errors))
    sigma = float(np.std(errors))
    return OodThreshold(mu, sigma, mu + 3.0 * sigma)


def classify(re_value: float, threshold: OodThreshold | float) -> str:
    t = threshold.t_ood if isinstance(threshold, OodThreshold) else float(threshold)
    return IND if re_value <= t else OOD


def train_dtc(vectors: np.ndarray, cfg: AeTrainConfig
              ) -> tuple[Autoencoder, OodThreshold, list[float]]:
    """Fit the autoencoder on (predicted state + input) vectors; derive T_OOD."""
    vectors = np.asarray(vectors, dtype=float).reshape(-1, vectors.shape[-1])
    if len(vectors) == 0:
        raise TwinError("no vectors to train the autoencoder on")
    ae = Autoencoder(vectors.shape[1], seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    opt = nn.AdamState(lr=cfg.lr)
    params = ae.params
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in _minibatches(len(vectors), cfg.batch_size, rng):
            x = vectors[idx]
            y, caches = ae.forward(x, training=True, rng=rng)
            loss, dy = nn.mse_loss(y, x)
            nn.adam_step(opt, params, ae.backward(caches, dy))
            total += loss * len(idx)
        history.append(total / len(vectors))
    errors = reconstruction_error(vectors, ae.reconstruct(vectors))
    return ae, compute_threshold(errors), history


# -- scoring -----------------------------------------------------------------

def baseline_score(kind: str, predicted: np.ndarray, realized: np.ndarray) -> np.ndarray:
    """RMSE or Euclidean distance over the last two axes (horizon x state)."""
    predicted = np.asarray(predicted, dtype=float)
    realized = np.asarray(realized, dtype=float)
    if predicted.shape != realized.shape:
        raise TwinError(f"shape mismatch {predicted.shape} vs {realized.shape}")
    diff = realized - predicted
    sq = np.sum(diff * diff, axis=(-2, -1))
    if kind == "rmse":
        n = diff.shape[-1] * diff.shape[-2]
        return np.sqrt(sq / n)
    if kind == "euclid":
        return np.sqrt(sq)
    raise TwinError(f"unknown baseline kind {kind!r}")


def dtc_vectors(predicted: np.ndarray, future_inputs: np.ndarray) -> np.ndarray:
    return np.concatenate([predicted, future_inputs], axis=-1)


def aggregate(step_errors: np.ndarray, how: str = "max") -> np.ndarray:
    if how == "max":
        return step_errors.max(axis=-1)
    if how == "mean":
        return step_errors.mean(axis=-1)
    raise TwinError(f"unknown aggregation {how!r}")


# -- checkpoint --------------------------------------------------------------

@dataclass
class TwinCheckpoint:
    vessel: str
    columns: list[str]
    n_state: int
    scaler: ScalerParams
    dtm: Dtm
    dtc: Autoencoder
    thresholds: dict[str, OodThreshold]
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    aggregation: str = "max"
    predictive_labels: bool = True
    version: str = CHECKPOINT_VERSION

    @property
    def threshold(self) -> OodThreshold:
        return self.thresholds["oddit"]

    def to_dict(self) -> dict:
        def arrays(params):
            return {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in sorted(params.items())}
        return {
            "version": self.version,
            "vessel": self.vessel,
            "columns": list(self.columns),
            "n_state": self.n_state,
            "scaler": self.scaler.to_dict(),
            "dtm": {"config": self.dtm.config(), "params": arrays(self.dtm.params)},
            "dtc": {"config": self.dtc.config(), "params": arrays(self.dtc.params),
                    "rrelu_eval_slope": nn.RRELU_EVAL_SLOPE},
            "thresholds": {k: v.to_dict() for k, v in sorted(self.thresholds.items())},
            "std_kind": "population",
            "aggregation": self.aggregation,
            "predictive_labels": self.predictive_labels,
            "adam": {"beta1": nn.ADAM_BETA1, "beta2": nn.ADAM_BETA2, "eps": nn.ADAM_EPS},
            "seeds": self.seeds,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwinCheckpoint":
        if d.get("version") != CHECKPOINT_VERSION:
            raise TwinError(f"unsupported checkpoint version {d.get('version')!r}")
        try:
            dc = d["dtm"]["config"]
            dtm = Dtm(dc["n_state"], dc["n_input"], dc["hidden"], dc["window"], dc["horizon"],
                      angle_wrap=dc.get("angle_wrap", ()))
            _load_params(dtm.params, d["dtm"]["params"])
            ac = d["dtc"]["config"]
            dtc = Autoencoder(ac["n_features"], ac["dims"])
            _load_params(dtc.params, d["dtc"]["params"])
            thresholds = {k: OodThreshold(**v) for k, v in d["thresholds"].items()}
            return cls(vessel=d["vessel"], columns=list(d["columns"]), n_state=d["n_state"],
                       scaler=ScalerParams.from_dict(d["scaler"]), dtm=dtm, dtc=dtc,
                       thresholds=thresholds, seeds=d.get("seeds", {}),
                       config=d.get("config", {}), aggregation=d.get("aggregation", "max"),
                       predictive_labels=d.get("predictive_labels", True))
        except (KeyError, TypeError, ValueError) as exc:
            raise TwinError(f"corrupt checkpoint: {exc}") from exc


def _load_params(target: dict[str, np.ndarray], stored: dict) -> None:
    if set(target) != set(stored):
        raise TwinError("checkpoint parameter names do not match the architecture")
    for name, arr in target.items():
        entry = stored[name]
        values = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        if values.shape != arr.shape:
            raise TwinError(f"parameter {name} has shape {values.shape}, expected {arr.shape}")
        arr[...] = values


def save_checkpoint(twin: TwinCheckpoint, path: str | Path) -> None:
    Path(path).write_text(json.dumps(twin.to_dict(), sort_keys=True))


def load_checkpoint(path: str | Path) -> TwinCheckpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TwinError(f"corrupt checkpoint {path}: {exc}") from exc
    return TwinCheckpoint.from_dict(doc)


# -- detection ---------------------------------------------------------------

@dataclass
class Detection:
    """Per-anchor scores of one trajectory under one variant."""

    variant: str
    anchors: np.ndarray
    scores: np.ndarray
    decisions: np.ndarray  # 1 = OOD
    labels: np.ndarray
    step_errors: np.ndarray | None = None  # (n, H) for oddit

    def verdicts(self) -> list[dict]:
        out = []
        for i, t in enumerate(self.anchors):
            row = {"anchor": int(t), "score": float(self.scores[i]),
                   "decision": OOD if self.decisions[i] else IND}
            if self.step_errors is not None:
                row["step_errors"] = self.step_errors[i].tolist()
            out.append(row)
        return out


def _windows_for(twin: TwinCheckpoint, traj: LabeledTrajectory) -> Windows:
    if traj.vessel != twin.vessel or list(traj.columns) != list(twin.columns):
        raise TwinError(f"trajectory schema ({traj.vessel}) does not match checkpoint "
                        f"({twin.vessel})")
    if len(twin.scaler.minimum) != len(twin.columns) - 1:
        raise TwinError("scaler width does not match the checkpoint schema")
    return make_windows(traj, twin.dtm.window, twin.dtm.horizon, twin.scaler,
                        twin.n_state, twin.predictive_labels)


def score_windows(twin: TwinCheckpoint, win: Windows, variant: str = "oddit",
                  predicted: np.ndarray | None = None):
    """Return ``(scores, step_errors)`` for every window."""
    if variant not in VARIANTS:
        raise TwinError(f"unknown variant {variant!r}")
    if predicted is None:
        predicted = twin.dtm.predict_horizon(win.inputs, win.future_inputs)
    if variant == "oddit":
        vec = dtc_vectors(predicted, win.future_inputs)
        step = reconstruction_error(vec, twin.dtc.reconstruct(vec))
        return aggregate(step, twin.aggregation), step
    kind = "rmse" if variant == "dtm-r" else "euclid"
    # realized states re-expressed so angle residuals are the short way round
    realized = predicted - twin.dtm.residual(predicted, win.targets)
    return baseline_score(kind, predicted, realized), None


def detect(twin: TwinCheckpoint, traj: LabeledTrajectory,
           variants: Sequence[str] = ("oddit",)) -> dict[str, Detection]:
    win = _windows_for(twin, traj)
    predicted = twin.dtm.predict_horizon(win.inputs, win.future_inputs)
    out = {}
    for variant in variants:
        scores, step = score_windows(twin, win, variant, predicted)
        t = twin.thresholds[variant].t_ood
        out[variant] = Detection(variant=variant, anchors=win.anchors, scores=scores,
                                 decisions=(scores > t).astype(int), labels=win.labels,
                                 step_errors=step)
    return out


def angle_wrap(scaler: ScalerParams, state_cols: Sequence[str]) -> list[tuple]:
    """``(index, minimum, span)`` for every angle among the state features."""
    out = []
    for i, name in enumerate(state_cols):
        span = float(scaler.maximum[i] - scaler.minimum[i])
        if name.endswith("_angle") and span > 0:
            out.append((i, float(scaler.minimum[i]), span))
    return out


# -- end-to-end fit ----------------------------------------------------------

def fit_twin(train_trajs: Sequence[LabeledTrajectory], dtm_cfg: TrainConfig,
             ae_cfg: AeTrainConfig, window: int, horizon: int, hidden: int,
             aggregation: str = "max", predictive_labels: bool = True,
             extra_config: dict | None = None):
    """Scale, train DTM then DTC, and derive all three thresholds.

    Returns ``(checkpoint, history)``.
    """
    from .dataset import fit_scaler, input_columns, state_columns
    from .vessels import make_preset

    if not train_trajs:
        raise TwinError("no training trajectories")
    vessel = train_trajs[0].vessel
    params = make_preset(vessel)
    n_state = len(state_columns(params))
    n_input = len(input_columns(params))
    for tr in train_trajs:
        if tr.vessel != vessel:
            raise TwinError("training trajectories mix vessel presets")
        if tr.interval is not None:
            raise TwinError("training trajectories must be disturbance-free")
    scaler = fit_scaler([tr.data[:, 1:] for tr in train_trajs])
    per_traj = [make_windows(tr, window, horizon, scaler, n_state, predictive_labels)
                for tr in train_trajs]
    all_win = Windows.concat(per_traj)
    dtm_win = all_win.subset(slice(None, None, dtm_cfg.window_stride))
    dtm, dtm_hist = train_dtm(dtm_win, n_state, n_input, dtm_cfg, hidden,
                              angle_wrap(scaler, state_columns(params)))

    ae_win = all_win.subset(slice(None, None, ae_cfg.window_stride))
    predicted = dtm.predict_horizon(ae_win.inputs, ae_win.future_inputs)
    vectors = dtc_vectors(predicted, ae_win.future_inputs)
    dtc, threshold, ae_hist = train_dtc(vectors.reshape(-1, vectors.shape[-1]), ae_cfg)

    twin = TwinCheckpoint(
        vessel=vessel, columns=list(train_trajs[0].columns), n_state=n_state, scaler=scaler,
        dtm=dtm, dtc=dtc, thresholds={"oddit": threshold},
        seeds={"dtm": dtm_cfg.seed, "dtc": ae_cfg.seed},
        config={"dtm": asdict(dtm_cfg), "dtc": asdict(ae_cfg), "window": window,
                "horizon": horizon, "hidden": hidden, **(extra_config or {})},
        aggregation=aggregation, predictive_labels=predictive_labels,
    )
    for variant in ("dtm-r", "dtm-e"):
        scores, _ = score_windows(twin, ae_win, variant, predicted)
        twin.thresholds[variant] = compute_threshold(scores)
    history = {"dtm_pretrain": dtm_hist["pretrain"], "dtm_train": dtm_hist["train"],
               "dtc": ae_hist}
    return twin, history


def training_vectors(twin: TwinCheckpoint, train_trajs: Sequence[LabeledTrajectory],
                     stride: int) -> np.ndarray:
    """Rebuild the DTC training vectors (used to audit the threshold)."""
    wins = Windows.concat([_windows_for(twin, tr) for tr in train_trajs])
    wins = wins.subset(slice(None, None, stride))
    predicted = twin.dtm.predict_horizon(wins.inputs, wins.future_inputs)
    vec = dtc_vectors(predicted, wins.future_inputs)
    return vec.reshape(-1, vec.shape[-1])


def is_finite_checkpoint(twin: TwinCheckpoint) -> bool:
    return all(np.all(np.isfinite(v)) for v in {**twin.dtm.params, **twin.dtc.params}.values()) \
        and all(math.isfinite(t.t_ood) for t in twin.thresholds.values())
