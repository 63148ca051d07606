import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vesseltwin import twin
from vesseltwin.dataset import Windows, make_windows
from vesseltwin.scenario import LabeledTrajectory, ScenarioSpec, WaypointSpec, run_scenario
from vesseltwin.twin import (
    IND,
    OOD,
    AeTrainConfig,
    Autoencoder,
    Dtm,
    OodThreshold,
    TrainConfig,
    TwinError,
    baseline_score,
    classify,
    compute_threshold,
    reconstruction_error,
)

TINY_DTM = TrainConfig(pretrain_epochs=2, train_epochs=2, batch_size=64, window_stride=4)
TINY_AE = AeTrainConfig(epochs=2, window_stride=4)


def mariner_runs(n, duration=200, start=0):
    m = WaypointSpec(6, 100.0, (0, 1200), (0, 1200), min_distance=700)
    return [run_scenario(ScenarioSpec("mariner", m, start + i, duration)) for i in range(n)]


@pytest.fixture(scope="module")
def small_twin():
    trajs = mariner_runs(3)
    ckpt, history = twin.fit_twin(trajs, TINY_DTM, TINY_AE, window=5, horizon=5, hidden=8)
    return ckpt, history, trajs


def constant_windows(n=64, W=4, H=3, ns=2, ni=1, value=0.4):
    inputs = np.full((n, W, ns + ni), value)
    return Windows(inputs, np.full((n, H, ns), value), np.full((n, H, ni), value),
                   np.arange(n), np.zeros(n, dtype=int))


# -- DTM ---------------------------------------------------------------------

def test_dtm_learns_constant_fixed_point():
    win = constant_windows()
    dtm, hist = twin.train_dtm(win, 2, 1, TrainConfig(pretrain_epochs=20, train_epochs=40,
                                                     batch_size=16, lr=0.005), hidden=8)
    assert hist["train"][-1] < 1e-4
    pred = dtm.predict_horizon(win.inputs[:4], win.future_inputs[:4])
    assert np.all(np.abs(pred - 0.4) < 1e-2)


def test_dtm_minimal_window_and_horizon():
    win = constant_windows(W=1, H=1)
    dtm, _ = twin.train_dtm(win, 2, 1, TrainConfig(pretrain_epochs=1, train_epochs=1), hidden=4)
    assert dtm.predict_horizon(win.inputs[0], win.future_inputs[0]).shape == (1, 2)


def test_dtm_training_is_deterministic():
    win = constant_windows()
    cfg = TrainConfig(pretrain_epochs=2, train_epochs=2, batch_size=16, seed=9)
    a, _ = twin.train_dtm(win, 2, 1, cfg, hidden=6)
    b, _ = twin.train_dtm(win, 2, 1, cfg, hidden=6)
    for name, value in a.params.items():
        assert value.tobytes() == b.params[name].tobytes()


def test_zero_weight_dtm_repeats_last_state():
    dtm = Dtm(2, 1, hidden=4, window=3, horizon=4)
    for p in dtm.params.values():
        p[...] = 0.0
    window = np.random.default_rng(0).uniform(size=(3, 3))
    pred = dtm.predict_horizon(window, np.zeros((4, 1)))
    assert np.array_equal(pred, np.tile(window[-1, :2], (4, 1)))


def test_horizon_one_equals_head_output():
    dtm = Dtm(2, 1, hidden=5, window=3, horizon=1, seed=4)
    window = np.random.default_rng(1).uniform(size=(1, 3, 3))
    hs = dtm._init_hidden(1)
    for t in range(3):
        hs = dtm._recur(window[:, t], hs, None)
    delta, _ = dtm.head.forward(hs[1])
    expected = window[0, -1, :2] + delta[0]
    assert np.allclose(dtm.predict_horizon(window[0], np.zeros((1, 1)))[0], expected)


def test_predict_horizon_rejects_wrong_shapes():
    dtm = Dtm(2, 1, window=3, horizon=2)
    with pytest.raises(TwinError):
        dtm.predict_horizon(np.zeros((4, 3)), np.zeros((2, 1)))
    with pytest.raises(TwinError):
        dtm.predict_horizon(np.zeros((3, 3)), np.zeros((3, 1)))


def test_empty_training_set_rejected():
    empty = constant_windows(n=0)
    with pytest.raises(TwinError):
        twin.train_dtm(empty, 2, 1, TrainConfig())


def test_angle_predictions_stay_wrapped():
    # span of 2*pi starting at -pi: scaled angle 0.5 is 0 rad
    dtm = Dtm(1, 1, hidden=3, window=2, horizon=6, angle_wrap=[(0, -math.pi, 2 * math.pi)])
    for p in dtm.params.values():
        p[...] = 0.0
    dtm.head.params["b"][...] = 0.3
    pred = dtm.predict_horizon(np.full((2, 2), 0.5), np.zeros((6, 1)))[:, 0]
    raw = pred * 2 * math.pi - math.pi
    assert np.all((raw > -math.pi - 1e-12) & (raw <= math.pi + 1e-12))
    # 0.3 of a turn per step, taken modulo a full turn
    expected = [(0.5 + 0.3 * k) % 1.0 for k in range(1, 7)]
    assert np.allclose(pred, expected)


def test_residual_takes_short_way_round():
    dtm = Dtm(1, 1, angle_wrap=[(0, -math.pi, 2 * math.pi)])
    diff = dtm.residual(np.array([[0.99]]), np.array([[0.01]]))
    assert diff[0, 0] == pytest.approx(-0.02)


# -- DTC ---------------------------------------------------------------------

def test_autoencoder_architecture():
    ae = Autoencoder(5)
    sizes = [layer.n_out for layer in ae.layers]
    assert sizes == [64, 32, 16, 8, 16, 32, 64, 5]
    assert [layer.activation for layer in ae.layers] == ["rrelu"] * 7 + ["sigmoid"]


def test_autoencoder_output_in_unit_interval():
    ae = Autoencoder(4, seed=2)
    out = ae.reconstruct(np.random.default_rng(0).normal(size=(10, 3, 4)) * 10)
    assert out.shape == (10, 3, 4)
    assert np.all((out > 0) & (out < 1))


def test_reconstruction_error_examples():
    assert reconstruction_error(np.ones(3), np.ones(3)) == 0.0
    assert reconstruction_error(np.array([3.0, 4.0]), np.zeros(2)) == 5.0


def test_reconstruction_error_matches_norm():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(20, 6)), rng.normal(size=(20, 6))
    assert np.allclose(reconstruction_error(a, b), np.linalg.norm(a - b, axis=1),
                       rtol=0, atol=1e-12)


def test_reconstruction_error_shape_mismatch():
    with pytest.raises(TwinError):
        reconstruction_error(np.zeros(3), np.zeros(4))


def test_threshold_examples():
    assert compute_threshold([1, 1, 1]).t_ood == 1.0
    t = compute_threshold([0, 2])
    assert (t.mean, t.std, t.t_ood) == (1.0, 1.0, 4.0)


def test_threshold_rejects_empty():
    with pytest.raises(TwinError):
        compute_threshold([])


@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(0, 1e3)))
def test_threshold_identity_and_chebyshev(errors):
    t = compute_threshold(errors)
    assert t.t_ood == t.mean + 3.0 * t.std
    # one ulp of slack: the mean of identical values can round below them
    assert np.mean(errors > t.t_ood * (1 + 1e-12)) <= 1.0 / 9.0


def test_classify_boundary():
    t = OodThreshold(1.0, 0.5, 2.5)
    assert classify(2.5, t) == IND
    assert classify(2.5 + 1e-9, t) == OOD
    assert classify(0.0, t) == IND


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_classify_is_monotone(t, a, b):
    lo, hi = sorted((a, b))
    if classify(lo, t) == OOD:
        assert classify(hi, t) == OOD


def test_train_dtc_threshold_on_its_own_vectors():
    vec = np.random.default_rng(0).uniform(size=(300, 4))
    ae, thr, hist = twin.train_dtc(vec, AeTrainConfig(epochs=3))
    re = reconstruction_error(vec, ae.reconstruct(vec))
    assert thr == compute_threshold(re)
    assert np.mean(re > thr.t_ood) <= 1 / 9
    assert len(hist) == 3


def test_train_dtc_rejects_empty():
    with pytest.raises(TwinError):
        twin.train_dtc(np.empty((0, 3)), AeTrainConfig())


# -- baselines ---------------------------------------------------------------

def test_baselines_zero_on_perfect_prediction():
    p = np.random.default_rng(0).normal(size=(4, 3))
    assert baseline_score("rmse", p, p) == 0.0
    assert baseline_score("euclid", p, p) == 0.0


def test_baselines_equal_residuals_closed_form():
    p = np.zeros((5, 4))
    r = np.full((5, 4), -0.3)
    assert baseline_score("rmse", p, r) == pytest.approx(0.3)
    assert baseline_score("euclid", p, r) == pytest.approx(0.3 * math.sqrt(20))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-10, 10)),
       st.integers(0, 2 ** 32 - 1))
def test_euclid_is_rmse_times_sqrt_n(pred, seed):
    real = np.random.default_rng(seed).normal(size=pred.shape)
    n = pred.size
    e = baseline_score("euclid", pred, real)
    r = baseline_score("rmse", pred, real)
    assert abs(e - r * math.sqrt(n)) <= 1e-12 * max(1.0, e)


def test_baseline_errors():
    with pytest.raises(TwinError):
        baseline_score("mae", np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(TwinError):
        baseline_score("rmse", np.zeros((2, 2)), np.zeros((2, 3)))


# -- end to end ----------------------------------------------------------------

def test_fit_twin_records_history_and_thresholds(small_twin):
    ckpt, history, _ = small_twin
    assert set(ckpt.thresholds) == set(twin.VARIANTS)
    for t in ckpt.thresholds.values():
        assert t.t_ood == t.mean + 3.0 * t.std
    assert len(history["dtm_pretrain"]) == 2 and len(history["dtc"]) == 2
    assert twin.is_finite_checkpoint(ckpt)


def test_training_vectors_respect_chebyshev(small_twin):
    ckpt, _, trajs = small_twin
    vec = twin.training_vectors(ckpt, trajs, TINY_AE.window_stride)
    re = reconstruction_error(vec, ckpt.dtc.reconstruct(vec))
    assert compute_threshold(re) == ckpt.threshold
    assert np.mean(re > ckpt.threshold.t_ood) <= 1 / 9


def test_verdicts_match_classify(small_twin):
    ckpt, _, trajs = small_twin
    det = twin.detect(ckpt, trajs[0], twin.VARIANTS)
    oddit = det["oddit"]
    assert np.array_equal(oddit.scores, oddit.step_errors.max(axis=1))
    for score, decision in zip(oddit.scores, oddit.decisions):
        assert classify(score, ckpt.threshold) == (OOD if decision else IND)
    for variant in ("dtm-r", "dtm-e"):
        t = ckpt.thresholds[variant]
        assert np.array_equal(det[variant].decisions, (det[variant].scores > t.t_ood))
    rows = oddit.verdicts()
    assert rows[0]["anchor"] == oddit.anchors[0] and len(rows[0]["step_errors"]) == 5


def test_threshold_sweep_reproduces_decisions(small_twin):
    ckpt, _, trajs = small_twin
    scores = twin.detect(ckpt, trajs[1])["oddit"].scores
    for tau in np.quantile(scores, [0.1, 0.5, 0.9]):
        via_classify = np.array([classify(s, tau) == OOD for s in scores])
        assert np.array_equal(via_classify, scores > tau)


def test_checkpoint_round_trip_detects_bitwise(small_twin, tmp_path):
    ckpt, _, trajs = small_twin
    path = tmp_path / "ckpt.json"
    twin.save_checkpoint(ckpt, path)
    loaded = twin.load_checkpoint(path)
    a = twin.detect(ckpt, trajs[2], twin.VARIANTS)
    b = twin.detect(loaded, trajs[2], twin.VARIANTS)
    for v in twin.VARIANTS:
        assert a[v].scores.tobytes() == b[v].scores.tobytes()
    assert loaded.to_dict() == ckpt.to_dict()


def test_truncated_checkpoint_rejected(small_twin, tmp_path):
    ckpt, _, _ = small_twin
    path = tmp_path / "ckpt.json"
    twin.save_checkpoint(ckpt, path)
    path.write_text(path.read_text()[:500])
    with pytest.raises(TwinError, match="corrupt"):
        twin.load_checkpoint(path)


def test_foreign_version_rejected(small_twin, tmp_path):
    ckpt, _, _ = small_twin
    doc = ckpt.to_dict()
    doc["version"] = "other/9"
    path = tmp_path / "ckpt.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(TwinError, match="version"):
        twin.load_checkpoint(path)


def test_checkpoint_with_missing_parameter_rejected(small_twin):
    doc = small_twin[0].to_dict()
    del doc["dtc"]["params"]["dense0.W"]
    with pytest.raises(TwinError):
        twin.TwinCheckpoint.from_dict(doc)


def test_detect_rejects_foreign_schema(small_twin):
    ckpt = small_twin[0]
    from vesseltwin.dataset import column_schema
    cols = column_schema("remus100")
    traj = LabeledTrajectory("remus100", cols, np.zeros((50, len(cols))))
    with pytest.raises(TwinError, match="schema"):
        twin.detect(ckpt, traj)


def test_fit_twin_rejects_disturbed_training_run():
    traj = mariner_runs(1)[0]
    traj.interval = (10, 20)
    with pytest.raises(TwinError, match="disturbance-free"):
        twin.fit_twin([traj], TINY_DTM, TINY_AE, 5, 5, 8)


def test_fit_twin_is_deterministic():
    trajs = mariner_runs(2, duration=120, start=40)
    a, _ = twin.fit_twin(trajs, TINY_DTM, TINY_AE, 5, 5, 8)
    b, _ = twin.fit_twin(trajs, TINY_DTM, TINY_AE, 5, 5, 8)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_mean_aggregation_flag():
    errs = np.array([[1.0, 3.0], [2.0, 2.0]])
    assert twin.aggregate(errs, "max").tolist() == [3.0, 2.0]
    assert twin.aggregate(errs, "mean").tolist() == [2.0, 2.0]
    with pytest.raises(TwinError):
        twin.aggregate(errs, "median")


def test_unknown_variant_rejected(small_twin):
    ckpt, _, trajs = small_twin
    win = make_windows(trajs[0], 5, 5, ckpt.scaler)
    with pytest.raises(TwinError):
        twin.score_windows(ckpt, win, "dtm-x")
