import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vesseltwin.dataset import (
    DatasetError,
    DatasetSplit,
    ScalerParams,
    Windows,
    assemble_split,
    column_schema,
    fit_scaler,
    load_trajectory,
    make_windows,
    read_csv,
    window_labels,
    write_csv,
    write_sidecar,
)
from vesseltwin.scenario import LabeledTrajectory


def synthetic(vessel="mariner", length=50, interval=None, seed=0):
    cols = column_schema(vessel)
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(length, len(cols)))
    data[:, 0] = np.arange(length, dtype=float)
    return LabeledTrajectory(vessel, cols, data, interval)


# -- schema and CSV ----------------------------------------------------------

def test_mariner_schema():
    assert column_schema("mariner") == ["time_s", "surge_velocity", "sway_velocity",
                                        "yaw_rate", "yaw_angle", "rudder_angle"]


def test_current_capable_schema_ends_with_environment():
    assert column_schema("remus100")[-1] == "ocean_current_speed"


def test_csv_round_trip_is_exact(tmp_path):
    traj = synthetic()
    traj.data[3, 2] = 1 / 3
    path = tmp_path / "t.csv"
    write_csv(traj, path)
    back = read_csv(path, "mariner")
    assert back.columns == traj.columns
    assert back.data.tobytes() == traj.data.tobytes()


def test_csv_header_is_stable(tmp_path):
    for seed in range(3):
        path = tmp_path / f"{seed}.csv"
        write_csv(synthetic(seed=seed), path)
        assert path.read_text().splitlines()[0] == ",".join(column_schema("mariner"))


def test_short_row_reports_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    write_csv(synthetic(length=5), path)
    lines = path.read_text().splitlines()
    lines[3] = ",".join(lines[3].split(",")[:5])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="row 4"):
        read_csv(path, "mariner")


def test_non_numeric_cell_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    write_csv(synthetic(length=5), path)
    text = path.read_text().splitlines()
    cells = text[2].split(",")
    cells[1] = "fast"
    text[2] = ",".join(cells)
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(DatasetError, match="row 3"):
        read_csv(path, "mariner")


def test_non_uniform_timestamps_rejected(tmp_path):
    traj = synthetic(length=5)
    traj.data[4, 0] = 7.0
    path = tmp_path / "gap.csv"
    write_csv(traj, path)
    with pytest.raises(DatasetError, match="1 s spacing"):
        read_csv(path, "mariner")


def test_header_mismatch_rejected(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(synthetic(), path)
    with pytest.raises(DatasetError, match="header"):
        read_csv(path, "remus100")


def test_write_rejects_wrong_columns(tmp_path):
    traj = synthetic()
    traj.columns = traj.columns[::-1]
    with pytest.raises(DatasetError):
        write_csv(traj, tmp_path / "x.csv")


def test_load_trajectory_uses_sidecar(tmp_path):
    traj = synthetic(interval=(10, 20))
    write_csv(traj, tmp_path / "a.csv")
    write_sidecar(tmp_path / "a.json", {"vessel": "mariner", "seed": 4}, (10, 20))
    back, meta = load_trajectory(tmp_path / "a.csv")
    assert back.interval == (10, 20)
    assert meta["seed"] == 4


# -- scaling -----------------------------------------------------------------

def test_scaler_example():
    s = fit_scaler(np.array([[0.0], [5.0], [10.0]]))
    assert s.apply(np.array([[0.0], [5.0], [10.0]])).ravel().tolist() == [0.0, 0.5, 1.0]


def test_constant_column_maps_to_half():
    s = fit_scaler(np.array([[3.0, 0.0], [3.0, 1.0]]))
    scaled = s.apply(np.array([[3.0, 0.5]]))
    assert scaled[0, 0] == 0.5
    assert s.invert(scaled)[0, 0] == 3.0


def test_no_clamping_outside_training_range():
    s = fit_scaler(np.array([[0.0], [1.0]]))
    assert s.apply(np.array([[2.0]]))[0, 0] == 2.0


def test_fit_scaler_rejects_too_few_rows():
    with pytest.raises(DatasetError):
        fit_scaler(np.empty((0, 3)))
    with pytest.raises(DatasetError):
        fit_scaler([])


def test_scaler_dict_round_trip():
    s = fit_scaler(np.random.default_rng(0).normal(size=(10, 4)))
    back = ScalerParams.from_dict(json.loads(json.dumps(s.to_dict())))
    assert np.array_equal(back.minimum, s.minimum) and np.array_equal(back.maximum, s.maximum)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 5)), elements=finite))
def test_scaling_bounds_and_inversion(rows):
    s = fit_scaler(rows)
    scaled = s.apply(rows)
    assert np.all(scaled >= 0.0) and np.all(scaled <= 1.0)
    varying = s.maximum > s.minimum
    back = s.invert(scaled)
    scale = np.maximum(1.0, np.abs(rows))
    assert np.all(np.abs(back - rows)[:, varying] <= 1e-12 * scale[:, varying])


# -- windows -----------------------------------------------------------------

def test_window_count_example():
    w = make_windows(synthetic(length=10), 3, 2)
    assert len(w) == 6
    assert w.inputs.shape == (6, 3, 5)
    assert w.targets.shape == (6, 2, 4)
    assert w.future_inputs.shape == (6, 2, 1)


def test_minimal_window():
    assert len(make_windows(synthetic(length=2), 1, 1)) == 1


def test_too_short_trajectory_rejected():
    with pytest.raises(DatasetError, match="shorter"):
        make_windows(synthetic(length=4), 3, 2)


def test_window_contents_are_contiguous_rows():
    traj = synthetic(length=12)
    w = make_windows(traj, 4, 3)
    i = 2
    t = w.anchors[i]
    assert np.array_equal(w.inputs[i], traj.data[t - 3:t + 1, 1:])
    assert np.array_equal(w.targets[i], traj.data[t + 1:t + 4, 1:5])
    assert np.array_equal(w.future_inputs[i], traj.data[t + 1:t + 4, 5:])


def test_predictive_label_example():
    anchors = np.arange(0, 700)
    labels = window_labels(anchors, (300, 420), 60)
    assert anchors[labels == 1].tolist() == list(range(240, 420))


def test_current_time_labels():
    anchors = np.arange(0, 700)
    labels = window_labels(anchors, (300, 420), 60, predictive=False)
    assert anchors[labels == 1].tolist() == list(range(300, 420))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(1, 10), st.integers(1, 10))
def test_window_count_property(L, W, H):
    traj = synthetic(length=L)
    if L < W + H:
        with pytest.raises(DatasetError):
            make_windows(traj, W, H)
    else:
        assert len(make_windows(traj, W, H)) == L - W - H + 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 80), st.integers(1, 40), st.integers(1, 15))
def test_label_soundness(start, duration, H):
    L = 140
    traj = synthetic(length=L, interval=(start, start + duration))
    w = make_windows(traj, 5, H)
    for t, label in zip(w.anchors, w.labels):
        # continuous horizon (t, t + H] against [start, end)
        hit = t < start + duration and t + H >= start
        assert label == int(hit)


def test_windows_subset_and_concat():
    a = make_windows(synthetic(length=20), 3, 2)
    b = make_windows(synthetic(length=20, seed=1), 3, 2)
    both = Windows.concat([a, b])
    assert len(both) == len(a) + len(b)
    assert np.array_equal(both.subset(slice(len(a), None)).inputs, b.inputs)


# -- splits ------------------------------------------------------------------

def _meta(n_clean, n_dist):
    meta = {f"run{i:02d}.csv": {"seed": i, "disturbance_interval": None}
            for i in range(n_clean)}
    meta.update({f"run{n_clean + i:02d}.csv": {"seed": 100 + i, "disturbance_interval": [0, 10]}
                 for i in range(n_dist)})
    return meta


def test_split_20_10():
    split = assemble_split("mariner", _meta(30, 0), 20, 10)
    assert len(split.train) == 20 and len(split.test) == 10
    assert not set(split.train) & set(split.test)


def test_disturbed_training_run_rejected():
    meta = _meta(5, 2)
    with pytest.raises(DatasetError, match="disturbed"):
        assemble_split("mariner", meta, 2, train=["run00.csv", "run06.csv"])


def test_split_is_deterministic():
    meta = _meta(10, 5)
    a = assemble_split("mariner", meta, 6).to_manifest(meta)
    b = assemble_split("mariner", meta, 6).to_manifest(meta)
    assert a == b
    assert all(e["disturbance_interval"] is None for e in a["train"])


def test_not_enough_clean_runs():
    with pytest.raises(DatasetError):
        assemble_split("mariner", _meta(2, 5), 3)


def test_manifest_lists_seeds():
    meta = _meta(3, 1)
    m = DatasetSplit("mariner", ["run00.csv"], ["run03.csv"]).to_manifest(meta)
    assert m["test"][0]["seed"] == 100 and m["test"][0]["disturbance_interval"] == [0, 10]
