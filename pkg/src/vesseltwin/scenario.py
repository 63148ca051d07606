"""Maneuver controllers, disturbance injection and the scenario runner."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import vessels
from .vessels import ControlInput, EnvCondition, VesselParams, VesselState, wrap_angle

REJECTION_BUDGET = 10_000
DEFAULT_DISTURBANCE_DURATION = 120
DISTURBANCE_KINDS = ("sensor_noise", "actuator_extreme", "current_spike")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ZigzagSpec:
    delta: float  # deg
    psi: float  # deg
    duration: int = 600
    propeller: float | None = None

    def __post_init__(self):
        if not (self.delta > 0 and self.psi > 0 and self.duration > 0):
            raise ScenarioError("zigzag delta, psi and duration must be positive")


@dataclass(frozen=True)
class WaypointSpec:
    n_waypoints: int
    r_switch: float
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float] | None = None
    min_distance: float | None = None
    propeller: float | None = None

    def __post_init__(self):
        if self.n_waypoints < 2:
            raise ScenarioError("need at least 2 waypoints")
        if not self.r_switch > 0:
            raise ScenarioError("r_switch must be positive")
        if self.min_distance is not None and not self.min_distance > 2 * self.r_switch:
            raise ScenarioError("min_distance must exceed 2 * r_switch")
        for rng in (self.x_range, self.y_range, self.z_range):
            if rng is not None and not rng[1] > rng[0]:
                raise ScenarioError(f"degenerate range {rng}")


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str
    magnitude: float  # sigma [m] | extreme rudder [deg] | high current [m/s]
    start: int | str = "random"
    duration: int = DEFAULT_DISTURBANCE_DURATION
    additive: bool = False  # actuator_extreme only: base delta + magnitude (non-canonical)

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ScenarioError(f"unknown disturbance kind {self.kind!r}")
        if not self.duration > 0:
            raise ScenarioError("disturbance duration must be positive")
        if self.kind == "current_spike":
            if not self.magnitude >= 0:
                raise ScenarioError("current magnitude must be >= 0")
        elif not self.magnitude > 0:
            raise ScenarioError(f"{self.kind} magnitude must be positive")
        if self.start != "random" and not (isinstance(self.start, int) and self.start >= 0):
            raise ScenarioError("start must be a non-negative integer or 'random'")


@dataclass(frozen=True)
class ScenarioSpec:
    vessel: str
    maneuver: ZigzagSpec | WaypointSpec
    seed: int
    duration: int
    env: EnvCondition = field(default_factory=EnvCondition)
    disturbance: DisturbanceSpec | None = None
    horizon_margin: int = 30

    def to_dict(self) -> dict:
        out = asdict(self)
        out["maneuver_type"] = "zigzag" if isinstance(self.maneuver, ZigzagSpec) else "waypoint"
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        kind = d.pop("maneuver_type")
        m = dict(d["maneuver"])
        if kind == "zigzag":
            maneuver = ZigzagSpec(**m)
        else:
            for key in ("x_range", "y_range", "z_range"):
                if m.get(key) is not None:
                    m[key] = tuple(m[key])
            maneuver = WaypointSpec(**m)
        dist = d.get("disturbance")
        return cls(
            vessel=d["vessel"], maneuver=maneuver, seed=int(d["seed"]),
            duration=int(d["duration"]), env=EnvCondition(**d.get("env", {})),
            disturbance=DisturbanceSpec(**dist) if dist else None,
            horizon_margin=int(d.get("horizon_margin", 30)),
        )


@dataclass
class LabeledTrajectory:
    """Rows sampled at 1 Hz; ``data[:, 0]`` is time."""

    vessel: str
    columns: list[str]
    data: np.ndarray
    interval: tuple[int, int] | None = None

    def __len__(self):
        return len(self.data)

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]


# -- controllers -----------------------------------------------------------

@dataclass
class ZigzagMemory:
    initial_course: float
    sign: float = 1.0


def zigzag_controller(state: VesselState, spec: ZigzagSpec, memory: ZigzagMemory,
                      delta: float | None = None) -> float:
    """Rudder command [rad]; flips sign when the heading deviation reaches psi.

    ``delta`` overrides the rudder magnitude (deg) without touching the
    switching rule.
    """
    deviation = wrap_angle(state.psi - memory.initial_course)
    trigger = math.radians(spec.psi)
    if memory.sign > 0 and deviation >= trigger:
        memory.sign = -1.0
    elif memory.sign < 0 and deviation <= -trigger:
        memory.sign = 1.0
    return memory.sign * math.radians(spec.delta if delta is None else delta)


def _sample_range(rng: np.random.Generator, r: tuple[float, float]) -> float:
    return float(rng.uniform(r[0], r[1]))


def generate_waypoints(spec: WaypointSpec, rng: np.random.Generator) -> list[tuple[float, ...]]:
    ranges = [spec.x_range, spec.y_range] + ([spec.z_range] if spec.z_range else [])
    points: list[tuple[float, ...]] = []
    for i in range(spec.n_waypoints):
        for _ in range(REJECTION_BUDGET):
            cand = tuple(_sample_range(rng, r) for r in ranges)
            if (i == 0 or spec.min_distance is None
                    or math.dist(cand[:2], points[-1][:2]) >= spec.min_distance):
                points.append(cand)
                break
        else:
            raise ScenarioError(
                f"could not place waypoint {i} within {REJECTION_BUDGET} attempts; "
                "widen the ranges or lower min_distance")
    return points


HOLD_LOOKAHEAD = 4.0


def los_guidance(position: Sequence[float], waypoints: Sequence[Sequence[float]],
                 active: int, r_switch: float, hold_course: float = 0.0
                 ) -> tuple[float, float | None, int]:
    """Heading (and depth) command toward the active waypoint.

    Returns ``(heading, depth, active)``. The active index advances while the
    horizontal distance to the active waypoint is within ``r_switch``; once
    past the last waypoint the index equals ``len(waypoints)`` and the vessel
    holds the course of the final leg, correcting cross-track drift with a
    lookahead of ``HOLD_LOOKAHEAD * r_switch``. With a single waypoint there
    is no leg and ``hold_course`` is returned.
    """
    while active < len(waypoints):
        wp = waypoints[active]
        if math.dist(position[:2], wp[:2]) <= r_switch:
            active += 1
        else:
            break
    if active >= len(waypoints):
        last = waypoints[-1]
        depth = last[2] if len(last) > 2 else None
        if len(waypoints) < 2:
            return hold_course, depth, len(waypoints)
        prev = waypoints[-2]
        course = math.atan2(last[1] - prev[1], last[0] - prev[0])
        # signed cross-track offset, positive to the left of the leg
        cross = (-(position[0] - last[0]) * math.sin(course)
                 + (position[1] - last[1]) * math.cos(course))
        heading = course - math.atan2(cross, HOLD_LOOKAHEAD * r_switch)
        return wrap_angle(heading), depth, len(waypoints)
    wp = waypoints[active]
    heading = math.atan2(wp[1] - position[1], wp[0] - position[0])
    return heading, (wp[2] if len(wp) > 2 else None), active


def heading_autopilot(params: VesselParams, state: VesselState, heading_cmd: float) -> float:
    """PD heading autopilot; yaw-rate feedback damps the sluggish hulls."""
    err = wrap_angle(heading_cmd - state.psi)
    return params.heading_kp * err - params.heading_kd * state.r


def depth_autopilot(params: VesselParams, state: VesselState, depth_cmd: float) -> float:
    """Stern-plane angle that steers pitch toward a depth-proportional command."""
    theta_cmd = -params.depth_kp * (depth_cmd - state.z)
    lim = params.max_pitch_command
    theta_cmd = min(max(theta_cmd, -lim), lim)
    return theta_cmd / params.pitch_gain


def inject_sensor_noise(true_position: Sequence[float], sigma: float,
                        rng: np.random.Generator) -> tuple[float, ...]:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return tuple(true_position)
    draws = rng.standard_normal(len(true_position))
    return tuple(float(x + sigma * d) for x, d in zip(true_position, draws))


# -- runner ----------------------------------------------------------------

def _compose_control(params: VesselParams, rudder: float, plane: float | None,
                     propeller: float) -> ControlInput:
    if params.twin_thrust:
        diff = rudder / params.thrust_mixing
        return ControlInput(left_propeller=propeller + 0.5 * diff,
                            right_propeller=propeller - 0.5 * diff)
    kw = {"rudder": rudder}
    plane = plane or 0.0
    if "bow_port" in params.controls:
        # bow planes share the pitch demand with the stern plane, opposite sign
        kw["stern_plane"] = 0.5 * plane
        kw["bow_port"] = kw["bow_starboard"] = -0.5 * plane
    elif "stern_plane" in params.controls:
        kw["stern_plane"] = plane
    if "propeller" in params.controls:
        kw["propeller"] = propeller
    return ControlInput(**kw)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


def validate_spec(spec: ScenarioSpec, params: VesselParams) -> None:
    is_zigzag = isinstance(spec.maneuver, ZigzagSpec)
    maneuver = "zigzag" if is_zigzag else "waypoint"
    if maneuver not in params.maneuvers:
        raise ScenarioError(f"preset {params.name!r} does not support {maneuver} maneuvers")
    if spec.env.current_speed and not params.supports_current:
        raise ScenarioError(f"preset {params.name!r} does not support ocean current")
    if not is_zigzag and params.has_depth and spec.maneuver.z_range is None:
        raise ScenarioError(f"preset {params.name!r} needs a z_range for 3D waypoints")
    d = spec.disturbance
    if d is not None:
        if d.kind == "actuator_extreme" and not is_zigzag:
            raise ScenarioError("actuator_extreme requires a zigzag maneuver")
        if d.kind == "sensor_noise" and is_zigzag:
            raise ScenarioError("sensor_noise requires a waypoint maneuver")
        if d.kind == "current_spike" and not params.supports_current:
            raise ScenarioError(
                f"current_spike requires ocean-current support; {params.name!r} has none")
        if d.start != "random" and d.start + d.duration > spec.duration:
            raise ScenarioError("disturbance window exceeds scenario duration")
        if d.start == "random" and spec.duration - d.duration - spec.horizon_margin < 0:
            raise ScenarioError("scenario too short for a random disturbance window")


def disturbance_window(spec: ScenarioSpec) -> tuple[int, int] | None:
    d = spec.disturbance
    if d is None:
        return None
    if d.start == "random":
        hi = spec.duration - d.duration - spec.horizon_margin
        start = int(_rng(spec.seed, 1).integers(0, hi + 1))
    else:
        start = int(d.start)
    return start, start + d.duration


def initial_state(params: VesselParams, spec: ScenarioSpec,
                  waypoints: list | None) -> VesselState:
    rpm = spec.maneuver.propeller or params.nominal_rpm
    u0 = params.surge_gain * rpm
    if waypoints is None:
        z0 = 20.0 if params.has_depth else 0.0
        return VesselState(u=u0, z=z0)
    first, second = waypoints[0], waypoints[1]
    psi0 = math.atan2(second[1] - first[1], second[0] - first[0])
    z0 = first[2] if len(first) > 2 and params.has_depth else 0.0
    return VesselState(x=first[0], y=first[1], z=z0, psi=psi0, u=u0)


def run_scenario(spec: ScenarioSpec) -> LabeledTrajectory:
    """Simulate ``spec`` and record one row per second."""
    from .dataset import column_schema, row_values

    params = vessels.make_preset(spec.vessel)
    validate_spec(spec, params)
    window = disturbance_window(spec)
    dist = spec.disturbance
    noise_rng = _rng(spec.seed, 2)
    is_zigzag = isinstance(spec.maneuver, ZigzagSpec)
    waypoints = None if is_zigzag else generate_waypoints(spec.maneuver, _rng(spec.seed, 0))
    state = initial_state(params, spec, waypoints)
    propeller = spec.maneuver.propeller or params.nominal_rpm

    zz_memory = ZigzagMemory(initial_course=state.psi)
    active = 1
    hold = state.psi
    depth_hold = state.z
    prev = _compose_control(params, 0.0, 0.0, propeller)

    columns = column_schema(params)
    rows = np.empty((spec.duration, len(columns)))
    for k in range(spec.duration):
        in_window = window is not None and window[0] <= k < window[1]
        env = spec.env
        if in_window and dist.kind == "current_spike":
            env = EnvCondition(dist.magnitude, spec.env.current_direction)

        depth_cmd = depth_hold
        if is_zigzag:
            delta = None
            if in_window and dist.kind == "actuator_extreme":
                delta = spec.maneuver.delta + dist.magnitude if dist.additive else dist.magnitude
            rudder = zigzag_controller(state, spec.maneuver, zz_memory, delta)
        else:
            position = (state.x, state.y, state.z)
            if in_window and dist.kind == "sensor_noise":
                n_axes = 3 if params.has_depth else 2
                noisy = inject_sensor_noise(position[:n_axes], dist.magnitude, noise_rng)
                position = noisy + position[n_axes:]
            heading, depth, active = los_guidance(
                position, waypoints, active, spec.maneuver.r_switch, hold)
            if active < len(waypoints):
                hold = heading
            if depth is not None:
                depth_cmd = depth
            rudder = heading_autopilot(params, state, heading)
        plane = depth_autopilot(params, state, depth_cmd) if params.has_depth else None
        control = vessels.saturate(_compose_control(params, rudder, plane, propeller),
                                   prev, params, 1.0)
        rows[k] = row_values(params, state, control, env)
        state = vessels.step(params, state, control, env, 1.0)
        prev = control
    return LabeledTrajectory(vessel=spec.vessel, columns=columns, data=rows, interval=window)
