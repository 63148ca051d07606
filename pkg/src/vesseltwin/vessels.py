"""Reduced-order maneuvering models for the five vessel presets.

Every preset shares one dynamics core:

* first-order surge toward ``surge_gain * propeller``,
* Nomoto yaw ``r' = (K * rudder - r) / T`` with sway slaved to yaw rate,
* a second-order roll mode driven by the rudder (4 and 6 DoF),
* first-order pitch toward ``pitch_gain * stern_plane`` with heave slaved to
  pitch rate (6 DoF),
* flat-earth kinematics with the ocean current added to the position rates.

Coefficients live in ``data/presets.json``; they are surrogate values scaled
from vessel length and mass, not identified hull data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources

SUBSTEP = 0.01

PRESET_NAMES = ("mariner", "container", "remus100", "nps_auv", "otter")

_TWO_PI = 2.0 * math.pi


class UnknownPresetError(ValueError):
    pass


class NonFiniteStateError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap ``a`` into (-pi, pi]."""
    w = a - _TWO_PI * math.floor((a + math.pi) / _TWO_PI)
    if w <= -math.pi:
        w += _TWO_PI
    return w


@dataclass(frozen=True)
class VesselParams:
    name: str
    dof: int
    length: float
    mass: float
    controls: tuple[str, ...]
    maneuvers: tuple[str, ...]
    supports_current: bool
    nominal_rpm: float
    surge_gain: float
    surge_time_constant: float
    nomoto_gain: float
    nomoto_time_constant: float
    sway_coupling: float
    max_rudder: float
    max_rudder_rate: float
    propeller_range: tuple[float, float]
    heading_kp: float
    heading_kd: float
    roll_natural_frequency: float = 1.0
    roll_damping_ratio: float = 1.0
    roll_gain: float = 0.0
    pitch_gain: float = 0.0
    pitch_time_constant: float = 1.0
    heave_gain: float = 0.0
    thrust_mixing: float = 0.0
    depth_kp: float = 0.0
    max_pitch_command: float = 0.0
    waypoints: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dof not in (3, 4, 6):
            raise ValueError(f"dof must be 3, 4 or 6, got {self.dof}")
        for name in ("surge_time_constant", "nomoto_time_constant", "pitch_time_constant",
                     "roll_natural_frequency", "max_rudder", "max_rudder_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.propeller_range
        if not hi > lo:
            raise ValueError("propeller_range must be increasing")

    @property
    def twin_thrust(self) -> bool:
        return "left_propeller" in self.controls

    @property
    def has_depth(self) -> bool:
        return "stern_plane" in self.controls


@dataclass(frozen=True)
class VesselState:
    time: float = 0.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0
    u: float = 0.0
    v: float = 0.0
    w: float = 0.0
    p: float = 0.0
    q: float = 0.0
    r: float = 0.0

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class ControlInput:
    """Actuator commands. Channels a preset does not have stay ``None``."""

    rudder: float | None = None
    stern_plane: float | None = None
    bow_port: float | None = None
    bow_starboard: float | None = None
    propeller: float | None = None
    left_propeller: float | None = None
    right_propeller: float | None = None

    def channel(self, name: str) -> float:
        value = getattr(self, name)
        return 0.0 if value is None else value


@dataclass(frozen=True)
class EnvCondition:
    current_speed: float = 0.0
    current_direction: float = 0.0

    def __post_init__(self):
        if not self.current_speed >= 0:
            raise ValueError("current_speed must be >= 0")


@lru_cache(maxsize=None)
def _preset_table() -> dict:
    text = resources.files("vesseltwin").joinpath("data/presets.json").read_text()
    return json.loads(text)


def make_preset(name: str) -> VesselParams:
    table = _preset_table()["presets"]
    if name not in table:
        raise UnknownPresetError(
            f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    raw = dict(table[name])
    raw["controls"] = tuple(raw["controls"])
    raw["maneuvers"] = tuple(raw["maneuvers"])
    raw["propeller_range"] = tuple(raw["propeller_range"])
    return VesselParams(name=name, **raw)


_FINS = ("rudder", "stern_plane", "bow_port", "bow_starboard")


def _clamp(value: float, lo: float, hi: float) -> float:
    return lo if value < lo else hi if value > hi else value


def saturate(control: ControlInput, prev: ControlInput, params: VesselParams,
             dt: float) -> ControlInput:
    """Clamp every channel to the preset limits and rate-limit fin angles."""
    max_step = params.max_rudder_rate * dt
    out = {}
    for name in _FINS:
        value = getattr(control, name)
        if value is None:
            continue
        value = _clamp(value, -params.max_rudder, params.max_rudder)
        before = getattr(prev, name)
        if before is not None:
            value = _clamp(value, before - max_step, before + max_step)
        out[name] = value
    lo, hi = params.propeller_range
    for name in ("propeller", "left_propeller", "right_propeller"):
        value = getattr(control, name)
        if value is not None:
            out[name] = _clamp(value, lo, hi)
    return replace(control, **out)


def effective_inputs(params: VesselParams, control: ControlInput) -> tuple[float, float, float]:
    """Map a preset's control channels to (rudder, pitch plane, propeller)."""
    if params.twin_thrust:
        left = control.channel("left_propeller")
        right = control.channel("right_propeller")
        return params.thrust_mixing * (left - right), 0.0, 0.5 * (left + right)
    rudder = control.channel("rudder")
    plane = control.channel("stern_plane")
    if control.bow_port is not None or control.bow_starboard is not None:
        # bow planes pitch the hull opposite to the stern plane
        plane -= 0.5 * (control.channel("bow_port") + control.channel("bow_starboard"))
    if control.propeller is None:
        rpm = params.nominal_rpm
    else:
        rpm = control.propeller
    return rudder, plane, rpm


def _check_finite(values, what: str):
    for v in values:
        if not math.isfinite(v):
            raise NonFiniteStateError(f"non-finite value in {what}")


class _Integrator:
    """Fixed-step RK4 over the reduced state (x, y, z, phi, theta, psi, u, p, r)."""

    def __init__(self, params: VesselParams, rudder: float, plane: float, rpm: float,
                 env: EnvCondition):
        self.ku = params.surge_gain * rpm
        self.tu = params.surge_time_constant
        self.kr = params.nomoto_gain * rudder
        self.tr = params.nomoto_time_constant
        self.cv = params.sway_coupling
        self.roll = params.dof >= 4
        self.wn2 = params.roll_natural_frequency ** 2
        self.c2 = 2.0 * params.roll_damping_ratio * params.roll_natural_frequency
        self.kp = params.roll_gain * rudder
        self.pitch = params.dof == 6
        self.theta_ss = params.pitch_gain * plane
        self.tq = params.pitch_time_constant
        self.cw = params.heave_gain
        self.cx = env.current_speed * math.cos(env.current_direction)
        self.cy = env.current_speed * math.sin(env.current_direction)

    def deriv(self, s):
        x, y, z, phi, theta, psi, u, p, r = s
        v = self.cv * r
        c, sn = math.cos(psi), math.sin(psi)
        dx = u * c - v * sn + self.cx
        dy = u * sn + v * c + self.cy
        du = (self.ku - u) / self.tu
        dr = (self.kr - r) / self.tr
        if self.roll:
            dphi = p
            dp = self.kp - self.c2 * p - self.wn2 * phi
        else:
            dphi = dp = 0.0
        if self.pitch:
            q = (self.theta_ss - theta) / self.tq
            w = self.cw * q
            dz = -u * math.sin(theta) + w * math.cos(theta)
        else:
            q = dz = 0.0
        return (dx, dy, dz, dphi, q, r, du, dp, dr)

    def run(self, s, dt: float):
        n = max(1, int(math.ceil(dt / SUBSTEP - 1e-9)))
        h = dt / n
        half = 0.5 * h
        sixth = h / 6.0
        f = self.deriv
        for _ in range(n):
            k1 = f(s)
            k2 = f(tuple(a + half * b for a, b in zip(s, k1)))
            k3 = f(tuple(a + half * b for a, b in zip(s, k2)))
            k4 = f(tuple(a + h * b for a, b in zip(s, k3)))
            s = tuple(a + sixth * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                      for a, b1, b2, b3, b4 in zip(s, k1, k2, k3, k4))
        return s


def step(params: VesselParams, state: VesselState, control: ControlInput,
         env: EnvCondition, dt: float) -> VesselState:
    """Advance ``state`` by ``dt`` seconds under constant ``control`` and ``env``.

    Integration uses RK4 substeps no longer than ``SUBSTEP``. The control is
    expected to be saturated already.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if env.current_speed and not params.supports_current:
        raise ValueError(f"preset {params.name!r} does not support ocean current")
    _check_finite(state.as_tuple(), "state")
    _check_finite((v for v in (getattr(control, f.name) for f in fields(control))
                   if v is not None), "control")
    _check_finite((env.current_speed, env.current_direction), "environment")

    rudder, plane, rpm = effective_inputs(params, control)
    integ = _Integrator(params, rudder, plane, rpm, env)
    s0 = (state.x, state.y, state.z, state.phi, state.theta, state.psi,
          state.u, state.p, state.r)
    x, y, z, phi, theta, psi, u, p, r = integ.run(s0, dt)
    _check_finite((x, y, z, phi, theta, psi, u, p, r), "integrated state")

    v = params.sway_coupling * r
    if params.dof == 6:
        q = (integ.theta_ss - theta) / integ.tq
        w = params.heave_gain * q
    else:
        q = w = 0.0
    if params.dof < 4:
        phi = p = 0.0
    return VesselState(
        time=state.time + dt, x=x, y=y, z=z,
        phi=wrap_angle(phi), theta=wrap_angle(theta), psi=wrap_angle(psi),
        u=u, v=v, w=w, p=p, q=q, r=r,
    )
