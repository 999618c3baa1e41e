"""Lumped first-order thermal model of the device package.

The package temperature follows Newton cooling driven by an activity heat
rate::

    dT/dt = P - k * (T - T_amb)

where ``P`` is the sum of the plain I/O heat rate (scaled by how busy the
device is) and the (de)compression engine heat rate (scaled by the fraction
of nominal engine throughput delivered).  Heat rates are expressed in °C/s so
that ``T_amb + P / k`` is directly the asymptotic temperature.

The update is closed form, so the result does not depend on the step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Tuple, Union

from scipy.optimize import brentq

__all__ = [
    "ThermalParams",
    "ThermalState",
    "CalibrationError",
    "step",
    "heat_rate",
    "asymptote",
    "time_to_reach",
    "throttled_run_time",
    "calibrate",
    "replay_anchors",
    "DEFAULT_ANCHORS",
]

DEFAULT_IO_TIME_CONSTANT = 300.0


class CalibrationError(ValueError):
    """Raised when an anchor set cannot be fit by the cooling model."""


@dataclass(frozen=True)
class ThermalParams:
    ambient_temp: float = 23.0
    cooling_coeff: float = 1.0 / DEFAULT_IO_TIME_CONSTANT
    power_io: float = 37.0 / DEFAULT_IO_TIME_CONSTANT
    # roughly what calibrate() yields for the default anchors
    power_engine: float = 280.8 / DEFAULT_IO_TIME_CONSTANT
    power_idle: float = 0.0

    def __post_init__(self) -> None:
        for name in ("ambient_temp", "cooling_coeff", "power_io", "power_engine", "power_idle"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.cooling_coeff <= 0:
            raise ValueError("cooling_coeff must be > 0")
        if not (self.power_engine > self.power_io >= self.power_idle >= 0):
            raise ValueError("need power_engine > power_io >= power_idle >= 0")

    def to_dict(self) -> dict:
        return {
            "ambient_temp": self.ambient_temp,
            "cooling_coeff": self.cooling_coeff,
            "power_io": self.power_io,
            "power_engine": self.power_engine,
            "power_idle": self.power_idle,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ThermalParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class ThermalState:
    temp: float
    time: float = 0.0


def heat_rate(params: ThermalParams, busy: float = 0.0, engine: float = 0.0) -> float:
    """Heat rate for a device that is ``busy`` (0..1) with the engine at ``engine`` of nominal."""
    busy = min(max(busy, 0.0), 1.0)
    engine = min(max(engine, 0.0), 1.0)
    return params.power_idle + (params.power_io - params.power_idle) * busy + params.power_engine * engine


def asymptote(params: ThermalParams, active_power: float) -> float:
    return params.ambient_temp + active_power / params.cooling_coeff


def step(state: ThermalState, params: ThermalParams, active_power: float, dt: float) -> ThermalState:
    """Advance the temperature by ``dt`` seconds under constant ``active_power``."""
    if not (math.isfinite(state.temp) and math.isfinite(active_power) and math.isfinite(dt)):
        raise ValueError("non-finite thermal input")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    target = asymptote(params, active_power)
    decay = math.exp(-params.cooling_coeff * dt)
    return ThermalState(temp=target + (state.temp - target) * decay, time=state.time + dt)


def time_to_reach(t0: float, target: float, params: ThermalParams, active_power: float) -> float:
    """Seconds to go from ``t0`` to ``target`` under constant power; ``inf`` if never."""
    a = asymptote(params, active_power)
    if target == t0:
        return 0.0
    # target must lie strictly between t0 and the asymptote
    if (t0 < target < a) or (a < target < t0):
        return math.log((a - t0) / (a - target)) / params.cooling_coeff
    return math.inf


def throttled_run_time(
    params: ThermalParams,
    throttle_temp: float,
    emergency_temp: float,
    throttled_fraction: float,
    start_temp: float | None = None,
) -> Tuple[float, float]:
    """(time to throttle, time to emergency) for a saturated compression run."""
    t0 = params.ambient_temp if start_temp is None else start_temp
    full = heat_rate(params, busy=1.0, engine=1.0)
    slow = heat_rate(params, busy=1.0, engine=throttled_fraction)
    t1 = time_to_reach(t0, throttle_temp, params, full) if t0 < throttle_temp else 0.0
    t2 = time_to_reach(max(t0, throttle_temp), emergency_temp, params, slow)
    return t1, t1 + t2


AnchorSet = Union[Mapping[str, float], Iterable[Tuple[str, float]]]

DEFAULT_ANCHORS: Mapping[str, float] = {
    "idle": 23.0,
    "io_asymptote": 60.0,
    "emergency_time": 582.0,
}


def calibrate(
    anchors: AnchorSet = DEFAULT_ANCHORS,
    throttle_temp: float = 76.0,
    emergency_temp: float = 86.0,
    throttled_fraction: float = 0.1,
) -> ThermalParams:
    """Fit :class:`ThermalParams` to anchor behaviours.

    Recognised anchors:

    ``idle``
        temperature of an idle device (becomes the ambient temperature)
    ``io_asymptote``
        plateau temperature under saturated plain I/O
    ``emergency_time``
        seconds from ambient to ``emergency_temp`` under a saturated
        compressing workload, with the engine throttled above ``throttle_temp``
    ``io_time_constant`` (optional)
        1 / cooling coefficient in seconds; defaults to 300 s
    ``throttle_time`` (optional)
        seconds from ambient to ``throttle_temp``; replaces ``io_time_constant``
    """
    a = dict(anchors.items() if isinstance(anchors, Mapping) else anchors)
    missing = [name for name in ("idle", "io_asymptote", "emergency_time") if name not in a]
    if missing:
        raise CalibrationError(f"under-determined anchor set, missing: {', '.join(missing)}")
    if "io_time_constant" in a and "throttle_time" in a:
        raise CalibrationError("over-determined: give io_time_constant or throttle_time, not both")
    if not 0 < throttled_fraction < 1:
        raise CalibrationError("throttled_fraction must be in (0, 1)")

    ambient = float(a["idle"])
    io_rise = float(a["io_asymptote"]) - ambient
    t_emerg = float(a["emergency_time"])
    if io_rise <= 0:
        raise CalibrationError("io_asymptote must lie above the idle (ambient) temperature")
    if not ambient < throttle_temp < emergency_temp:
        raise CalibrationError("need idle < throttle_temp < emergency_temp")
    if ambient + io_rise >= throttle_temp:
        raise CalibrationError("io_asymptote must lie below throttle_temp")
    if t_emerg <= 0:
        raise CalibrationError("emergency_time must be > 0")

    d1 = throttle_temp - ambient
    d2 = emergency_temp - ambient
    f = throttled_fraction
    # engine rise x = P_engine / k must keep the throttled plateau above the emergency point
    x_min = (d2 - io_rise) / f

    def t1_scaled(x: float) -> float:  # time to throttle, times k
        return math.log((io_rise + x) / (io_rise + x - d1))

    def t2_scaled(x: float) -> float:
        return math.log((io_rise + f * x - d1) / (io_rise + f * x - d2))

    lo, hi = x_min * (1 + 1e-12) + 1e-9, x_min * 1e6 + 1e6

    if "throttle_time" in a:
        t_thr = float(a["throttle_time"])
        if not 0 < t_thr < t_emerg:
            raise CalibrationError("throttle_time must lie in (0, emergency_time)")
        want = t_thr / (t_emerg - t_thr)

        def g(x: float) -> float:
            return t1_scaled(x) / t2_scaled(x) - want

        if g(lo) * g(hi) > 0:
            raise CalibrationError(
                f"throttle_time {t_thr:g}s infeasible with throttled_fraction {f:g}: "
                f"ratio must stay within ({g(lo) + want:.3g}, {g(hi) + want:.3g})"
            )
        x = brentq(g, lo, hi, xtol=1e-12, rtol=1e-14, maxiter=500)
        k = t1_scaled(x) / t_thr
    else:
        k = 1.0 / float(a.get("io_time_constant", DEFAULT_IO_TIME_CONSTANT))
        if not k > 0:
            raise CalibrationError("io_time_constant must be > 0")

        def h(x: float) -> float:
            return (t1_scaled(x) + t2_scaled(x)) / k - t_emerg

        if h(lo) * h(hi) > 0:
            raise CalibrationError(
                f"emergency_time {t_emerg:g}s unreachable with io_time_constant {1 / k:g}s"
            )
        x = brentq(h, lo, hi, xtol=1e-12, rtol=1e-14, maxiter=500)

    return ThermalParams(
        ambient_temp=ambient,
        cooling_coeff=k,
        power_io=io_rise * k,
        power_engine=x * k,
        power_idle=0.0,
    )


def replay_anchors(
    params: ThermalParams,
    throttle_temp: float = 76.0,
    emergency_temp: float = 86.0,
    throttled_fraction: float = 0.1,
) -> Sequence[Tuple[str, float]]:
    """Re-derive the anchor values implied by ``params``."""
    t_thr, t_em = throttled_run_time(params, throttle_temp, emergency_temp, throttled_fraction)
    return [
        ("idle", asymptote(params, params.power_idle)),
        ("io_asymptote", asymptote(params, heat_rate(params, busy=1.0))),
        ("throttle_time", t_thr),
        ("emergency_time", t_em),
        ("io_time_constant", 1.0 / params.cooling_coeff),
    ]
