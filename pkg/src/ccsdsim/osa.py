"""On-demand reserved-space arbiter.

Once per interval the arbiter looks at how hard segment cleaning is working
and how much space device-side compression has saved, then grows or shrinks
the extra reserved space by one step.  All sizes are integer bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Tuple

__all__ = ["Decision", "OsaParams", "OsaInputs", "arbitrate", "apply", "Arbiter"]


class Decision(str, Enum):
    EXPAND = "expand"
    SHRINK = "shrink"
    KEEP = "keep"


@dataclass(frozen=True)
class OsaParams:
    ft_sc: float = 4.0
    ft_c: float = 256.0
    t_s: float = 0.01
    rs_max: float = 0.2
    evaluate_interval: float = 1.0
    partition_bytes: int = 200 * 10**9

    def __post_init__(self) -> None:
        for name in ("ft_sc", "ft_c", "t_s", "rs_max", "evaluate_interval", "partition_bytes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.t_s > self.rs_max:
            raise ValueError("t_s must not exceed rs_max")

    @property
    def step_bytes(self) -> int:
        return int(round(self.t_s * self.partition_bytes))

    @property
    def max_bytes(self) -> int:
        return int(round(self.rs_max * self.partition_bytes))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class OsaInputs:
    c_s: int  # saved space in bytes
    rs_cur: int
    f_sc: float
    f_c: float

    def __post_init__(self) -> None:
        if self.c_s < 0 or self.rs_cur < 0:
            raise ValueError("c_s and rs_cur must be >= 0")


def arbitrate(inputs: OsaInputs, params: OsaParams) -> Tuple[Decision, int]:
    """One evaluation.  Returns the decision and the new reserved size.

    Shrink wins when both rules fire.  A shrink that cannot go below zero is
    reported as Keep.
    """
    step = params.step_bytes
    rs, cs = inputs.rs_cur, inputs.c_s
    grown = rs + step
    busy = inputs.f_sc > params.ft_sc or inputs.f_c > params.ft_c
    quiet = inputs.f_sc < params.ft_sc / 2 and inputs.f_c < params.ft_c / 2
    if quiet or grown > cs:
        new = max(rs - step, 0)
        return (Decision.SHRINK, new) if new != rs else (Decision.KEEP, rs)
    if busy and grown < params.max_bytes and grown < cs:
        return Decision.EXPAND, grown
    return Decision.KEEP, rs


def apply(decision: Decision, new_rs: int, hostfs) -> int:
    """Hand the decision to the file layer; returns the granted extra bytes."""
    if decision is Decision.KEEP:
        return hostfs.rs_extra * hostfs.config.segment_bytes
    return hostfs.resize_reserved(new_rs)


class Arbiter:
    """Periodic driver around :func:`arbitrate`.

    ``sc_scale`` and ``c_scale`` convert the measured cleaning rates of a
    scaled-down model into the units the thresholds are expressed in.
    """

    def __init__(self, params: OsaParams, sc_scale: float = 1.0, c_scale: float = 1.0) -> None:
        self.params = params
        self.sc_scale = sc_scale
        self.c_scale = c_scale
        self.next_eval = params.evaluate_interval
        self.history: list = []

    def evaluate(self, now: float, hostfs, c_s: int) -> Decision:
        rs_cur = hostfs.rs_extra * hostfs.config.segment_bytes
        inputs = OsaInputs(
            c_s=max(int(c_s), 0),
            rs_cur=rs_cur,
            f_sc=hostfs.sc_rate(now) * self.sc_scale,
            f_c=hostfs.copy_rate(now) * self.c_scale,
        )
        decision, new = arbitrate(inputs, self.params)
        if decision is not Decision.KEEP:
            apply(decision, new, hostfs)
        self.history.append((now, decision.value, hostfs.rs_extra * hostfs.config.segment_bytes))
        self.next_eval = now + self.params.evaluate_interval
        return decision
