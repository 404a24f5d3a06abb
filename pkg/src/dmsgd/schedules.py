"""Step-size families and their Robbins-Monro classification."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import BadParam


class ScheduleFamily(str, enum.Enum):
    POWER_LAW = "power_law"
    RATE_LAW = "rate_law"
    CONSTANT = "constant"


class Regime(str, enum.Enum):
    CONVERGENCE = "convergence"
    RATE = "rate"
    HITTING = "hitting"


class RMVerdict(NamedTuple):
    valid: bool
    reason: str


@dataclass(frozen=True)
class StepSchedule:
    """``eps_n = c / n**p`` (power law), ``sqrt(m/n)`` (rate law) or ``c``."""

    family: ScheduleFamily
    c: float = 1.0
    p: float = 1.0
    m: int = 1
    _sums: list = field(default_factory=lambda: [0.0], init=False, repr=False,
                        compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "family", ScheduleFamily(self.family))
        if self.family is not ScheduleFamily.RATE_LAW and not self.c > 0:
            raise BadParam(f"step scale c must be positive, got {self.c}")
        if self.family is ScheduleFamily.POWER_LAW and self.p < 0:
            raise BadParam(f"power-law exponent must be >= 0, got {self.p}")
        if self.family is ScheduleFamily.RATE_LAW and int(self.m) < 1:
            raise BadParam(f"rate-law schedule needs m >= 1, got {self.m}")

    @classmethod
    def power_law(cls, c, p):
        return cls(ScheduleFamily.POWER_LAW, c=float(c), p=float(p))

    @classmethod
    def rate_law(cls, m):
        return cls(ScheduleFamily.RATE_LAW, m=int(m))

    @classmethod
    def constant(cls, c):
        return cls(ScheduleFamily.CONSTANT, c=float(c))

    def __call__(self, n):
        return step_at(self, n)


def step_at(s: StepSchedule, n: int) -> float:
    if n < 1:
        raise BadParam(f"iteration index starts at 1, got {n}")
    if s.family is ScheduleFamily.POWER_LAW:
        return s.c / float(n) ** s.p
    if s.family is ScheduleFamily.RATE_LAW:
        return math.sqrt(s.m) / math.sqrt(n)
    return s.c


def steps(s: StepSchedule, horizon: int) -> np.ndarray:
    """``eps_1 .. eps_horizon``, bitwise equal to repeated :func:`step_at`."""
    return np.array([step_at(s, n) for n in range(1, horizon + 1)])


def robbins_monro_valid(s: StepSchedule) -> RMVerdict:
    if s.family is ScheduleFamily.RATE_LAW:
        return RMVerdict(False, "rate-law schedule, finite-horizon rate regime only "
                                "(sum eps^2 = m * sum 1/n diverges)")
    if s.family is ScheduleFamily.CONSTANT:
        return RMVerdict(False, "constant step: sum eps^2 diverges")
    if s.p <= 0.5:
        return RMVerdict(False, f"p = {s.p} <= 1/2: sum eps^2 diverges")
    if s.p > 1.0:
        return RMVerdict(False, f"p = {s.p} > 1: sum eps converges")
    return RMVerdict(True, f"p = {s.p} in (1/2, 1]")


def partial_sum(s: StepSchedule, n: int) -> float:
    """Running sum ``eps_1 + ... + eps_n``; accumulated left to right and cached."""
    if n < 1:
        raise BadParam(f"partial sums start at n = 1, got {n}")
    sums = s._sums
    while len(sums) <= n:
        k = len(sums)
        sums.append(sums[-1] + step_at(s, k))
    return sums[n]


def partial_sums(s: StepSchedule, horizon: int) -> np.ndarray:
    partial_sum(s, horizon)
    return np.array(s._sums[1:horizon + 1])


def numeric_rm_heuristic(s: StepSchedule, terms: int = 10**7) -> RMVerdict:
    """Empirical check over ``terms`` terms: the step sum must grow past 1e3
    while the squared-step sum plateaus (last 90% of terms add under 5%).

    Only a heuristic: slowly diverging series such as ``1/n`` stay under the
    1e3 threshold at 1e7 terms."""
    n = np.arange(1, terms + 1, dtype=float)
    if s.family is ScheduleFamily.POWER_LAW:
        e = s.c / n ** s.p
    elif s.family is ScheduleFamily.RATE_LAW:
        e = math.sqrt(s.m) / np.sqrt(n)
    else:
        e = np.full(terms, s.c)
    # The "diverges" test is scale-free: compare against the unit-scale series.
    e = e / e[0]
    total = e.sum()
    sq = e * e
    sq_total = sq.sum()
    sq_tail = sq[terms // 10:].sum()
    diverges = total > 1e3
    plateaus = sq_tail < 0.05 * sq_total
    if not diverges:
        return RMVerdict(False, f"sum eps = {total:.4g} stays bounded")
    if not plateaus:
        return RMVerdict(False, f"sum eps^2 still growing (last 90% adds {sq_tail / sq_total:.2%})")
    return RMVerdict(True, "sum eps diverges, sum eps^2 plateaus")
