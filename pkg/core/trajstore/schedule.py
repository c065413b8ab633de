#!/usr/bin/env python3
"""
Matching Range Schedule
Floating upper bound on the expert start epoch and uniform start sampling
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from core.errors import ScheduleError

logger = logging.getLogger(__name__)

REFERENCE_EPOCHS = 80


@dataclass(frozen=True)
class MatchingRangeSchedule:
    """Start epochs are drawn from [t_minus, T(it)], T(it) = min(t_init + it // interval, t_plus)"""
    t_minus: int
    t_init: int
    t_plus: int
    interval: int = 100

    def __post_init__(self):
        if not 0 <= self.t_minus <= self.t_init <= self.t_plus:
            raise ScheduleError(
                f"Need 0 <= T_minus <= T_init <= T_plus, got ({self.t_minus}, {self.t_init}, {self.t_plus})"
            )
        if self.interval < 1:
            raise ScheduleError(f"Interval must be >= 1, got {self.interval}")

    def current_bound(self, iteration: int) -> int:
        if iteration < 0:
            raise ScheduleError(f"Iteration must be >= 0, got {iteration}")
        return min(self.t_init + iteration // self.interval, self.t_plus)

    def validate_for(self, epochs: int, M: int) -> 'MatchingRangeSchedule':
        """Every start t must leave room for t + M within an expert of `epochs` epochs"""
        if self.t_plus + M > epochs:
            raise ScheduleError(f"T_plus={self.t_plus} with M={M} exceeds expert length {epochs}")
        return self

    def scaled(self, epochs: int, reference: int = REFERENCE_EPOCHS) -> 'MatchingRangeSchedule':
        """Bounds rescaled by epochs / reference, rounded down"""
        def scale(value: int) -> int:
            return (value * epochs) // reference
        return replace(self, t_minus=scale(self.t_minus), t_init=scale(self.t_init), t_plus=scale(self.t_plus))

    def describe(self) -> str:
        return f"{self.t_minus}:{self.t_init}:{self.t_plus}"


def sample_start(schedule: MatchingRangeSchedule, iteration: int, rng: np.random.Generator) -> int:
    """Uniform draw from {T_minus, ..., T(iteration)}"""
    bound = schedule.current_bound(iteration)
    return int(rng.integers(schedule.t_minus, bound + 1))


def stage_schedules(stages: Dict[str, Sequence[int]], epochs: int, M: int, interval: int,
                    reference: int = REFERENCE_EPOCHS) -> List[Tuple[str, MatchingRangeSchedule]]:
    """Scale ordered (T_minus, T_init, T_plus) stages to the expert length without overlap.

    Upper bounds are clamped to epochs - M and each lower bound is lifted past
    the previous stage's upper bound.
    """
    ceiling = epochs - M
    if ceiling < 0:
        raise ScheduleError(f"Expert length {epochs} is shorter than M={M}")

    result: List[Tuple[str, MatchingRangeSchedule]] = []
    previous_upper = -1
    for name, bounds in stages.items():
        if len(bounds) != 3:
            raise ScheduleError(f"Stage {name} needs (T_minus, T_init, T_plus), got {list(bounds)}")
        base = MatchingRangeSchedule(*(int(b) for b in bounds), interval=interval).scaled(epochs, reference)
        t_plus = min(base.t_plus, ceiling)
        t_minus = max(base.t_minus, previous_upper + 1)
        if t_minus > t_plus:
            raise ScheduleError(f"Stage {name} is empty after scaling to {epochs} epochs")
        t_init = min(max(base.t_init, t_minus), t_plus)
        schedule = MatchingRangeSchedule(t_minus, t_init, t_plus, interval)
        logger.debug(f"Stage {name}: {schedule.describe()}")
        result.append((name, schedule))
        previous_upper = t_plus
    return result
