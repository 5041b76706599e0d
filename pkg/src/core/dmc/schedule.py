"""Target compression ratio and learning-rate multiplier over the retrofit run."""

from __future__ import annotations

import math
from typing import NamedTuple

from app.errors import ScheduleError
from core.dtos import CRSchedule
from core.enums import RetrofitPhase, ScheduleMode


class ScheduleTarget(NamedTuple):
    cr: float
    lr_mult: float
    phase: RetrofitPhase


def schedule_target_cr(step: int, schedule: CRSchedule) -> ScheduleTarget:
    """
    Ramp: CR rises linearly from start to target over `ramp_steps` with lr multiplier 1.
    Solidify: CR held at target while the lr multiplier follows a cosine down to
    `final_lr_fraction`. Immediate mode skips the ramp's interpolation. Steps past the end
    keep the final values.
    """
    if step < 0:
        raise ScheduleError(f"schedule step must be >= 0, got {step}")
    if step < schedule.ramp_steps:
        if schedule.mode is ScheduleMode.IMMEDIATE:
            cr = schedule.target_cr
        else:
            frac = step / schedule.ramp_steps
            cr = schedule.start_cr + (schedule.target_cr - schedule.start_cr) * frac
        return ScheduleTarget(cr, 1.0, RetrofitPhase.RAMP)

    into = min(step - schedule.ramp_steps, schedule.solidify_steps)
    if schedule.solidify_steps == 0:
        return ScheduleTarget(schedule.target_cr, 1.0, RetrofitPhase.SOLIDIFY)
    floor = schedule.final_lr_fraction
    cosine = 0.5 * (1.0 + math.cos(math.pi * into / schedule.solidify_steps))
    lr_scale = floor + (1.0 - floor) * cosine
    return ScheduleTarget(schedule.target_cr, lr_scale, RetrofitPhase.SOLIDIFY)


def integer_crossings(previous_cr: float, current_cr: float) -> list[int]:
    """Integer compression ratios passed when the target moves from previous to current."""
    lo = math.floor(previous_cr) + 1
    hi = math.floor(current_cr + 1e-9)
    return [c for c in range(max(lo, 2), hi + 1)]
