"""Closed-form vulnerability-window and availability analysis.

Two recovery schemes are compared.  Reboot-based recovery takes a replica
offline for the reboot plus state save/restore time, staggered by a watchdog;
migration-based recovery only pays the state-transfer time because the
sanitization of the replaced node happens off the critical path.  The window
in both cases spans two key-refresh periods plus the time to recover every
replica once.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

ROUNDS = 4  # full coverage takes four rounds of f replicas each


@dataclass
class AnalysisParams:
    """Timing parameters for the closed-form model (all in seconds)."""

    t_k: float = 15.0              # key refresh period
    r_n: float = 10.0              # per-round recovery time budget
    t_reboot: float = 30.0         # reboot duration
    t_s_pr: float = 5.0            # state save/restore/verify, reboot scheme
    t_s_pm: float = 5.0            # state transfer, migration scheme
    t_w_pr: float | None = None    # watchdog timeout; defaults to 4 * r_n
    t_w_pm: float | None = None    # migration timer; defaults to the window
    t_v: float | None = None       # vulnerability window; defaults to derived
    p: tuple[float, ...] = field(default=(0.25, 0.25, 0.25, 0.25))
    f: int = 1

    def __post_init__(self) -> None:
        for name in ("t_k", "r_n", "t_reboot", "t_s_pr", "t_s_pm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if len(self.p) != ROUNDS or abs(sum(self.p) - 1.0) > 1e-9:
            raise ValueError("round probabilities must be 4 values summing to 1")

    @property
    def watchdog(self) -> float:
        return 4 * self.r_n if self.t_w_pr is None else self.t_w_pr

    @property
    def reboot_recovery(self) -> float:
        return self.t_reboot + self.t_s_pr


def window_migration(t_k: float, r_n: float) -> float:
    """Vulnerability window with coordinated migration: 2 key periods plus
    four back-to-back recovery rounds."""
    if t_k < 0 or r_n < 0:
        raise ValueError("durations must be non-negative")
    return 2.0 * t_k + ROUNDS * r_n


def window_reboot(t_k: float, t_w_pr: float, r_n: float) -> float:
    """Vulnerability window with watchdog-staggered reboots."""
    if t_k < 0 or t_w_pr < 0 or r_n < 0:
        raise ValueError("durations must be non-negative")
    return 2.0 * t_k + t_w_pr + r_n


def availability(t_v: float, r_n: float,
                 p: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)) -> float:
    """Expected availability with one faulty replica recovered in a uniformly
    random round: the system is down for each round spent recovering a
    different replica while the faulty one is still in place."""
    q, _ = availability_detail(t_v, r_n, p)
    return q


def availability_detail(t_v: float, r_n: float,
                        p: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)) -> tuple[float, tuple[float, ...]]:
    if t_v <= 0:
        if t_v == 0 and r_n == 0:
            return 0.0, (0.0,) * ROUNDS
        raise ValueError("window must be positive")
    if r_n < 0:
        raise ValueError("recovery time must be non-negative")
    if (ROUNDS - 1) * r_n > t_v:
        raise ValueError("model domain requires 3 * r_n <= t_v")
    if len(p) != ROUNDS or abs(sum(p) - 1.0) > 1e-9:
        raise ValueError("round probabilities must be 4 values summing to 1")
    per_round = tuple(p[i] * (t_v - i * r_n) / t_v for i in range(ROUNDS))
    return sum(per_round), per_round


def monte_carlo_availability(t_v: float, r_n: float, trials: int = 100_000,
                             seed: int = 0) -> float:
    """Independent estimate of :func:`availability` by sampling the round in
    which the faulty replica happens to be recovered."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    rng = random.Random(seed)
    total = 0.0
    for _ in range(trials):
        i = rng.randrange(ROUNDS)
        total += (t_v - i * r_n) / t_v
    return total / trials


def sweep(params: AnalysisParams, axis: str, values: list[float]) -> list[tuple[float, float, float]]:
    """Rows of (axis value, q_migration, q_reboot).

    ``t_reboot``: fixed window, growing reboot time; the migration column is
    constant because migration recovery does not include a reboot.
    ``t_v``: fixed recovery times, growing window.
    """
    rows = []
    if axis == "t_reboot":
        t_v = params.t_v
        if t_v is None:
            t_v = window_reboot(params.t_k, params.watchdog, params.reboot_recovery)
        for value in values:
            q_mig = availability(t_v, params.t_s_pm, params.p)
            q_reb = availability(t_v, value + params.t_s_pr, params.p)
            rows.append((value, q_mig, q_reb))
    elif axis == "t_v":
        for value in values:
            q_mig = availability(value, params.t_s_pm, params.p)
            q_reb = availability(value, params.reboot_recovery, params.p)
            rows.append((value, q_mig, q_reb))
    else:
        raise ValueError("axis must be 't_reboot' or 't_v'")
    return rows


def sweep_csv(rows: list[tuple[float, float, float]]) -> str:
    lines = ["axis,q_migration,q_reboot"]
    for value, q_mig, q_reb in rows:
        lines.append(f"{value:g},{q_mig:.6f},{q_reb:.6f}")
    return "\n".join(lines) + "\n"
