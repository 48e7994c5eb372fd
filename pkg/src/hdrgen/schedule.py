"""Diffusion noise schedules: continuous log-SNR curves and their discretization.

The continuous schedule is the cosine curve expressed in log-SNR form,
log SNR(t) = -2 ln tan(pi t / 2), optionally shifted down by a constant
2 ln(shift_ratio) so the same noise-to-signal balance is reached earlier
at higher resolutions. The variance-preserving convention
alpha_bar = sigmoid(log SNR) ties the curve back to the cumulative
signal fraction used by the forward and reverse processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

ALPHA_BAR_CLAMP = 1e-5
# ties produced by the boundary clamp get broken with this floor so
# alpha_bar stays strictly decreasing and every beta stays positive
_BETA_FLOOR = 1e-7


class ScheduleKind(Enum):
    COSINE = "cosine"
    SHIFTED_COSINE = "shifted_cosine"


def log_snr(t: float, shift_ratio: float = 1.0) -> float:
    """log SNR at continuous time t in (0, 1): -2 ln tan(pi t / 2) + 2 ln shift."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in the open interval (0, 1), got {t}")
    if shift_ratio <= 0:
        raise ValueError(f"shift_ratio must be positive, got {shift_ratio}")
    return -2.0 * math.log(math.tan(math.pi * t / 2.0)) + 2.0 * math.log(shift_ratio)


def alpha_bar_continuous(t: float, shift_ratio: float = 1.0) -> float:
    """Signal fraction alpha_bar(t) = sigmoid(log_snr(t)); strictly decreasing."""
    x = log_snr(t, shift_ratio)
    # numerically stable logistic
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class NoiseSchedule:
    """T-step discretization: alpha_bar[0..T], beta[1..T], sigma[1..T].

    ``beta`` and ``sigma`` index step t at position t - 1. ``sigma`` is the
    posterior ("small") standard deviation of the reverse step.
    """

    kind: ScheduleKind
    shift_ratio: float
    T: int
    alpha_bar: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def sigma_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigma[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"step index {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index {t} outside [1, {self.T}]")


def discretize(kind: ScheduleKind, shift_ratio: float, T: int) -> NoiseSchedule:
    """Build the T-step schedule from the continuous curve.

    alpha_bar[i] = clamp(alpha_bar_continuous(i / T), 1e-5, 1 - 1e-5) with
    alpha_bar[0] = 1 - 1e-5; beta[i] = 1 - alpha_bar[i] / alpha_bar[i-1];
    sigma[i] = sqrt(beta[i] * (1 - alpha_bar[i-1]) / (1 - alpha_bar[i])).
    Clamp-induced ties are nudged by a tiny beta floor so alpha_bar stays
    strictly decreasing and beta stays inside (0, 1).
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if kind is ScheduleKind.COSINE:
        shift_ratio = 1.0
    elif shift_ratio <= 0:
        raise ValueError(f"shift_ratio must be positive, got {shift_ratio}")

    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0 - ALPHA_BAR_CLAMP
    for i in range(1, T + 1):
        # the continuous curve diverges at t = 1; the clamp takes over there
        a = 0.0 if i == T else alpha_bar_continuous(i / T, shift_ratio)
        a = min(max(a, ALPHA_BAR_CLAMP), 1.0 - ALPHA_BAR_CLAMP)
        alpha_bar[i] = min(a, alpha_bar[i - 1] * (1.0 - _BETA_FLOOR))

    beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    sigma = np.sqrt(beta * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(
        kind=kind,
        shift_ratio=shift_ratio,
        T=T,
        alpha_bar=alpha_bar,
        beta=beta,
        sigma=sigma,
    )


SNR_CSV_HEADER = "t,log_snr,alpha_bar,beta"


def snr_curve_csv(schedule: NoiseSchedule, path: str | Path) -> None:
    """Write one row per step: t = i/T, log SNR implied by alpha_bar, alpha_bar, beta."""
    with open(path, "w") as f:
        f.write(SNR_CSV_HEADER + "\n")
        for i in range(1, schedule.T + 1):
            a = float(schedule.alpha_bar[i])
            ls = math.log(a / (1.0 - a))
            f.write(f"{i / schedule.T!r},{ls!r},{a!r},{float(schedule.beta[i - 1])!r}\n")
