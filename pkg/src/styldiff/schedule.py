"""Noise schedules and accelerated timestep plans."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar indexed by timestep; index 0 holds the clean-image
    convention (beta_0 = 0, alpha_bar_0 = 1), so ``alpha_bar[t]`` is the
    cumulative product up to step t."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for a in (self.beta, self.alpha, self.alpha_bar):
            a.setflags(write=False)

    def check_t(self, t: int, lo: int = 0) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("betas must be a non-empty 1-D array")
    if not np.all((betas > 0) & (betas < 1)):
        raise ValueError("every beta must lie in (0, 1)")
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.empty_like(alpha)
    alpha_bar[0] = 1.0
    for t in range(1, alpha.size):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    return NoiseSchedule(betas.size, beta, alpha, alpha_bar)


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return schedule_from_betas([beta_start])
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]

    def __post_init__(self):
        s = self.steps
        if len(s) < 2:
            raise ValueError("a plan needs at least 2 points")
        if s[0] != 0:
            raise ValueError("a plan must start at t=0")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"plan not strictly increasing: {s}")

    @property
    def T_return(self) -> int:
        return self.steps[-1]

    def __len__(self) -> int:
        return len(self.steps)

    def forward_pairs(self):
        """(t_s, t_{s+1}) for s = 1..S-1."""
        return list(zip(self.steps[:-1], self.steps[1:]))

    def reverse_pairs(self):
        """(t_s, t_{s-1}) for s = S..2."""
        return [(b, a) for a, b in reversed(self.forward_pairs())]


def make_plan(S: int, T_return: int, T: int = 1000) -> TimestepPlan:
    """Uniform plan of S points over [0, T_return].

    >>> make_plan(5, 601).steps
    (0, 150, 301, 451, 601)
    """
    if T_return > T:
        raise ValueError(f"return step {T_return} exceeds T={T}")
    if S < 2:
        raise ValueError("S must be >= 2")
    if S > T_return + 1:
        raise ValueError(f"S={S} points cannot be strictly increasing over [0, {T_return}]")
    # round half away from zero; values are non-negative
    raw = np.floor(np.arange(S) * T_return / (S - 1) + 0.5).astype(np.int64)
    steps = [int(raw[0])]
    for v in raw[1:]:
        steps.append(max(int(v), steps[-1] + 1))
    # collapsing upward can overrun the end; pull back from the top
    steps[-1] = T_return
    for i in range(S - 2, -1, -1):
        if steps[i] >= steps[i + 1]:
            steps[i] = steps[i + 1] - 1
    return TimestepPlan(tuple(steps))
