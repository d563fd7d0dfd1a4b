"""Forward/reverse diffusion steps and DDIM chains over a timestep plan.

Images are tensors shaped ``(3, H, W)`` or batched ``(N, 3, H, W)``. A
denoiser handle is any callable ``den(x, t) -> eps`` that also exposes the
``sched`` it was built for.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch

from .schedule import NoiseSchedule, TimestepPlan


class DenoiserHandle(Protocol):
    sched: NoiseSchedule

    def __call__(self, x: torch.Tensor, t: int) -> torch.Tensor: ...


@dataclass
class ChainResult:
    final: torch.Tensor
    predictions: list[torch.Tensor] | None = field(default=None)


def _shape_match(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def _ab(sched: NoiseSchedule, t: int) -> float:
    return float(sched.alpha_bar[t])


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    t = sched.check_t(t)
    _shape_match(x0, eps, "q_sample noise")
    ab = _ab(sched, t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _x0_hat(x_t, t, eps_pred, sched):
    if t == 0:
        return x_t
    ab = _ab(sched, t)
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def predict_x0(x_t, t, eps_pred, sched: NoiseSchedule):
    """Clean-image estimate (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)."""
    t = sched.check_t(t, lo=1)
    _shape_match(x_t, eps_pred, "predict_x0 eps")
    return _x0_hat(x_t, t, eps_pred, sched)


def ddim_step_general(x_t, t_from, t_to, eps_pred, sigma, z, sched: NoiseSchedule):
    """Generalised reverse step with noise scale ``sigma`` (``z`` only when sigma > 0)."""
    t_from = sched.check_t(t_from)
    t_to = sched.check_t(t_to)
    if t_to > t_from:
        raise ValueError(f"reverse step needs t_to <= t_from, got {t_from} -> {t_to}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if (z is not None) != (sigma > 0):
        raise ValueError("noise z must be given exactly when sigma > 0")
    _shape_match(x_t, eps_pred, "ddim eps")
    ab_to = _ab(sched, t_to)
    rest = 1.0 - ab_to - sigma * sigma
    if rest < 0:
        raise ValueError(f"sigma^2={sigma * sigma:.6g} exceeds 1 - alpha_bar={1 - ab_to:.6g}")
    out = math.sqrt(ab_to) * _x0_hat(x_t, t_from, eps_pred, sched) + math.sqrt(rest) * eps_pred
    if sigma > 0:
        _shape_match(x_t, z, "ddim z")
        out = out + sigma * z
    return out


def ddim_reverse_step(x_t, t_from, t_to, eps_pred, sched: NoiseSchedule):
    return ddim_step_general(x_t, t_from, t_to, eps_pred, 0.0, None, sched)


def ddim_forward_step(x_t, t_from, t_to, eps_pred, sched: NoiseSchedule):
    """Deterministic (ODE) forward step from t_from up to t_to."""
    t_from = sched.check_t(t_from)
    t_to = sched.check_t(t_to)
    if not t_to > t_from:
        raise ValueError(f"forward step needs t_to > t_from, got {t_from} -> {t_to}")
    _shape_match(x_t, eps_pred, "ddim eps")
    ab_to = _ab(sched, t_to)
    f = _x0_hat(x_t, t_from, eps_pred, sched)
    return math.sqrt(ab_to) * f + math.sqrt(1.0 - ab_to) * eps_pred


def ddpm_reverse_step(x_t, t, eps_pred, z, sched: NoiseSchedule):
    """Ancestral step with sigma_t^2 = beta_t."""
    t = sched.check_t(t, lo=1)
    _shape_match(x_t, eps_pred, "ddpm eps")
    _shape_match(x_t, z, "ddpm z")
    a = float(sched.alpha[t])
    ab = _ab(sched, t)
    sigma = math.sqrt(float(sched.beta[t]))
    return (x_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(a) + sigma * z


def _sched_of(den, sched):
    s = sched if sched is not None else getattr(den, "sched", None)
    if s is None:
        raise ValueError("no noise schedule given and the denoiser carries none")
    return s


@torch.no_grad()
def invert(x0, plan: TimestepPlan, den: Callable, sched: NoiseSchedule | None = None):
    """Deterministic forward chain 0 -> T_return; returns the latent."""
    sched = _sched_of(den, sched)
    x = x0
    for t_from, t_to in plan.forward_pairs():
        x = ddim_forward_step(x, t_from, t_to, den(x, t_from), sched)
    return x


@torch.no_grad()
def generate(x_latent, plan: TimestepPlan, den: Callable, capture: bool = False,
             stochastic_start: tuple[torch.Tensor, np.random.Generator] | None = None,
             sched: NoiseSchedule | None = None) -> ChainResult:
    """Deterministic reverse chain T_return -> 0.

    With ``stochastic_start=(x0, rng)`` the latent is replaced by a fresh
    forward sample of x0 at T_return before reversing.
    """
    sched = _sched_of(den, sched)
    if stochastic_start is not None:
        x0, rng = stochastic_start
        eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).to(x0.dtype)
        x_latent = q_sample(x0, plan.T_return, eps, sched)
    x = x_latent
    preds = [] if capture else None
    for t_from, t_to in plan.reverse_pairs():
        eps = den(x, t_from)
        if capture:
            preds.append(_x0_hat(x, t_from, eps, sched))
        x = ddim_reverse_step(x, t_from, t_to, eps, sched)
    return ChainResult(x, preds)
