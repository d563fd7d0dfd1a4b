"""Style removal: luma decolorisation followed by repeated DDIM inversion and
reconstruction through the photograph-domain denoiser."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffusion import generate, invert
from .schedule import make_plan

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
CLIP_GUARD = 0.2


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RemovalConfig:
    T_remov: int = 601
    S_for: int = 40
    S_rev: int = 40
    K_r: int = 5
    skip_diffusion: bool = False

    def __post_init__(self):
        if min(self.T_remov, self.S_for, self.S_rev) < 1 or self.K_r < 0:
            raise ValueError("removal counts must be positive")


ARTISTIC = RemovalConfig()
PHOTO = RemovalConfig(T_remov=401)


def luma(img: torch.Tensor) -> torch.Tensor:
    """Grayscale L = 0.299 R + 0.587 G + 0.114 B replicated to 3 channels."""
    if img.dim() < 3 or img.shape[-3] != 3:
        raise ValueError(f"luma needs 3 channels, got shape {tuple(img.shape)}")
    r, g, b = img.unbind(-3)
    y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return torch.stack([y, y, y], dim=-3)


@torch.no_grad()
def remove_style(img: torch.Tensor, cfg: RemovalConfig, den, sched=None) -> torch.Tensor:
    """Content image of ``img``; works on single images or batches."""
    x = luma(img)
    if cfg.skip_diffusion or cfg.K_r == 0:
        return x
    sched = sched if sched is not None else den.sched
    fwd = make_plan(cfg.S_for, cfg.T_remov, sched.T)
    rev = make_plan(cfg.S_rev, cfg.T_remov, sched.T)
    for _ in range(cfg.K_r):
        x = generate(invert(x, fwd, den, sched), rev, den, sched=sched).final
    if float(x.abs().max()) > 1 + CLIP_GUARD:
        raise DivergenceError(f"style removal left [-1, 1] by more than {CLIP_GUARD} "
                              f"(max |x| = {float(x.abs().max()):.3f})")
    return x.clamp(-1, 1)
