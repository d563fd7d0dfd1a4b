"""Image-pair metrics: SSIM, projector style score and Gram style distance."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .disentangle import Projector, embed, gram_loss

WINDOW = 11
SIGMA = 1.5
DATA_RANGE = 2.0
K1, K2 = 0.01, 0.03
LUMA = (0.299, 0.587, 0.114)


def _luma(img: torch.Tensor) -> torch.Tensor:
    x = img.to(torch.float64)
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(img.shape)}")
    return LUMA[0] * x[0] + LUMA[1] * x[1] + LUMA[2] * x[2]


def _gauss_window():
    r = torch.arange(WINDOW, dtype=torch.float64) - (WINDOW - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * SIGMA ** 2))
    return g / g.sum()


def _filter(x, g):
    x = x[None, None]
    x = F.conv2d(x, g.view(1, 1, 1, -1))
    return F.conv2d(x, g.view(1, 1, -1, 1))[0, 0]


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """SSIM of the luma channels, Gaussian 11x11 window, mean over valid windows."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    x, y = _luma(a), _luma(b)
    if min(x.shape) < WINDOW:
        raise ValueError(f"image smaller than the {WINDOW}x{WINDOW} window")
    g = _gauss_window()
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def style_score(proj: Projector, a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity of projector embeddings."""
    ea = embed(proj, a.to(torch.float64))
    eb = embed(proj, b.to(torch.float64))
    na, nb = float(ea.norm()), float(eb.norm())
    if na == 0.0 or nb == 0.0:
        raise ValueError("style score undefined for a zero embedding")
    return float(ea @ eb) / (na * nb)


def style_distance_gram(proj: Projector, a: torch.Tensor, b: torch.Tensor) -> float:
    return float(gram_loss(proj, a.to(torch.float64), b.to(torch.float64)))


def cosine(u: torch.Tensor, v: torch.Tensor) -> float:
    nu, nv = float(u.norm()), float(v.norm())
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u.reshape(-1) @ v.reshape(-1)) / (nu * nv)


def report_lines(rows) -> list[str]:
    """Tab-separated report ``metric content_id style_id value``."""
    out = ["metric\tcontent_id\tstyle_id\tvalue"]
    for metric, cid, sid, value in rows:
        out.append(f"{metric}\t{cid}\t{sid}\t{value:.10f}")
    return out


def mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)
