"""Frozen embedding projector, style directions and the disentanglement losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .tensor import check_finite

PROJECTOR_SEED = 0x53444C50
PROJECTOR_CHANNELS = (16, 32, 64)
SLOPE = 0.2
STD_EPS = 1e-8


class Projector:
    """Fixed random conv pyramid (3 stride-2 stages) pooled to mean and std per channel.

    Replicate padding keeps a constant image constant through every stage.
    """

    def __init__(self, seed: int = PROJECTOR_SEED, channels=PROJECTOR_CHANNELS):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.channels = tuple(channels)
        self.weights = []
        cin = 3
        for c in self.channels:
            fan_in = cin * 9
            w = rng.standard_normal((c, cin, 3, 3)) * math.sqrt(2.0 / fan_in)
            self.weights.append(torch.from_numpy(w))
            cin = c
        self._cache: dict[torch.dtype, list[torch.Tensor]] = {torch.float64: self.weights}

    @property
    def dim(self) -> int:
        return 2 * sum(self.channels)

    def _w(self, dtype):
        if dtype not in self._cache:
            self._cache[dtype] = [w.to(dtype) for w in self.weights]
        return self._cache[dtype]

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Stage feature maps, each ``(N, C, h, w)``."""
        x = img[None] if img.dim() == 3 else img
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"projector expects 3-channel images, got {tuple(img.shape)}")
        if min(x.shape[-2:]) < 2 ** len(self.channels):
            raise ValueError(f"image side must be >= {2 ** len(self.channels)}")
        feats = []
        for w in self._w(x.dtype):
            x = F.leaky_relu(F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), w, stride=2), SLOPE)
            feats.append(x)
        return feats

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        return embed(self, img)


_default: Projector | None = None


def default_projector() -> Projector:
    global _default
    if _default is None:
        _default = Projector()
    return _default


def embed(proj: Projector, img: torch.Tensor) -> torch.Tensor:
    """Embedding of length ``2 * sum(channels)`` (batched input gives ``(N, D)``)."""
    parts = []
    for f in proj.features(img):
        mu = f.mean(dim=(2, 3))
        var = ((f - mu[:, :, None, None]) ** 2).mean(dim=(2, 3))
        # sqrt(var + eps) - sqrt(eps): exact 0 at zero variance, finite slope there
        sd = (var + STD_EPS).sqrt() - math.sqrt(STD_EPS)
        parts += [mu, sd]
    e = check_finite(torch.cat(parts, dim=1), "embedding")
    return e[0] if img.dim() == 3 else e


@dataclass
class StyleDirection:
    vector: torch.Tensor
    source: tuple = field(default=())

    def norm(self) -> float:
        return float(self.vector.norm())


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 10.0
    lambda_dir: float = 1.0

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.lambda_dir < 0:
            raise ValueError("loss weights must be non-negative")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_style_direction(img: torch.Tensor, content: torch.Tensor) -> torch.Tensor:
    _same_shape(img, content, "pixel direction")
    return img - content


def style_direction(proj: Projector, img: torch.Tensor, content: torch.Tensor,
                    source: tuple = ()) -> StyleDirection:
    """E(img) - E(content)."""
    _same_shape(img, content, "style direction")
    return StyleDirection(embed(proj, img) - embed(proj, content), source)


def _vec(d):
    return d.vector if isinstance(d, StyleDirection) else d


def loss_l1(d_cs, d_s) -> torch.Tensor:
    """Mean absolute difference of direction components."""
    a, b = _vec(d_cs), _vec(d_s)
    if a.shape != b.shape:
        raise ValueError(f"direction length mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_dir(d_cs, d_s) -> torch.Tensor:
    """1 - cos(d_cs, d_s), in [0, 2]."""
    a, b = _vec(d_cs).reshape(-1), _vec(d_s).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"direction length mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(), b.norm()
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise ValueError("direction loss undefined for a zero-norm direction")
    cos = (a @ b) / (na * nb)
    return 1.0 - cos.clamp(-1.0, 1.0)


@dataclass
class SDLoss:
    total: torch.Tensor
    l1: torch.Tensor
    dir: torch.Tensor


def combine_sd(l1, dir_, w: LossWeights = LossWeights()) -> torch.Tensor:
    return w.lambda_l1 * l1 + w.lambda_dir * dir_


def loss_sd(proj: Projector, content_c: torch.Tensor, stylized: torch.Tensor,
            style_c: torch.Tensor, style: torch.Tensor, w: LossWeights = LossWeights(),
            d_s: StyleDirection | None = None) -> SDLoss:
    """Weighted L1 + direction loss between D_cs = E(stylized) - E(content_c)
    and D_s = E(style) - E(style_c). ``d_s`` may be passed precomputed."""
    d_cs = style_direction(proj, stylized, content_c)
    if d_s is None:
        d_s = style_direction(proj, style, style_c)
    l1 = loss_l1(d_cs, d_s)
    dr = loss_dir(d_cs, d_s)
    return SDLoss(combine_sd(l1, dr, w), l1, dr)


def loss_sr(styled: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference."""
    _same_shape(styled, style, "style reconstruction")
    return (styled - style).abs().mean()


def gram(f: torch.Tensor) -> torch.Tensor:
    """Normalised Gram matrices F F^T / (C H W) for ``(N, C, H, W)`` features."""
    n, c, h, w = f.shape
    flat = f.reshape(n, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def gram_distance(feats_a, feats_b) -> torch.Tensor:
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        total = total + ((gram(fa) - gram(fb)) ** 2).sum()
    return total


def gram_loss(proj: Projector, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sum over stages of the squared Frobenius distance between Gram matrices."""
    _same_shape(a, b, "gram loss")
    return gram_distance(proj.features(a), proj.features(b))
