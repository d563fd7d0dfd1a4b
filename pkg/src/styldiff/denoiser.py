"""Noise predictor: a small timestep-conditioned U-Net, its pretraining,
an exact Gaussian oracle, and the ``.sdfz`` checkpoint format.

The network works on a 2x2 pixel-unshuffled copy of the image, so its two
resolutions are H/2 (width ``base_width``) and H/4 (``2 * base_width``).
"""
from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import container
from .schedule import NoiseSchedule
from .tensor import AdamState, NonFiniteError, ParamSet, Tape, adam_step, check_finite

log = logging.getLogger(__name__)

MAGIC = b"SDFZ"
FORMAT_VERSION = 1
GROUPS = 8
SLOPE = 0.2


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    base_width: int = 32
    levels: int = 2
    time_embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {s}")
        if self.levels < 1 or s % (2 ** self.levels):
            raise ValueError(f"image_size {s} not divisible by 2^levels")
        if self.base_width % GROUPS:
            raise ValueError(f"base_width must be a multiple of {GROUPS}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** lv for lv in range(self.levels)]


def _block_shapes(prefix, cin, cout, tdim):
    shapes = {
        f"{prefix}.norm1.g": (cin,), f"{prefix}.norm1.b": (cin,),
        f"{prefix}.conv1.w": (cout, cin, 3, 3), f"{prefix}.conv1.b": (cout,),
        f"{prefix}.norm2.g": (cout,), f"{prefix}.norm2.b": (cout,),
        f"{prefix}.time.w": (2 * cout, tdim), f"{prefix}.time.b": (2 * cout,),
        f"{prefix}.conv2.w": (cout, cout, 3, 3), f"{prefix}.conv2.b": (cout,),
    }
    if cin != cout:
        shapes[f"{prefix}.skip.w"] = (cout, cin, 1, 1)
        shapes[f"{prefix}.skip.b"] = (cout,)
    return shapes


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    w = cfg.widths()
    td = cfg.time_embed_dim
    hid = 2 * td
    shapes = {
        "temb.fc1.w": (hid, td), "temb.fc1.b": (hid,),
        "temb.fc2.w": (hid, hid), "temb.fc2.b": (hid,),
        "stem.w": (w[0], 12, 3, 3), "stem.b": (w[0],),
    }
    for lv, c in enumerate(w):
        shapes.update(_block_shapes(f"enc{lv}", c, c, hid))
        if lv + 1 < len(w):
            shapes[f"down{lv}.w"] = (w[lv + 1], c, 3, 3)
            shapes[f"down{lv}.b"] = (w[lv + 1],)
    for lv in reversed(range(len(w) - 1)):
        shapes[f"up{lv}.w"] = (w[lv + 1], w[lv], 4, 4)
        shapes[f"up{lv}.b"] = (w[lv],)
        shapes.update(_block_shapes(f"dec{lv}", w[lv], w[lv], hid))
    shapes.update({"out.norm.g": (w[0],), "out.norm.b": (w[0],),
                   "out.w": (12, w[0], 3, 3), "out.b": (12,)})
    return shapes


def init_params(cfg: DenoiserConfig, dtype=torch.float32) -> "DenoiserParams":
    """Seeded Gaussian weights with std sqrt(2/fan_in); zero biases, unit norm gains."""
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            a = np.ones(shape)
        elif name.endswith(".b"):
            a = np.zeros(shape)
        else:
            if name.startswith("up"):
                fan_in = shape[0] * shape[2] * shape[3] // 4  # stride-2 transpose: each output sees 1/4 of taps
            else:
                fan_in = int(np.prod(shape[1:]))
            a = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        arrays[name] = torch.from_numpy(a.astype(np.float32)).to(dtype)
    return DenoiserParams(cfg, ParamSet(arrays))


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    params: ParamSet

    def to(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.config, self.params.to(dtype))

    def clone(self) -> "DenoiserParams":
        return DenoiserParams(self.config, self.params.clone())

    def checksum(self) -> str:
        """CRC32 of the serialized arrays, as 8 hex digits."""
        crc = 0
        for name, v in self.params.items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(v.detach().to(torch.float32).numpy().astype("<f4").tobytes(), crc)
        return f"{crc:08x}"


def timestep_embedding(t: torch.Tensor, dim: int, dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1).to(dtype)


def _norm(h, p, name):
    return F.group_norm(h, GROUPS, p[name + ".g"], p[name + ".b"])


def _resblock(h, temb, p, prefix):
    a = F.leaky_relu(_norm(h, p, prefix + ".norm1"), SLOPE)
    a = F.conv2d(a, p[prefix + ".conv1.w"], p[prefix + ".conv1.b"], padding=1)
    scale, shift = F.linear(temb, p[prefix + ".time.w"], p[prefix + ".time.b"]).chunk(2, dim=1)
    a = _norm(a, p, prefix + ".norm2") * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
    a = F.leaky_relu(a, SLOPE)
    a = F.conv2d(a, p[prefix + ".conv2.w"], p[prefix + ".conv2.b"], padding=1)
    skip = p.get(prefix + ".skip.w")
    if skip is not None:
        h = F.conv2d(h, skip, p[prefix + ".skip.b"])
    return h + a


def forward(dp: DenoiserParams | ParamSet, x: torch.Tensor, t, cfg: DenoiserConfig | None = None) -> torch.Tensor:
    """Predicted noise for ``x`` (``(3,H,W)`` or ``(N,3,H,W)``) at timestep(s) ``t``."""
    if isinstance(dp, DenoiserParams):
        p, cfg = dp.params, dp.config
    else:
        p = dp
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ValueError(f"expected images of shape (3, {cfg.image_size}, {cfg.image_size}), "
                         f"got {tuple(x.shape)}")
    dtype = p["stem.w"].dtype
    x = x.to(dtype)
    n = x.shape[0]
    t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t.expand(n)
    temb = timestep_embedding(t, cfg.time_embed_dim, dtype)
    temb = F.leaky_relu(F.linear(temb, p["temb.fc1.w"], p["temb.fc1.b"]), SLOPE)
    temb = F.linear(temb, p["temb.fc2.w"], p["temb.fc2.b"])

    h = F.conv2d(F.pixel_unshuffle(x, 2), p["stem.w"], p["stem.b"], padding=1)
    skips = []
    levels = cfg.levels
    for lv in range(levels):
        h = _resblock(h, temb, p, f"enc{lv}")
        if lv + 1 < levels:
            skips.append(h)
            h = F.conv2d(h, p[f"down{lv}.w"], p[f"down{lv}.b"], stride=2, padding=1)
    for lv in reversed(range(levels - 1)):
        h = F.conv_transpose2d(h, p[f"up{lv}.w"], p[f"up{lv}.b"], stride=2, padding=1)
        h = _resblock(h + skips[lv], temb, p, f"dec{lv}")
    h = F.leaky_relu(_norm(h, p, "out.norm"), SLOPE)
    out = F.pixel_shuffle(F.conv2d(h, p["out.w"], p["out.b"], padding=1), 2)
    check_finite(out, "denoiser output")
    return out[0] if squeeze else out


class Denoiser:
    """Read-only evaluation handle around trained parameters."""

    def __init__(self, dp: DenoiserParams, sched: NoiseSchedule):
        self.dp = dp
        self.sched = sched

    @property
    def config(self) -> DenoiserConfig:
        return self.dp.config

    def __call__(self, x, t):
        with torch.no_grad():
            return forward(self.dp, x, t).to(x.dtype)


class LinearGaussianOracle:
    """Bayes-optimal noise prediction for data x0 ~ N(mean, diag(var)).

    A t=0 query raises unless ``at_zero="limit"``, which returns the exact
    limit (zero noise) so forward chains starting at the clean image can run.
    """

    def __init__(self, mean: torch.Tensor, var: torch.Tensor, sched: NoiseSchedule,
                 at_zero: str = "error"):
        if at_zero not in ("error", "limit"):
            raise ValueError("at_zero must be 'error' or 'limit'")
        self.at_zero = at_zero
        var = torch.as_tensor(var, dtype=torch.float64)
        if not bool((var > 0).all()):
            raise ValueError("oracle variances must be positive")
        self.mean = mean.to(torch.float64)
        self.var = var.expand_as(self.mean) if var.dim() == 0 else var
        self.sched = sched

    def posterior_mean(self, x_t, t):
        ab = float(self.sched.alpha_bar[t])
        return (math.sqrt(ab) * self.var * x_t + (1 - ab) * self.mean) / (ab * self.var + (1 - ab))

    def eps_from_alpha_bar(self, x_t, ab):
        post = (math.sqrt(ab) * self.var * x_t + (1 - ab) * self.mean) / (ab * self.var + (1 - ab))
        return (x_t - math.sqrt(ab) * post) / math.sqrt(1 - ab)

    def __call__(self, x_t, t):
        t = self.sched.check_t(t)
        if t == 0:
            if self.at_zero == "limit":
                return torch.zeros_like(x_t)
            raise ValueError("oracle is undefined at t=0 (no noise to predict)")
        return self.eps_from_alpha_bar(x_t.to(torch.float64), float(self.sched.alpha_bar[t])).to(x_t.dtype)


def linear_gaussian_oracle(mean, var, sched, at_zero: str = "error") -> LinearGaussianOracle:
    return LinearGaussianOracle(mean, var, sched, at_zero)


def pretrain(dp: DenoiserParams, dataset: np.ndarray | torch.Tensor, sched: NoiseSchedule,
             steps: int, lr: float = 2e-4, batch: int = 16, rng: np.random.Generator | None = None,
             state: AdamState | None = None, log_every: int = 500):
    """Minimise mean ||eps_pred(x_t, t) - eps||^2 over random (x0, t, eps).

    Returns ``(params, losses, adam_state)``; pass the state (and the same rng)
    back in to continue a run exactly.
    """
    data = torch.as_tensor(dataset)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    state = state if state is not None else AdamState()
    params = dp.params
    dtype = params.dtype
    data = data.to(dtype)
    sqrt_ab = torch.from_numpy(np.sqrt(sched.alpha_bar)).to(dtype)
    sqrt_1mab = torch.from_numpy(np.sqrt(1.0 - sched.alpha_bar)).to(dtype)
    losses = []
    t0 = time.time()
    for step in range(steps):
        idx = rng.integers(0, data.shape[0], batch)
        t = rng.integers(1, sched.T + 1, batch)
        eps = torch.from_numpy(rng.standard_normal((batch,) + tuple(data.shape[1:])).astype(np.float32)).to(dtype)
        tt = torch.from_numpy(t)
        x_t = sqrt_ab[tt][:, None, None, None] * data[idx] + sqrt_1mab[tt][:, None, None, None] * eps
        with Tape(params) as tape:
            loss = ((forward(tape.params, x_t, tt, dp.config) - eps) ** 2).mean()
            if not math.isfinite(float(loss.detach())):
                raise NonFiniteError(f"non-finite pretraining loss at step {step}")
            g = tape.grad(loss)
        params, state = adam_step(params, g, state, lr)
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d/%d loss %.4f (%.1fs)", step + 1, steps,
                     float(np.mean(losses[-log_every:])), time.time() - t0)
    return DenoiserParams(dp.config, params), losses, state


def save(dp: DenoiserParams, path) -> None:
    arrays = {k: v.detach().to(torch.float32).numpy() for k, v in dp.params.items()}
    container.write(path, MAGIC, FORMAT_VERSION, {"config": asdict(dp.config)}, arrays)


def load(path, expected: DenoiserConfig | None = None) -> DenoiserParams:
    header, arrays = container.read(path, MAGIC, FORMAT_VERSION)
    cfg = DenoiserConfig(**header["config"])
    if expected is not None:
        diff = {k: (v, getattr(cfg, k)) for k, v in asdict(expected).items()
                if k != "seed" and getattr(cfg, k) != v}
        if diff:
            raise ConfigMismatchError(f"checkpoint config differs (expected, found): {diff}")
    shapes = param_shapes(cfg)
    if list(arrays) != list(shapes) or any(arrays[k].shape != shapes[k] for k in shapes):
        raise container.ContainerError("checkpoint arrays do not match their config")
    return DenoiserParams(cfg, ParamSet((k, torch.from_numpy(v)) for k, v in arrays.items()))


def save_adam(state: AdamState, path, extra: dict | None = None) -> None:
    arrays = {}
    for k in state.m:
        arrays["m." + k] = state.m[k].detach().to(torch.float32).numpy()
        arrays["v." + k] = state.v[k].detach().to(torch.float32).numpy()
    header = {"beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
              "step": state.step, "extra": extra or {}}
    container.write(path, b"SDFA", FORMAT_VERSION, header, arrays)


def load_adam(path) -> tuple[AdamState, dict]:
    header, arrays = container.read(path, b"SDFA", FORMAT_VERSION)
    m = {k[2:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("m.")}
    v = {k[2:]: torch.from_numpy(a) for k, a in arrays.items() if k.startswith("v.")}
    st = AdamState(header["beta1"], header["beta2"], header["eps"], header["step"], m, v)
    return st, header["extra"]
