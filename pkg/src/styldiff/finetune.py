"""Style-transfer fine-tuning of the denoiser from precomputed DDIM latents."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import container
from .denoiser import Denoiser, DenoiserParams, forward
from .diffusion import _x0_hat, ddim_reverse_step, generate, invert
from .disentangle import LossWeights, Projector, loss_dir, loss_l1, combine_sd, style_direction
from .disentangle import loss_sr as _loss_sr
from .schedule import NoiseSchedule, TimestepPlan, make_plan
from .tensor import AdamState, NonFiniteError, Tape, adam_step

log = logging.getLogger(__name__)

STORE_MAGIC = b"SDFL"
STORE_VERSION = 1


class ProvenanceError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneConfig:
    T_trans: int = 301
    S_for: int = 40
    S_rev: int = 6
    K: int = 5
    K_s: int = 50
    N: int = 16
    base_lr: float = 1e-4
    lr_growth: float = 0.2
    weights: LossWeights = field(default_factory=LossWeights)
    sr_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.T_trans, self.S_for, self.N) < 1 or self.K < 0 or self.K_s < 0:
            raise ValueError("fine-tuning counts must be positive")
        if self.S_rev < 2:
            raise ValueError("S_rev must be >= 2")

    def lr_at(self, epoch: int) -> float:
        """Epoch-k learning rate base_lr * (1 + lr_growth * k), k from 0."""
        return self.base_lr * (1.0 + self.lr_growth * epoch)


PAPER_PRESET = FinetuneConfig(N=50, base_lr=4e-6)
PHOTO_PRESET = FinetuneConfig(T_trans=101)


@dataclass
class LatentStore:
    contents: dict[str, torch.Tensor]
    style: torch.Tensor
    plan: TimestepPlan
    checksum: str

    def check(self, base: DenoiserParams, plan: TimestepPlan | None = None) -> None:
        found = base.checksum()
        if found != self.checksum:
            raise ProvenanceError(f"latent store made with denoiser {self.checksum}, "
                                  f"got {found}")
        if plan is not None and plan.steps != self.plan.steps:
            raise ProvenanceError(f"latent store plan {self.plan.steps[:3]}..{self.plan.T_return} "
                                  f"does not match {plan.steps[:3]}..{plan.T_return}")

    def save(self, path) -> None:
        arrays = {"style": self.style.detach().to(torch.float32).numpy()}
        for k, v in self.contents.items():
            arrays["content/" + k] = v.detach().to(torch.float32).numpy()
        header = {"plan": list(self.plan.steps), "checksum": self.checksum}
        container.write(path, STORE_MAGIC, STORE_VERSION, header, arrays)

    @classmethod
    def load(cls, path, base: DenoiserParams | None = None, plan: TimestepPlan | None = None):
        header, arrays = container.read(path, STORE_MAGIC, STORE_VERSION)
        store = cls(
            {k[len("content/"):]: torch.from_numpy(v) for k, v in arrays.items()
             if k.startswith("content/")},
            torch.from_numpy(arrays["style"]),
            TimestepPlan(tuple(header["plan"])),
            header["checksum"],
        )
        if base is not None:
            store.check(base, plan)
        return store


def _handle(den, sched):
    return den if callable(den) else Denoiser(den, sched)


def precompute_latents(contents: dict[str, torch.Tensor], style_content: torch.Tensor,
                       cfg: FinetuneConfig, base: DenoiserParams,
                       sched: NoiseSchedule) -> LatentStore:
    """DDIM-invert every content and the style content with the base model."""
    den = Denoiser(base, sched)
    size = base.config.image_size
    plan = make_plan(cfg.S_for, cfg.T_trans, sched.T)
    dtype = base.params.dtype
    for k, v in list(contents.items()) + [("style", style_content)]:
        if tuple(v.shape) != (3, size, size):
            raise ValueError(f"image {k} has shape {tuple(v.shape)}, denoiser expects (3, {size}, {size})")
    ids = list(contents)
    batch = torch.stack([contents[k].to(dtype) for k in ids] + [style_content.to(dtype)])
    lat = invert(batch, plan, den, sched)
    return LatentStore({k: lat[i].clone() for i, k in enumerate(ids)}, lat[-1].clone(),
                       plan, base.checksum())


@dataclass
class FinetuneLog:
    """Per-gradient-step records ``(epoch, substep, iteration, t, loss)``."""

    rows: list[tuple] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def losses(self, substep: str, epoch: int | None = None) -> list[float]:
        return [r[4] for r in self.rows if r[1] == substep and (epoch is None or r[0] == epoch)]

    def epoch_mean(self, substep: str, epoch: int) -> float:
        xs = self.losses(substep, epoch)
        return math.fsum(xs) / len(xs) if xs else float("nan")

    def lines(self) -> list[str]:
        out = ["epoch\tsubstep\titeration\tt\tloss"]
        out += [f"{e}\t{s}\t{i}\t{t}\t{v:.8f}" for e, s, i, t, v in self.rows]
        return out


def step_loss(fwd, params, x, t, sched, loss_fn):
    """Loss of one reverse step's clean-image prediction; returns ``(loss, eps)``."""
    eps = fwd(params, x, t)
    return loss_fn(_x0_hat(x, t, eps, sched)), eps


def sr_objective(style):
    return lambda pred: _loss_sr(pred, style)


def sd_objective(proj, content_c, d_s, weights=LossWeights()):
    def loss(pred):
        d_cs = style_direction(proj, pred, content_c).vector
        return combine_sd(loss_l1(d_cs, d_s), loss_dir(d_cs, d_s), weights)
    return loss


def _chain_steps(fwd, params, x, plan, sched, loss_fn, state, lr, record):
    """Reverse chain with one Adam step per reverse step; the loss sees only
    the current step's clean-image prediction."""
    for t_from, t_to in plan.reverse_pairs():
        with Tape(params) as tape:
            loss, eps = step_loss(fwd, tape.params, x, t_from, sched, loss_fn)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at t={t_from} ({record})")
            g = tape.grad(loss)
        x = ddim_reverse_step(x, t_from, t_to, eps.detach(), sched)
        params, state = adam_step(params, g, state, lr)
        yield params, state, t_from, value


def finetune(base: DenoiserParams, store: LatentStore, style: torch.Tensor,
             style_content: torch.Tensor, contents_c: dict[str, torch.Tensor],
             cfg: FinetuneConfig, proj: Projector, sched: NoiseSchedule):
    """Returns ``(tuned params, FinetuneLog)``.

    Each epoch runs K_s style-reconstruction passes over the style latent, then
    one disentanglement pass per content latent, stepping Adam at every
    reverse step.
    """
    store.check(base)
    plan = make_plan(cfg.S_rev, cfg.T_trans, sched.T)
    params = base.params.clone()
    dtype = params.dtype
    state = AdamState()
    style = style.to(dtype)
    style_content = style_content.to(dtype)
    with torch.no_grad():
        d_s = style_direction(proj, style, style_content).vector
    if float(d_s.norm()) == 0.0:
        raise ValueError("style image and its content are identical; no style direction")
    contents_c = {k: v.to(dtype) for k, v in contents_c.items()}
    missing = set(contents_c) - set(store.contents)
    if missing:
        raise ProvenanceError(f"no stored latents for contents {sorted(missing)}")
    flog = FinetuneLog(config={**asdict(cfg), "lr_schedule": "base_lr * (1 + lr_growth * k), k = 0..K-1"})

    sr_loss = sr_objective(style)

    def fwd(p, x, t):
        return forward(p, x, t, base.config)

    for epoch in range(cfg.K):
        lr = cfg.lr_at(epoch)
        flog.lrs.append(lr)
        if cfg.sr_enabled:
            for i in range(cfg.K_s):
                for params, state, t, v in _chain_steps(fwd, params, store.style.to(dtype), plan,
                                                        sched, sr_loss, state, lr, f"epoch {epoch} SR {i}"):
                    flog.rows.append((epoch, "SR", i, t, v))
        for i, (cid, c_c) in enumerate(contents_c.items()):
            sd_loss = sd_objective(proj, c_c, d_s, cfg.weights)
            for params, state, t, v in _chain_steps(fwd, params, store.contents[cid].to(dtype), plan,
                                                    sched, sd_loss, state, lr, f"epoch {epoch} SD {cid}"):
                flog.rows.append((epoch, "SD", i, t, v))
        log.info("epoch %d lr %.3g: SR %.4f SD %.4f", epoch, lr,
                 flog.epoch_mean("SR", epoch), flog.epoch_mean("SD", epoch))
    return DenoiserParams(base.config, params), flog


def stylize(content: torch.Tensor, tuned: DenoiserParams, cfg: FinetuneConfig,
            sched: NoiseSchedule, rng: np.random.Generator | None = None,
            base: DenoiserParams | None = None, T_trans: int | None = None) -> torch.Tensor:
    """Stylise a style-removed content image (or a batch of them).

    Deterministic path: invert with ``base`` (defaults to ``tuned``) over
    plan(S_for, T) and regenerate with ``tuned`` over plan(S_rev, T). With
    ``rng`` the latent is a fresh stochastic forward sample instead.
    """
    T = T_trans if T_trans is not None else cfg.T_trans
    gen_den = Denoiser(tuned, sched)
    x0 = content.to(tuned.params.dtype)
    rev = make_plan(cfg.S_rev, T, sched.T)
    if rng is not None:
        out = generate(None, rev, gen_den, stochastic_start=(x0, rng), sched=sched).final
    else:
        inv_den = Denoiser(base if base is not None else tuned, sched)
        lat = invert(x0, make_plan(cfg.S_for, T, sched.T), inv_den, sched)
        out = generate(lat, rev, gen_den, sched=sched).final
    return out.clamp(-1, 1)


def with_overrides(cfg: FinetuneConfig, **kw) -> FinetuneConfig:
    return replace(cfg, **kw)
