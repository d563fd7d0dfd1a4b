"""Array arithmetic, explicit gradient recording and Adam.

Arrays are ``torch.Tensor`` values; torch's autograd does the reverse-mode
bookkeeping. Recording is opt-in: leaves of a :class:`ParamSet` only track
gradients inside a :class:`Tape`, so inference paths build no graph.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import torch
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(x: torch.Tensor, what: str = "value") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite {what} (shape {tuple(x.shape)})")
    return x


class ParamSet(Mapping[str, torch.Tensor]):
    """Ordered, uniquely named collection of trainable arrays."""

    def __init__(self, items=()):
        self._d: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, value in (items.items() if isinstance(items, Mapping) else items):
            if name in self._d:
                raise KeyError(f"duplicate parameter name {name!r}")
            self._d[name] = value

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._d[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._d)

    def __len__(self) -> int:
        return len(self._d)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} arrays, {self.numel()} values)"

    def numel(self) -> int:
        return sum(v.numel() for v in self._d.values())

    def replace(self, updates: Mapping[str, torch.Tensor]) -> "ParamSet":
        out = ParamSet(self._d)
        for k, v in updates.items():
            if k not in out._d:
                raise KeyError(k)
            out._d[k] = v
        return out

    def to(self, dtype: torch.dtype) -> "ParamSet":
        return ParamSet((k, v.detach().to(dtype)) for k, v in self._d.items())

    def clone(self) -> "ParamSet":
        return ParamSet((k, v.detach().clone()) for k, v in self._d.items())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self._d.values())).dtype


class Tape:
    """Recording context for one loss evaluation.

    >>> p = ParamSet({"w": torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)})
    >>> with Tape(p) as tape:
    ...     loss = (tape.params["w"] ** 2).sum()
    ...     g = tape.grad(loss)
    >>> g["w"].tolist()
    [2.0, 4.0, 6.0]
    """

    def __init__(self, params: ParamSet):
        self._source = params
        self.params: ParamSet | None = None
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = torch.is_grad_enabled()
        torch.set_grad_enabled(True)
        self.params = ParamSet(
            (k, v.detach().requires_grad_(True)) for k, v in self._source.items()
        )
        return self

    def __exit__(self, *exc) -> None:
        torch.set_grad_enabled(self._prev)

    def grad(self, loss: torch.Tensor, strict: bool = False) -> dict[str, torch.Tensor]:
        return grad(loss, self.params, strict=strict)


def grad(loss: torch.Tensor, params: ParamSet, strict: bool = False) -> dict[str, torch.Tensor]:
    """d(loss)/d(p) for every array in ``params``.

    Arrays that do not influence ``loss`` get zero gradients, unless
    ``strict`` is set, in which case they are an error.
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")
    names = list(params)
    leaves = [params[n] for n in names]
    if not loss.requires_grad:
        if strict and names:
            raise ValueError(f"parameters not on the recorded path: {names}")
        return {n: torch.zeros_like(v) for n, v in zip(names, leaves)}
    gs = torch.autograd.grad(loss, leaves, allow_unused=True)
    missing = [n for n, g in zip(names, gs) if g is None]
    if strict and missing:
        raise ValueError(f"parameters not on the recorded path: {missing}")
    out = {n: (torch.zeros_like(v) if g is None else g.detach())
           for n, v, g in zip(names, leaves, gs)}
    _check_all_finite(out, "gradient")
    return out


def _check_all_finite(arrays: Mapping[str, torch.Tensor], what: str) -> None:
    # one fused reduction; per-array checks only to name the culprit
    if not bool(torch.isfinite(torch.stack([a.sum() for a in arrays.values()])).all()):
        for name, a in arrays.items():
            check_finite(a, f"{what} of {name}")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: ParamSet, grads: Mapping[str, torch.Tensor], state: AdamState,
              lr: float) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    names = list(params)
    ps = [params[n].detach() for n in names]
    gs = []
    for n, p in zip(names, ps):
        g = grads[n]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape "
                             f"{tuple(p.shape)} for {n!r}")
        gs.append(g.detach().to(p.dtype))
    _check_all_finite(dict(zip(names, gs)), "gradient")
    if state.step == 0:
        ms = torch._foreach_mul(gs, 1 - b1)
        vs = torch._foreach_mul(torch._foreach_mul(gs, gs), 1 - b2)
    else:
        ms = torch._foreach_add(torch._foreach_mul([state.m[n] for n in names], b1), gs, alpha=1 - b1)
        vs = torch._foreach_add(torch._foreach_mul([state.v[n] for n in names], b2),
                                torch._foreach_mul(gs, gs), alpha=1 - b2)
    if lr == 0:
        new_ps = ps
    else:
        denom = torch._foreach_add(torch._foreach_sqrt(torch._foreach_div(vs, c2)), state.eps)
        upd = torch._foreach_div(torch._foreach_div(ms, c1), denom)
        new_ps = torch._foreach_sub(ps, torch._foreach_mul(upd, lr))
    new_state = AdamState(b1, b2, state.eps, step, dict(zip(names, ms)), dict(zip(names, vs)))
    return params.replace(dict(zip(names, new_ps))), new_state


# Primitives. Broadcasting is limited to scalar-with-array.

def _same_shape(a, b, op):
    if isinstance(a, torch.Tensor) and isinstance(b, torch.Tensor):
        if a.shape != b.shape and a.dim() and b.dim():
            raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b):
    _same_shape(a, b, "add")
    return check_finite(a + b)


def sub(a, b):
    _same_shape(a, b, "sub")
    return check_finite(a - b)


def mul(a, b):
    _same_shape(a, b, "mul")
    return check_finite(a * b)


def matmul(a, b):
    return check_finite(a @ b)


def conv2d(x, w, bias=None, stride=1, padding=0, padding_mode="zeros"):
    if padding_mode != "zeros" and padding:
        x = F.pad(x, (padding,) * 4, mode=padding_mode)
        padding = 0
    return check_finite(F.conv2d(x, w, bias, stride=stride, padding=padding))


def conv_transpose2d(x, w, bias=None, stride=1, padding=0):
    return check_finite(F.conv_transpose2d(x, w, bias, stride=stride, padding=padding))


def sum_(x, dim=None):
    return x.sum() if dim is None else x.sum(dim)


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim)


def abs_(x):
    return x.abs()


def sqrt(x):
    if bool((x < 0).any()):
        raise NonFiniteError("sqrt of negative value")
    return check_finite(x.sqrt())


def leaky_relu(x, slope=0.2):
    return F.leaky_relu(x, slope)


def clamp(x, lo, hi):
    return x.clamp(lo, hi)


def cosine_similarity(a, b):
    """Cosine of two flat vectors; zero norms are an error."""
    a = a.reshape(-1)
    b = b.reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.numel()} vs {b.numel()}")
    na = a.norm()
    nb = b.norm()
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return check_finite((a @ b) / (na * nb))
