"""Procedural toy "photographs" and parameterised styles with known ground truth.

Images are float64 tensors ``(3, H, W)`` with values in [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

STYLE_KINDS = ("stripes", "blocks", "palette", "speckle")
SUPERSAMPLE = 2


@dataclass(frozen=True)
class StyleSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STYLE_KINDS:
            raise ValueError(f"unknown style kind {self.kind!r}; choose from {STYLE_KINDS}")
        _validate(self.kind, self.params)

    def param_text(self) -> str:
        return ";".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.seed}"


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return repr(float(v)) if isinstance(v, float) else str(v)


def _validate(kind, p):
    need = {"stripes": {"period", "angle", "depth"}, "blocks": {"cell"},
            "palette": {"colors"}, "speckle": {"density", "amplitude"}}[kind]
    missing = need - set(p)
    if missing:
        raise ValueError(f"{kind} style missing parameters {sorted(missing)}")
    if kind == "stripes" and (p["period"] < 2 or not 0 <= p["depth"] <= 1):
        raise ValueError("stripes need period >= 2 and depth in [0, 1]")
    if kind == "blocks" and (int(p["cell"]) != p["cell"] or p["cell"] < 1):
        raise ValueError("blocks need an integer cell size >= 1")
    if kind == "palette":
        cols = np.asarray(p["colors"], dtype=float)
        if cols.shape != (4, 3) or np.abs(cols).max() > 1:
            raise ValueError("palette needs 4 RGB colors in [-1, 1]")
    if kind == "speckle" and (not 0 <= p["density"] <= 1 or p["amplitude"] < 0):
        raise ValueError("speckle needs density in [0, 1] and amplitude >= 0")


def random_style(kind: str, seed: int) -> StyleSpec:
    """A style of the given kind with parameters drawn from ``seed``."""
    rng = np.random.default_rng([seed, STYLE_KINDS.index(kind)])
    if kind == "stripes":
        p = {"period": float(rng.uniform(3.0, 6.0)), "angle": float(rng.uniform(0, 180)),
             "depth": float(rng.uniform(0.5, 0.8))}
    elif kind == "blocks":
        p = {"cell": int(rng.integers(3, 6))}
    elif kind == "palette":
        p = {"colors": [[round(float(c), 4) for c in rng.uniform(-0.9, 0.9, 3)] for _ in range(4)]}
    else:
        p = {"density": float(rng.uniform(0.2, 0.5)), "amplitude": float(rng.uniform(0.6, 1.0))}
    return StyleSpec(kind, p, seed)


def _smooth_background(rng, n):
    c1, c2 = rng.uniform(-0.8, 0.8, (2, 3))
    ang = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:n, 0:n] / (n - 1)
    s = (np.cos(ang) * (xs - 0.5) + np.sin(ang) * (ys - 0.5)) / np.sqrt(0.5) + 0.5
    s = np.clip(s, 0, 1)
    return c1[:, None, None] * (1 - s) + c2[:, None, None] * s


def _shape_mask(rng, n):
    kind = rng.integers(0, 3)
    ys, xs = (np.mgrid[0:n, 0:n] + 0.5) / n
    cx, cy = rng.uniform(0.25, 0.75, 2)
    r = rng.uniform(0.12, 0.3)
    if kind == 0:
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == 1:
        w, h = rng.uniform(0.6, 1.4, 2) * r
        return (np.abs(xs - cx) <= w) & (np.abs(ys - cy) <= h)
    # triangle from three points on a circle
    a = rng.uniform(0, 2 * np.pi) + np.array([0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, 3)
    px, py = cx + r * 1.3 * np.cos(a), cy + r * 1.3 * np.sin(a)
    inside = np.ones_like(xs, dtype=bool)
    sgn = np.sign((px[1] - px[0]) * (py[2] - py[0]) - (py[1] - py[0]) * (px[2] - px[0]))
    for i in range(3):
        j = (i + 1) % 3
        cross = (px[j] - px[i]) * (ys - py[i]) - (py[j] - py[i]) * (xs - px[i])
        inside &= sgn * cross >= 0
    return inside


def _downsample(img, f):
    c, h, w = img.shape
    return img.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))


def gen_content(seed: int, n: int, size: int = 32) -> list[torch.Tensor]:
    """``n`` toy photographs: gradient background plus 1-3 colored shapes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 8:
        raise ValueError("size must be >= 8")
    return [content_image(seed, i, size) for i in range(n)]


def content_image(seed: int, index: int, size: int = 32) -> torch.Tensor:
    """Image ``index`` of the corpus drawn from ``seed``."""
    rng = np.random.default_rng([seed, index])
    big = size * SUPERSAMPLE
    img = _smooth_background(rng, big)
    for _ in range(rng.integers(1, 4)):
        mask = _shape_mask(rng, big)
        col = rng.uniform(-1, 1, 3)
        img = np.where(mask[None], col[:, None, None], img)
    return torch.from_numpy(np.clip(_downsample(img, SUPERSAMPLE), -1, 1))


def apply_style(content: torch.Tensor, spec: StyleSpec) -> torch.Tensor:
    """Composite ``spec`` onto ``content``; deterministic."""
    x = content.to(torch.float64)
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError("content must be shaped (3, H, W)")
    _, h, w = x.shape
    p = spec.params
    rng = np.random.default_rng([spec.seed, 7919])
    if spec.kind == "stripes":
        th = np.deg2rad(p["angle"])
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        phase = rng.uniform(0, 2 * np.pi)
        pos = xs * np.cos(th) + ys * np.sin(th)
        dark = p["depth"] * (0.5 - 0.5 * np.cos(2 * np.pi * pos / p["period"] + phase))
        u = (x + 1) / 2
        out = x - 2 * u * torch.from_numpy(dark)[None]
    elif spec.kind == "blocks":
        c = int(p["cell"])
        if c == 1:
            return x.clone()
        hh, ww = -(-h // c) * c, -(-w // c) * c
        padded = torch.nn.functional.pad(x[None], (0, ww - w, 0, hh - h), mode="replicate")[0]
        means = padded.reshape(3, hh // c, c, ww // c, c).mean(dim=(2, 4))
        out = means.repeat_interleave(c, 1).repeat_interleave(c, 2)[:, :h, :w]
    elif spec.kind == "palette":
        cols = torch.tensor(p["colors"], dtype=torch.float64)
        d = ((x[None] - cols[:, :, None, None]) ** 2).sum(1)
        out = cols[d.argmin(0)].permute(2, 0, 1)
    else:
        mask = rng.random((h, w)) < p["density"]
        noise = rng.standard_normal((3, h, w)) * mask[None]
        u = (x + 1) / 2
        out = x + 2 * u * p["amplitude"] * torch.from_numpy(noise)
    return out.clamp(-1, 1).contiguous()


def manifest_lines(entries) -> list[str]:
    """Tab-separated ``id seed kind params`` lines.

    ``entries`` yields ``(id, seed, kind, param_text)`` tuples.
    """
    return ["\t".join(str(v) for v in e) for e in entries]


def parse_manifest(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"malformed manifest line: {line!r}")
        rows.append({"id": parts[0], "seed": int(parts[1]), "kind": parts[2],
                     "params": _parse_params(parts[3])})
    return rows


def _parse_params(text):
    p = {}
    if not text or text == "-":
        return p
    for item in text.split(";"):
        k, v = item.split("=", 1)
        if k == "colors":
            vals = [float(s) for s in v.split(",")]
            p[k] = [vals[i:i + 3] for i in range(0, len(vals), 3)]
        elif k == "cell":
            p[k] = int(v)
        else:
            try:
                p[k] = float(v)
            except ValueError:
                p[k] = v  # e.g. the id of the content a style was applied to
    return p


def rebuild(row: dict, size: int = 32, content: torch.Tensor | None = None) -> torch.Tensor:
    """Regenerate one manifest entry.

    Content rows carry ``kind == "content"`` and the content's seed and index
    as ``params = {"index": i}``; style rows are applied on ``content``.
    """
    if row["kind"] == "content":
        return content_image(row["seed"], int(row["params"]["index"]), size)
    if content is None:
        raise ValueError("style rows need the content image they apply to")
    params = {k: v for k, v in row["params"].items() if k != "content"}
    return apply_style(content, StyleSpec(row["kind"], params, row["seed"]))
