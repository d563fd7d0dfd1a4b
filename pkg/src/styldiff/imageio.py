"""8-bit RGB PNG I/O and contact sheets.

Byte ``p`` maps to ``2p/255 - 1``; encoding clamps to [-1, 1] and rounds
half away from zero, so decode(encode(decode(b))) == decode(b).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

SEPARATOR = 2
LABEL_HEIGHT = 12


def to_bytes(img: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` in [-1, 1] -> ``(H, W, 3)`` uint8."""
    x = img.detach().to(torch.float64).clamp(-1, 1).numpy()
    v = (x + 1.0) * 127.5
    q = np.floor(v + 0.5)  # v >= 0, so this is round-half-away-from-zero
    return np.ascontiguousarray(q.astype(np.uint8).transpose(1, 2, 0))


def from_bytes(arr: np.ndarray) -> torch.Tensor:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] < 3:
        raise ValueError(f"expected an RGB image, got shape {a.shape}")
    x = a[:, :, :3].astype(np.float64).transpose(2, 0, 1) * (2.0 / 255.0) - 1.0
    return torch.from_numpy(np.ascontiguousarray(x))


def save_png(img: torch.Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_bytes(img), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        return from_bytes(np.asarray(im.convert("RGB")))


def contact_sheet(images, rows: int, cols: int, labels=None, scale: int = 1) -> np.ndarray:
    """Tile equally sized images row-major with 2-px white separators and a
    label strip under each tile. Returns ``(H, W, 3)`` uint8."""
    images = list(images)
    if not images:
        raise ValueError("no images to tile")
    if len(images) > rows * cols:
        raise ValueError(f"{len(images)} images do not fit a {rows}x{cols} grid")
    tiles = [to_bytes(im) if isinstance(im, torch.Tensor) else np.asarray(im, dtype=np.uint8)
             for im in images]
    h, w = tiles[0].shape[:2]
    if any(t.shape[:2] != (h, w) for t in tiles):
        raise ValueError("all grid images must share one size")
    if scale > 1:
        tiles = [t.repeat(scale, 0).repeat(scale, 1) for t in tiles]
        h, w = h * scale, w * scale
    lab_h = LABEL_HEIGHT if labels is not None else 0
    cell_h = h + lab_h
    sheet = np.full((rows * cell_h + (rows - 1) * SEPARATOR, cols * w + (cols - 1) * SEPARATOR, 3),
                    255, dtype=np.uint8)
    canvas = Image.fromarray(sheet)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        y0 = r * (cell_h + SEPARATOR)
        x0 = c * (w + SEPARATOR)
        canvas.paste(Image.fromarray(tile), (x0, y0))
        if labels is not None and i < len(labels) and labels[i]:
            draw.text((x0 + 1, y0 + h), str(labels[i]), fill=(0, 0, 0), font=font)
    return np.asarray(canvas)


def save_sheet(sheet: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet, mode="RGB").save(path, format="PNG", optimize=False)
