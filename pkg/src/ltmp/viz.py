"""Token-retention pictures written as binary PPM (P6).

Convert to PNG with e.g. ``python -c "from PIL import Image; Image.open('x.ppm').save('x.png')"``
or ImageMagick ``convert x.ppm x.png``.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
import torch

from .data import to_float
from .model import LTMPViT

GRID_COLOR = (40, 40, 40)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an [H, W, 3] raster, got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 image")
    w, h = int(parts[1]), int(parts[2])
    data = parts[4]
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def group_color(owner_id: int) -> tuple[int, int, int]:
    """Colour of a merged group, derived only from the id of the token it collapsed into."""
    hue = (owner_id * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.7, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _upscale(img: np.ndarray, scale: int) -> np.ndarray:
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def _draw_grid(img: np.ndarray, cell: int) -> np.ndarray:
    img = img.copy()
    img[::cell, :] = GRID_COLOR
    img[:, ::cell] = GRID_COLOR
    return img


def render_owner(image: np.ndarray, owner, patch_size: int, scale: int = 8) -> np.ndarray:
    """Raster for one layer.

    ``owner[i]`` is the token that patch ``i`` (1-based, 0 is CLS) currently
    belongs to, or -1 if pruned. Pruned patches are black, patches sharing an
    owner with others take that group's colour, singletons keep their pixels.
    """
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    grid = w // patch_size
    owner = np.asarray(owner)[1:]
    out = image.copy()
    ids, counts = np.unique(owner[owner >= 0], return_counts=True)
    group_size = dict(zip(ids.tolist(), counts.tolist()))
    for i, o in enumerate(owner.tolist()):
        r, c = divmod(i, grid)
        sl = (slice(r * patch_size, (r + 1) * patch_size), slice(c * patch_size, (c + 1) * patch_size))
        if o < 0:
            out[sl] = 0
        elif group_size[o] > 1:
            out[sl] = group_color(o)
    return _draw_grid(_upscale(out, scale), patch_size * scale)


def patchified(image: np.ndarray, patch_size: int, scale: int = 8) -> np.ndarray:
    return _draw_grid(_upscale(np.asarray(image, dtype=np.uint8), scale), patch_size * scale)


@torch.no_grad()
def visualize_tokens(model: LTMPViT, image: np.ndarray, out_dir, scale: int = 8) -> list[Path]:
    """Write ``patchified.ppm``, ``layer_XX.ppm`` per block and a side-by-side ``strip.ppm``."""
    cfg = model.cfg
    image = np.asarray(image, dtype=np.uint8)
    if image.shape != (cfg.image_size, cfg.image_size, cfg.in_chans):
        raise ValueError(f"image shape {image.shape} does not match the model's "
                         f"{(cfg.image_size, cfg.image_size, cfg.in_chans)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = model(to_float(image[None]), mode="inference", collect=True)
    trace = out.trace(cfg.n_tokens)
    panels = [("patchified", patchified(image, cfg.patch_size, scale))]
    for layer in range(cfg.blocks):
        owner = trace.record(0, layer)["owner"]
        panels.append((f"layer_{layer + 1:02d}", render_owner(image, owner, cfg.patch_size, scale)))
    paths = []
    for name, raster in panels:
        p = out_dir / f"{name}.ppm"
        write_ppm(p, raster)
        paths.append(p)
    gap = np.full((panels[0][1].shape[0], scale, 3), 255, dtype=np.uint8)
    strip = [_upscale(image, scale), gap]
    for _, raster in panels:
        strip += [raster, gap]
    write_ppm(out_dir / "strip.ppm", np.concatenate(strip[:-1], axis=1))
    (out_dir / "trace.jsonl").write_text(trace.to_jsonl())
    return paths
