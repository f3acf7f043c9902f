"""Tiled full-frame denoising and crop export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import CropOutOfBounds, InvalidConfig


@dataclass(frozen=True)
class TilingSpec:
    tile: int = 256
    overlap: int = 32
    blend: str = "linear-ramp"

    def __post_init__(self):
        if not 0 <= self.overlap < self.tile:
            raise InvalidConfig("overlap must satisfy 0 <= overlap < tile")
        if self.blend not in ("linear-ramp", "uniform-average"):
            raise InvalidConfig(f"unknown blend {self.blend!r}")

    @property
    def stride(self) -> int:
        return self.tile - self.overlap


def tile_origins(length: int, tile: int, stride: int) -> list[int]:
    """Tile starts covering [0, length); the last tile is aligned to the end."""
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def blend_window(spec: TilingSpec) -> np.ndarray:
    """Strictly positive 2-D weights; ramps linearly across the overlap."""
    if spec.blend == "uniform-average" or spec.overlap == 0:
        return np.ones((spec.tile, spec.tile))
    i = np.arange(spec.tile)
    ramp = np.minimum.reduce([
        np.ones(spec.tile), (i + 1) / (spec.overlap + 1), (spec.tile - i) / (spec.overlap + 1)
    ])
    return np.outer(ramp, ramp)


def _as_model_fn(model):
    if isinstance(model, torch.nn.Module):
        def run(batch):
            was_training = model.training
            model.eval()
            try:
                with torch.no_grad():
                    dtype = next(model.parameters()).dtype
                    return model(batch.to(dtype)).double()
            finally:
                model.train(was_training)
        return run

    def run(batch):
        with torch.no_grad():
            return torch.as_tensor(model(batch), dtype=torch.float64)
    return run


def denoise_frame(model, frame, spec: TilingSpec = TilingSpec(), batch_size: int = 8,
                  tile_order: str = "raster") -> np.ndarray:
    """Denoise an H x W frame with overlapping tiles.

    Frames smaller than a tile are reflect-padded up to the tile size and
    cropped back. Tile outputs are accumulated as weighted sums and divided by
    the summed weights, so the blend is a convex combination at every pixel.
    A frame covered by a single tile is one forward pass with no blending.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise InvalidConfig(f"expected an H x W frame, got {frame.shape}")
    h, w = frame.shape
    pad_h, pad_w = max(0, spec.tile - h), max(0, spec.tile - w)
    padded = np.pad(frame, ((0, pad_h), (0, pad_w)), mode="reflect") if pad_h or pad_w else frame
    ph, pw = padded.shape
    origins = [(r, c) for r in tile_origins(ph, spec.tile, spec.stride)
               for c in tile_origins(pw, spec.tile, spec.stride)]
    if tile_order == "reverse":
        origins = origins[::-1]
    elif tile_order != "raster":
        raise ValueError(f"unknown tile order {tile_order!r}")

    run = _as_model_fn(model)
    t = spec.tile
    if len(origins) == 1:
        r, c = origins[0]
        out = run(torch.from_numpy(np.ascontiguousarray(padded[None, None, r:r + t, c:c + t])))
        return out.cpu().numpy()[0, 0][:h, :w]
    window = blend_window(spec)
    acc = np.zeros_like(padded)
    weight = np.zeros_like(padded)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        batch = np.stack([padded[r:r + t, c:c + t] for r, c in chunk])[:, None]
        out = run(torch.from_numpy(batch)).cpu().numpy()[:, 0]
        for (r, c), tile_out in zip(chunk, out):
            acc[r:r + t, c:c + t] += tile_out * window
            weight[r:r + t, c:c + t] += window
    return (acc / weight)[:h, :w]


def _check_box(shape, box):
    r0, r1, c0, c1 = box
    if not (0 <= r0 < r1 <= shape[0] and 0 <= c0 < c1 <= shape[1]):
        raise CropOutOfBounds(f"crop {box} outside frame {shape}")


def to_uint8(arr, lo: float, hi: float) -> np.ndarray:
    scale = (np.asarray(arr, dtype=np.float64) - lo) / (hi - lo) if hi > lo else np.zeros(np.shape(arr))
    return np.round(np.clip(scale, 0, 1) * 255).astype(np.uint8)


def export_crops(noisy, denoised, gt, crop_box, out_dir, prefix: str = "") -> dict:
    """Write 8-bit PNG crops of the three images with one shared display range.

    Returns ``{"noisy": path, "denoised": path, "gt": path}``.
    """
    from PIL import Image

    images = {"noisy": noisy, "denoised": denoised, "gt": gt}
    shape = np.shape(noisy)
    for key, img in images.items():
        if np.shape(img) != shape:
            raise CropOutOfBounds(f"{key} has shape {np.shape(img)}, expected {shape}")
    _check_box(shape, crop_box)
    r0, r1, c0, c1 = crop_box
    crops = {k: np.asarray(v, dtype=np.float64)[r0:r1, c0:c1] for k, v in images.items()}
    lo = min(float(c.min()) for c in crops.values())
    hi = max(float(c.max()) for c in crops.values())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, crop in crops.items():
        path = out_dir / f"{prefix}{key}_crop_{r0}_{r1}_{c0}_{c1}.png"
        Image.fromarray(to_uint8(crop, lo, hi)).save(path)
        paths[key] = path
    return paths


def write_denoised(path, denoised, normalization=None, raw_path: Optional[str] = None):
    """Float32 TIFF in normalized space; optionally a uint16 TIFF in raw units."""
    import tifffile

    tifffile.imwrite(path, np.asarray(denoised, dtype=np.float32))
    if raw_path is not None:
        if normalization is None:
            raise InvalidConfig("raw-space export needs the normalization record")
        raw = normalization.invert(denoised)
        tifffile.imwrite(raw_path, np.clip(np.round(raw), 0, 65535).astype(np.uint16))
