"""Whole-scene prediction by sliding windows, 100 m LCZ aggregation and map rendering."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import mtlt
from .core import IGNORE, LCZ_CLASSES, SceneTooSmallError, ShapeError
from .model import MTLNet

# Standard LCZ legend colours, indexed like LCZ_CLASSES.
LCZ_PALETTE = np.array(
    [
        (0x8C, 0x00, 0x00),
        (0xD1, 0x00, 0x00),
        (0xFF, 0x00, 0x00),
        (0xBF, 0x4D, 0x00),
        (0xFF, 0x66, 0x00),
        (0xFF, 0x99, 0x55),
        (0xFA, 0xEE, 0x05),
        (0xBC, 0xBC, 0xBC),
        (0xFF, 0xCC, 0xAA),
        (0x55, 0x55, 0x55),
        (0x00, 0x6A, 0x00),
        (0x00, 0xAA, 0x00),
        (0x64, 0x85, 0x25),
        (0xB9, 0xDB, 0x79),
        (0x00, 0x00, 0x00),
        (0xFB, 0xF7, 0xAE),
        (0x6A, 0x6A, 0xFF),
    ],
    dtype=np.uint8,
)
IGNORE_COLOR = (0xFF, 0xFF, 0xFF)


def window_origins(length: int, window: int, stride: int) -> list[int]:
    """Origins at multiples of ``stride`` plus one window flush with the far border."""
    if length < window:
        raise SceneTooSmallError(f"scene extent {length} smaller than window {window}")
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] + window < length:
        origins.append(length - window)
    return origins


def sliding_window_predict(
    model: MTLNet, image: np.ndarray, window: int = 128, overlap: int = 32, batch_size: int = 4
):
    """Predict a [bands, H, W] scene.

    Returns (HSE density [H/2, W/2], LCZ probabilities [K, H, W]); values from
    overlapping windows are averaged with uniform weights. The P2F prior is
    always the model's own HSE prediction.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ShapeError(f"scene must be [bands, H, W], got {image.shape}")
    _, h, w = image.shape
    stride = window - overlap
    if window % 4 or not 0 <= overlap < window or stride % 2:
        raise ShapeError("window divisible by 4, 0 <= overlap < window, even stride")
    if h % 2 or w % 2:
        raise ShapeError("scene dims must be even to align the 20 m grid")
    if h < window or w < window:
        raise SceneTooSmallError(f"scene {(h, w)} smaller than window {window}")
    origins = [(y, x) for y in window_origins(h, window, stride) for x in window_origins(w, window, stride)]
    k = model.cfg.num_classes
    hse_sum = np.zeros((h // 2, w // 2))
    hse_cnt = np.zeros((h // 2, w // 2))
    lcz_sum = np.zeros((k, h, w))
    lcz_cnt = np.zeros((h, w))
    half = window // 2
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for i in range(0, len(origins), batch_size):
            chunk = origins[i : i + batch_size]
            x = torch.as_tensor(np.stack([image[:, y : y + window, x0 : x0 + window] for y, x0 in chunk]), dtype=dtype)
            out = model(x)
            for j, (y, x0) in enumerate(chunk):
                if out.hse is not None:
                    hse_sum[y // 2 : y // 2 + half, x0 // 2 : x0 // 2 + half] += out.hse[j, 0].double().numpy()
                    hse_cnt[y // 2 : y // 2 + half, x0 // 2 : x0 // 2 + half] += 1
                if out.lcz_avg is not None:
                    lcz_sum[:, y : y + window, x0 : x0 + window] += out.lcz_avg[j].double().numpy()
                    lcz_cnt[y : y + window, x0 : x0 + window] += 1
    hse = (hse_sum / hse_cnt).astype(np.float32) if model.hse is not None else None
    lcz = (lcz_sum / lcz_cnt).astype(np.float32) if model.lcz is not None else None
    return hse, lcz


def aggregate_lcz(prob_map: np.ndarray, block: int = 10) -> np.ndarray:
    """Average probabilities over ``block`` x ``block`` cells, then argmax.

    Ties go to the lowest class index; partial edge blocks are dropped.
    """
    p = np.asarray(prob_map, dtype=np.float64)
    k, h, w = p.shape
    by, bx = h // block, w // block
    means = p[:, : by * block, : bx * block].reshape(k, by, block, bx, block).mean(axis=(2, 4))
    return means.argmax(axis=0).astype(np.uint8)


def aggregate_labels(labels: np.ndarray, block: int = 10, k: int = len(LCZ_CLASSES)) -> np.ndarray:
    """Block majority of a label grid ignoring IGNORE; all-IGNORE blocks stay IGNORE."""
    lab = np.asarray(labels)
    h, w = lab.shape
    by, bx = h // block, w // block
    blocks = lab[: by * block, : bx * block].reshape(by, block, bx, block).transpose(0, 2, 1, 3).reshape(by, bx, -1)
    out = np.full((by, bx), IGNORE, dtype=np.uint8)
    for i in range(by):
        for j in range(bx):
            vals = blocks[i, j]
            vals = vals[vals != IGNORE]
            if vals.size:
                out[i, j] = np.bincount(vals, minlength=k).argmax()
    return out


def density_to_png(density: np.ndarray, path) -> None:
    g = np.round(np.clip(density, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(g).save(path)


def classes_to_png(classes: np.ndarray, path) -> None:
    cls = np.asarray(classes)
    rgb = np.empty(cls.shape + (3,), dtype=np.uint8)
    rgb[:] = IGNORE_COLOR
    valid = cls < len(LCZ_PALETTE)
    rgb[valid] = LCZ_PALETTE[cls[valid]]
    Image.fromarray(rgb).save(path)


def render_maps(hse: np.ndarray, lcz: np.ndarray, out_dir) -> dict:
    """Write PNG previews and raw MTLT tensors; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "hse_png": out / "hse.png",
        "lcz_png": out / "lcz.png",
        "hse": out / "hse.mtlt",
        "lcz": out / "lcz.mtlt",
    }
    density_to_png(hse, paths["hse_png"])
    classes_to_png(lcz, paths["lcz_png"])
    mtlt.write(paths["hse"], np.asarray(hse, dtype=np.float32))
    mtlt.write(paths["lcz"], np.asarray(lcz, dtype=np.uint8))
    return paths
