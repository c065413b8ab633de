#!/usr/bin/env python3
"""
Distilled Image Grid Rendering with Pillow
One row per class, one column per synthetic image, lossless PNG output
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch
from PIL import Image

from core.datakit.dataset import ChannelLayout, denormalize_rows
from core.errors import LayoutError
from core.synthetic import SyntheticDataset

logger = logging.getLogger(__name__)

DEFAULT_ZOOM = 4
GAP_COLOR = 255


def _resolve_layout(syn: SyntheticDataset, layout: Optional[ChannelLayout]) -> ChannelLayout:
    layout = layout or syn.layout
    if layout is None:
        raise LayoutError("No channel layout given and the synthetic dataset carries none")
    if syn.images.shape[1] != layout.input_dim:
        raise LayoutError(f"Rows of width {syn.images.shape[1]} cannot be reshaped to {layout.image_shape}")
    return layout


def display_values(syn: SyntheticDataset, layout: Optional[ChannelLayout] = None) -> np.ndarray:
    """De-normalized rows mapped to [0, 1] as clip(0.5 + v/2), shape (rows, H, W, bands)"""
    layout = _resolve_layout(syn, layout)
    raw = denormalize_rows(syn.images.detach().to(torch.float64), layout, syn.norm_mean, syn.norm_std)
    cells = raw.reshape(-1, *layout.image_shape).numpy()
    shown = np.clip(0.5 + cells / 2.0, 0.0, 1.0)

    if layout.channels == 1:
        bands = shown[:, 0:1]
    elif layout.channels == 2:
        bands = np.concatenate([shown, shown.mean(axis=1, keepdims=True)], axis=1)
    elif layout.channels == 3:
        bands = shown
    else:
        bands = shown.mean(axis=1, keepdims=True)
    return bands.transpose(0, 2, 3, 1)


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def render_grid(syn: SyntheticDataset, layout: Optional[ChannelLayout] = None,
                zoom: int = DEFAULT_ZOOM) -> Image.Image:
    """Grid of (classes * cellH) x (ipc * cellW) pixels with cell = zoomed image"""
    if zoom < 1:
        raise LayoutError(f"Zoom must be a positive integer, got {zoom}")
    layout = _resolve_layout(syn, layout)
    cells = _to_uint8(display_values(syn, layout))

    _, height, width, bands = cells.shape
    grid = cells.reshape(syn.num_classes, syn.ipc, height, width, bands)
    grid = grid.transpose(0, 2, 1, 3, 4).reshape(syn.num_classes * height, syn.ipc * width, bands)
    grid = np.repeat(np.repeat(grid, zoom, axis=0), zoom, axis=1)

    if bands == 1:
        return Image.fromarray(grid[:, :, 0])
    return Image.fromarray(grid)


def side_by_side(initial: Image.Image, final: Image.Image, gap: int) -> Image.Image:
    """initial | gap | final on a white canvas"""
    canvas = Image.new(final.mode, (initial.width + gap + final.width, max(initial.height, final.height)),
                       color=GAP_COLOR if final.mode == "L" else (GAP_COLOR,) * 3)
    canvas.paste(initial, (0, 0))
    canvas.paste(final, (initial.width + gap, 0))
    return canvas


def export_image_grid(syn: SyntheticDataset, path: Union[str, Path], layout: Optional[ChannelLayout] = None,
                      initial: Optional[SyntheticDataset] = None, zoom: int = DEFAULT_ZOOM) -> List[Path]:
    """Write the grid as PNG; with an initial snapshot also write <stem>_initial_vs_final.png"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    final_image = render_grid(syn, layout, zoom)
    final_image.save(path, format="PNG")
    written = [path]

    if initial is not None:
        initial_image = render_grid(initial, layout, zoom)
        pair_path = path.with_name(f"{path.stem}_initial_vs_final.png")
        side_by_side(initial_image, final_image, gap=zoom).save(pair_path, format="PNG")
        written.append(pair_path)

    logger.info(f"Image grid written: {path} ({final_image.width}x{final_image.height})")
    return written


def grid_delta(initial: SyntheticDataset, final: SyntheticDataset,
               layout: Optional[ChannelLayout] = None) -> float:
    """Mean absolute change of displayed pixel values in [0, 1]"""
    before = display_values(initial, layout)
    after = display_values(final, layout)
    if before.shape != after.shape:
        raise LayoutError(f"Grids differ in shape: {before.shape} vs {after.shape}")
    return float(np.abs(after - before).mean())
