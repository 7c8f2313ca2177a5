from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from docnav.corpus import Document, page_token_cost
from docnav.log_helper import log

"""
Global thumbnail overview: every page shrunk to a 256x256 letterboxed thumbnail, tiled
row-major into near-square grids of at most G pages, each cell topped by a header band
carrying the page's absolute index.
"""

THUMB_SIZE = 256
DEFAULT_GROUP_CAPACITY = 36
DEFAULT_HEADER_HEIGHT = 28

SIDECAR_NAME = "overview.json"

# 5x7 bitmap digits, one string per row
DIGIT_GLYPHS: Dict[str, Tuple[str, ...]] = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
GLYPH_WIDTH = 5
GLYPH_HEIGHT = 7
GLYPH_SPACING = 1


def partition_groups(n_pages: int, capacity: int = DEFAULT_GROUP_CAPACITY) -> List[range]:
    """Consecutive 1-based page ranges of at most `capacity` pages each."""
    if n_pages < 1 or capacity < 1:
        raise ValueError(f"need n_pages >= 1 and capacity >= 1, got {n_pages}, {capacity}")
    return [
        range(start, min(start + capacity, n_pages + 1))
        for start in range(1, n_pages + 1, capacity)
    ]


def grid_dims(n: int) -> Tuple[int, int]:
    """Near-square (rows, cols) grid for n cells: R = ceil(sqrt(n)), C = ceil(n / R)."""
    if n < 1:
        raise ValueError(f"grid needs at least one cell, got {n}")
    rows = math.isqrt(n)
    if rows * rows < n:
        rows += 1
    return rows, math.ceil(n / rows)


def _digit_mask(label: str) -> np.ndarray:
    cols = len(label) * (GLYPH_WIDTH + GLYPH_SPACING) - GLYPH_SPACING
    mask = np.zeros((GLYPH_HEIGHT, cols), dtype=bool)
    for pos, ch in enumerate(label):
        x0 = pos * (GLYPH_WIDTH + GLYPH_SPACING)
        for y, row in enumerate(DIGIT_GLYPHS[ch]):
            mask[y, x0 : x0 + GLYPH_WIDTH] = [bit == "1" for bit in row]
    return mask


def render_header(
    index: int, width: int = THUMB_SIZE, height: int = DEFAULT_HEADER_HEIGHT
) -> np.ndarray:
    """White header band of shape (height, width, 3) with `index` drawn black, centered.

    The glyphs are scaled by the largest integer factor that leaves a 2px margin. A band
    too small for a 1x glyph stays blank.
    """
    band = np.full((height, width, 3), 255, dtype=np.uint8)
    mask = _digit_mask(str(index))
    scale = min((height - 2) // GLYPH_HEIGHT, (width - 2) // mask.shape[1]) if height > 2 else 0
    if scale < 1:
        return band
    mask = np.kron(mask, np.ones((scale, scale), dtype=bool))
    y0 = (height - mask.shape[0]) // 2
    x0 = (width - mask.shape[1]) // 2
    band[y0 : y0 + mask.shape[0], x0 : x0 + mask.shape[1]][mask] = 0
    return band


def letterbox(img: Image.Image, size: int = THUMB_SIZE) -> Image.Image:
    """Aspect-preserving resize onto a white size x size canvas, centered."""
    width, height = img.size
    scale = min(size / width, size / height)
    thumb_w = max(1, min(size, round(width * scale)))
    thumb_h = max(1, min(size, round(height * scale)))
    thumb = img.convert("RGB").resize((thumb_w, thumb_h), Image.Resampling.BOX)
    canvas = Image.new("RGB", (size, size), "white")
    canvas.paste(thumb, ((size - thumb_w) // 2, (size - thumb_h) // 2))
    return canvas


@dataclass(frozen=True)
class OverviewImage:
    # 1-based group number k
    group_index: int
    rows: int
    cols: int
    # Row-major, None for blank cells
    cells: Tuple[Optional[int], ...]
    composite: Image.Image
    header_height: int

    @property
    def pages(self) -> List[int]:
        return [c for c in self.cells if c is not None]

    @property
    def width(self) -> int:
        return self.composite.width

    @property
    def height(self) -> int:
        return self.composite.height

    def cell_at(self, row: int, col: int) -> Optional[int]:
        return self.cells[row * self.cols + col]

    def cell_box(self, row: int, col: int) -> Tuple[int, int, int, int]:
        """(left, top, right, bottom) of a cell including its header band."""
        cell_h = self.header_height + THUMB_SIZE
        return (col * THUMB_SIZE, row * cell_h, (col + 1) * THUMB_SIZE, (row + 1) * cell_h)

    @property
    def token_cost(self) -> int:
        return page_token_cost(self.width, self.height)

    def layout_json(self) -> dict:
        return {
            "k": self.group_index,
            "rows": self.rows,
            "cols": self.cols,
            "width": self.width,
            "height": self.height,
            "cells": [
                list(self.cells[r * self.cols : (r + 1) * self.cols]) for r in range(self.rows)
            ],
        }


@dataclass(frozen=True)
class OverviewSet:
    doc_id: str
    images: Tuple[OverviewImage, ...]
    group_capacity: int
    header_height: int

    @property
    def k(self) -> int:
        return len(self.images)


def overview_layout(
    n_pages: int, capacity: int = DEFAULT_GROUP_CAPACITY, header_height: int = DEFAULT_HEADER_HEIGHT
) -> List[Tuple[int, int, int, int]]:
    """(rows, cols, width, height) of each composite, without rendering anything."""
    layout = []
    for group in partition_groups(n_pages, capacity):
        rows, cols = grid_dims(len(group))
        layout.append((rows, cols, cols * THUMB_SIZE, rows * (header_height + THUMB_SIZE)))
    return layout


def layout_token_cost(
    n_pages: int, capacity: int = DEFAULT_GROUP_CAPACITY, header_height: int = DEFAULT_HEADER_HEIGHT
) -> int:
    return sum(
        page_token_cost(w, h) for _, _, w, h in overview_layout(n_pages, capacity, header_height)
    )


def overview_token_cost(overview: OverviewSet) -> int:
    return sum(img.token_cost for img in overview.images)


def build_overview(
    doc: Document,
    capacity: int = DEFAULT_GROUP_CAPACITY,
    header_height: int = DEFAULT_HEADER_HEIGHT,
) -> OverviewSet:
    if header_height < 0:
        raise ValueError(f"header height must not be negative, got {header_height}")

    cell_h = header_height + THUMB_SIZE
    images = []
    for k, group in enumerate(partition_groups(doc.n_pages, capacity), start=1):
        rows, cols = grid_dims(len(group))
        canvas = np.full((rows * cell_h, cols * THUMB_SIZE, 3), 255, dtype=np.uint8)
        cells: List[Optional[int]] = [None] * (rows * cols)
        for pos, index in enumerate(group):
            cells[pos] = index
            row, col = divmod(pos, cols)
            top, left = row * cell_h, col * THUMB_SIZE
            canvas[top : top + header_height, left : left + THUMB_SIZE] = render_header(
                index, THUMB_SIZE, header_height
            )
            thumb = np.asarray(letterbox(doc.page(index).image()))
            canvas[top + header_height : top + cell_h, left : left + THUMB_SIZE] = thumb
        images.append(
            OverviewImage(
                group_index=k,
                rows=rows,
                cols=cols,
                cells=tuple(cells),
                composite=Image.fromarray(canvas, "RGB"),
                header_height=header_height,
            )
        )

    log.debug(f"built overview for {doc.doc_id}: {doc.n_pages} pages in {len(images)} image(s)")
    return OverviewSet(
        doc_id=doc.doc_id,
        images=tuple(images),
        group_capacity=capacity,
        header_height=header_height,
    )


def write_overview(overview: OverviewSet, out_dir: Path) -> List[Path]:
    """Write overview_<k>.png files and the overview.json cell map. Returns image paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    sidecar_images = []
    for img in overview.images:
        path = out_dir / f"overview_{img.group_index}.png"
        img.composite.save(path, format="PNG")
        paths.append(path)
        sidecar_images.append({"file": path.name, **img.layout_json()})

    sidecar = {
        "doc_id": overview.doc_id,
        "group_capacity": overview.group_capacity,
        "header_height": overview.header_height,
        "thumb_size": THUMB_SIZE,
        "token_cost": overview_token_cost(overview),
        "images": sidecar_images,
    }
    (out_dir / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=2) + "\n")
    return paths
