"""Canvas-space geometry: rectangles, viewports, tile coordinates.

Conventions (these are load-bearing for every query path):

* Object bounding boxes and query boxes are *closed* rectangles; two of them
  intersect when they share at least one point, including edges.
* Tiles are *closed-open*: tile (col, row) at size s covers
  [col*s, (col+1)*s) x [row*s, (row+1)*s). A point exactly on a shared tile
  boundary belongs to the higher tile only, so tile membership partitions
  boundary cases deterministically.
* For deciding which tiles a viewport touches, the viewport is treated as
  half-open [x, x+w) x [y, y+h): a viewport whose right edge sits exactly on
  a tile boundary does not pull in the tile to the right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in canvas units, (x, y) is the min corner."""

    x: float
    y: float
    w: float
    h: float

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def contains_box(self, other: "Box") -> bool:
        return (
            other.x >= self.x
            and other.y >= self.y
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def intersects_closed(self, minx: float, miny: float, maxx: float, maxy: float) -> bool:
        return minx <= self.x2 and maxx >= self.x and miny <= self.y2 and maxy >= self.y

    def intersect(self, other: "Box") -> "Box":
        """Clip to ``other``; degenerate (zero-extent) results are allowed."""
        x1 = max(self.x, other.x)
        y1 = max(self.y, other.y)
        x2 = min(self.x2, other.x2)
        y2 = min(self.y2, other.y2)
        return Box(x1, y1, max(0.0, x2 - x1), max(0.0, y2 - y1))


# A viewport is just a Box that is kept inside its canvas; the alias keeps
# signatures readable where the distinction matters.
Viewport = Box


@dataclass(frozen=True)
class TileId:
    """Grid cell (col, row) of a fixed-size tiling of a canvas."""

    col: int
    row: int
    size: float

    def rect(self) -> Box:
        return Box(self.col * self.size, self.row * self.size, self.size, self.size)


def clamp_viewport(vp: Box, canvas_w: float, canvas_h: float) -> Box:
    """Translate vp to lie inside the canvas (size unchanged).

    If the viewport is larger than the canvas in a dimension it is pinned
    at 0 in that dimension.
    """
    x = min(max(vp.x, 0.0), max(0.0, canvas_w - vp.w))
    y = min(max(vp.y, 0.0), max(0.0, canvas_h - vp.h))
    return Box(x, y, vp.w, vp.h)


def tile_range(lo: float, hi: float, size: float) -> range:
    """Indices of closed-open cells [k*size, (k+1)*size) meeting closed [lo, hi].

    Boundary values belong to the higher cell; cells below index 0 are dropped.
    """
    first = max(0, math.floor(lo / size))
    last = math.floor(hi / size)
    if last < first:
        return range(0, 0)
    return range(first, last + 1)


def tiles_overlapping_bbox(minx: float, miny: float, maxx: float, maxy: float,
                           size: float) -> list[tuple[int, int]]:
    """All (col, row) whose closed-open tile rect meets the closed bbox."""
    cols = tile_range(minx, maxx, size)
    rows = tile_range(miny, maxy, size)
    return [(c, r) for r in rows for c in cols]


def tiles_covering_viewport(vp: Box, size: float) -> list[TileId]:
    """Tiles meeting the half-open viewport, in row-major order."""
    if size <= 0:
        raise ValueError("tile size must be positive")
    first_col = max(0, math.floor(vp.x / size))
    last_col = math.ceil(vp.x2 / size) - 1
    first_row = max(0, math.floor(vp.y / size))
    last_row = math.ceil(vp.y2 / size) - 1
    return [
        TileId(c, r, size)
        for r in range(first_row, last_row + 1)
        for c in range(first_col, last_col + 1)
    ]
