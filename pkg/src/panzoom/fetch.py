"""Fetch-granularity engine: what to request for a viewport, and caching.

Two granularities are supported. Static tiles: the client requests every
tile intersecting the viewport that it does not already hold, one request
per tile. Dynamic boxes: the client requests nothing while the viewport
stays inside the box it holds; when the viewport escapes, it sends the
viewport (plus an inflation fraction) and receives one covering box back.

``plan_fetch`` is pure; ``execute`` consults the backend LRU cache before
touching storage and is safe under concurrent callers.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .geom import Box, TileId, Viewport, tiles_covering_viewport
from .storage import Engine, LayerKey, PlacedObject


# --------------------------------------------------------------------------
# schemes

@dataclass(frozen=True)
class TileScheme:
    size: float
    index: str = "spatial"  # "spatial" | "join"

    def label(self) -> str:
        return f"tile:{self.size:g}:{self.index}"


@dataclass(frozen=True)
class DboxScheme:
    inflation: float = 0.0  # 0 = box is exactly the viewport; 0.5 = 50% larger

    def label(self) -> str:
        return f"dbox:{self.inflation:g}"


FetchScheme = Union[TileScheme, DboxScheme]


def parse_scheme(text: str) -> FetchScheme:
    parts = text.split(":")
    if parts[0] == "dbox" and len(parts) == 2:
        inflation = float(parts[1])
        if inflation < 0:
            raise ValueError(f"negative inflation in {text!r}")
        return DboxScheme(inflation)
    if parts[0] == "tile" and len(parts) == 3 and parts[2] in ("spatial", "join"):
        size = float(parts[1])
        if size <= 0:
            raise ValueError(f"nonpositive tile size in {text!r}")
        return TileScheme(size, parts[2])
    raise ValueError(f"bad scheme {text!r} (use dbox:<inflation> or tile:<size>:<spatial|join>)")


def standard_schemes() -> list[FetchScheme]:
    """The six configurations the benchmark compares."""
    return [
        DboxScheme(0.0),
        DboxScheme(0.5),
        TileScheme(256.0, "spatial"),
        TileScheme(1024.0, "spatial"),
        TileScheme(4096.0, "spatial"),
        TileScheme(1024.0, "join"),
    ]


# --------------------------------------------------------------------------
# box arithmetic

def compute_dbox(vp: Viewport, inflation: float, canvas_w: float, canvas_h: float) -> Box:
    """Box centered on the viewport center, each dimension (1+inflation)x,
    clipped to the canvas. Always still contains the (clamped) viewport.

    Inflation 0 reproduces the viewport exactly, bit for bit.
    """
    if inflation < 0:
        raise ValueError("inflation must be >= 0")
    dx = inflation * (vp.w / 2.0)
    dy = inflation * (vp.h / 2.0)
    box = Box(vp.x - dx, vp.y - dy, vp.w + 2.0 * dx, vp.h + 2.0 * dy)
    return box.intersect(Box(0.0, 0.0, canvas_w, canvas_h))


def needs_new_box(current: Optional[Box], vp: Viewport) -> bool:
    """True on first load or whenever the viewport left the current box."""
    return current is None or not current.contains_box(vp)


def tiles_for_viewport(vp: Viewport, size: float) -> list[TileId]:
    return tiles_covering_viewport(vp, size)


# --------------------------------------------------------------------------
# plans

@dataclass(frozen=True)
class TileRequest:
    tile: TileId


@dataclass(frozen=True)
class DboxRequest:
    viewport: Viewport
    inflation: float


FetchRequest = Union[TileRequest, DboxRequest]


@dataclass(frozen=True)
class FetchPlan:
    scheme: FetchScheme
    requests: tuple[FetchRequest, ...]


@dataclass
class ClientState:
    """Simulated frontend cache for one layer: tiles held, or current box."""

    cached_tiles: dict[tuple[int, int], list[PlacedObject]] = field(default_factory=dict)
    current_box: Optional[Box] = None
    box_objects: list[PlacedObject] = field(default_factory=list)


def plan_fetch(vp: Viewport, scheme: FetchScheme, state: ClientState) -> FetchPlan:
    """Requests needed to cover vp given what the client already holds."""
    if isinstance(scheme, TileScheme):
        requests = tuple(
            TileRequest(t) for t in tiles_for_viewport(vp, scheme.size)
            if (t.col, t.row) not in state.cached_tiles
        )
        return FetchPlan(scheme, requests)
    if needs_new_box(state.current_box, vp):
        return FetchPlan(scheme, (DboxRequest(vp, scheme.inflation),))
    return FetchPlan(scheme, ())


# --------------------------------------------------------------------------
# backend cache

class BackendCache:
    """LRU over whole fetch units, with a global object-count budget.

    Keys are (canvasId, layerIndex, unitKey) where unitKey identifies a tile
    or an exact box. A hit returns the very list that was stored, so results
    are bit-identical to a fresh query. Thread-safe.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._entries: OrderedDict[tuple, list[PlacedObject]] = OrderedDict()
        self._weight = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def weight(self) -> int:
        return self._weight

    def get(self, key: tuple) -> Optional[list[PlacedObject]]:
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                self.hits += 1
                return self._entries[key]
            self.misses += 1
            return None

    def put(self, key: tuple, objects: list[PlacedObject]) -> None:
        w = len(objects)
        with self._lock:
            if w > self.capacity:
                return  # would never fit; don't flush the whole cache for it
            old = self._entries.pop(key, None)
            if old is not None:
                self._weight -= len(old)
            while self._entries and self._weight + w > self.capacity:
                _, evicted = self._entries.popitem(last=False)
                self._weight -= len(evicted)
            self._entries[key] = objects
            self._weight += w


def tile_cache_key(layer: LayerKey, scheme: TileScheme, tile: TileId) -> tuple:
    return (layer[0], layer[1], "tile", scheme.index, tile.size, tile.col, tile.row)


def box_cache_key(layer: LayerKey, box: Box) -> tuple:
    return (layer[0], layer[1], "box", box.x, box.y, box.w, box.h)


# --------------------------------------------------------------------------
# execution

@dataclass
class StepMetrics:
    ms: float = 0.0
    requests: int = 0
    queries: int = 0  # requests that reached storage
    objects: int = 0  # objects returned to the client, hits included
    cache_hits: int = 0


@dataclass(frozen=True)
class FetchResult:
    request: FetchRequest
    unit: Union[TileId, Box]  # echoed tile, or the box the server computed
    objects: list[PlacedObject]
    from_cache: bool


def execute(plan: FetchPlan, engine: Engine, layer: LayerKey,
            cache: Optional[BackendCache] = None) -> tuple[list[FetchResult], StepMetrics]:
    """Serve a plan from the backend cache, then storage.

    Tile requests route to the tuple-tile join or to a rectangle query on
    the tile's rect depending on the scheme's index kind; box requests
    compute the dynamic box and run a rectangle query. Rectangle queries use
    the layer's spatial index, or the separable fast path when that is all
    the layer has.
    """
    canvas = engine.compiled.app.canvas(layer[0])
    metrics = StepMetrics(requests=len(plan.requests))
    results: list[FetchResult] = []
    for req in plan.requests:
        if isinstance(req, TileRequest):
            assert isinstance(plan.scheme, TileScheme)
            key = tile_cache_key(layer, plan.scheme, req.tile)
            unit: Union[TileId, Box] = req.tile
        else:
            box = compute_dbox(req.viewport, req.inflation, canvas.width, canvas.height)
            key = box_cache_key(layer, box)
            unit = box
        cached = cache.get(key) if cache is not None else None
        if cached is not None:
            metrics.cache_hits += 1
            metrics.objects += len(cached)
            results.append(FetchResult(req, unit, cached, True))
            continue
        if isinstance(req, TileRequest):
            if plan.scheme.index == "join":
                objects = engine.query_tile_join(layer, req.tile)
            else:
                objects = engine.query_box(layer, req.tile.rect())
        else:
            objects = engine.query_box(layer, unit)
        metrics.queries += 1
        metrics.objects += len(objects)
        if cache is not None:
            cache.put(key, objects)
        results.append(FetchResult(req, unit, objects, False))
    return results, metrics


def apply_results(state: ClientState, results: Sequence[FetchResult]) -> None:
    """Fold fetch results into the simulated frontend cache."""
    for r in results:
        if isinstance(r.unit, TileId):
            state.cached_tiles[(r.unit.col, r.unit.row)] = r.objects
        else:
            state.current_box = r.unit
            state.box_objects = r.objects


def viewport_object_ids(state: ClientState, vp: Viewport) -> tuple[int, ...]:
    """Sorted tupleIds of client-held objects whose bbox meets the viewport.

    This is the set a renderer would draw; it must not depend on the scheme.
    """
    ids = set()
    if state.current_box is not None:
        for o in state.box_objects:
            if vp.intersects_closed(*o.bbox):
                ids.add(o.tuple_id)
    for objects in state.cached_tiles.values():
        for o in objects:
            if vp.intersects_closed(*o.bbox):
                ids.add(o.tuple_id)
    return tuple(sorted(ids))


def covering_object_count(state: ClientState, vp: Viewport, scheme: FetchScheme) -> int:
    """Distinct objects in the client units that cover the viewport.

    Under dbox this is the current box; under tiles, the tiles meeting the
    viewport. Dbox-exact holds the minimal covering rectangle, so its count
    is a per-step lower bound across schemes.
    """
    if isinstance(scheme, DboxScheme):
        return len({o.tuple_id for o in state.box_objects})
    ids: set[int] = set()
    for t in tiles_for_viewport(vp, scheme.size):
        objects = state.cached_tiles.get((t.col, t.row))
        if objects:
            ids.update(o.tuple_id for o in objects)
    return len(ids)
