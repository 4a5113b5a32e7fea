"""Benchmark harness: synthetic datasets, viewport traces, scheme replay.

Reproduces the fetching-scheme study at desk scale: two seeded synthetic
point datasets (uniform, and skewed with 80% of points in 20% of the
area), three pan traces (tile-aligned, tile-misaligned, diagonal), and six
fetching schemes replayed with a simulated frontend cache. Reported
numbers are per-step wall time, objects fetched and queries issued, with
the first load kept separate from pan steps and three fresh-cache runs
averaged.

Absolute milliseconds are hardware-bound; what the report asserts are the
orderings between schemes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import appspec as A
from .fetch import (BackendCache, ClientState, DboxRequest, DboxScheme, FetchResult,
                    FetchScheme, TileRequest, TileScheme, apply_results, execute,
                    plan_fetch, viewport_object_ids)
from .geom import Box, TileId, Viewport
from .storage import Engine, PlacedObject, sniff_schema

# desk-scale defaults: counts and ratios preserved from the reference study,
# absolute sizes shrunk to run on a laptop in minutes
CANVAS_W = 131072.0
CANVAS_H = 16384.0
DEFAULT_N = 2_000_000
VIEWPORT_W = 1600.0
VIEWPORT_H = 900.0
TILE_LEN = 1024.0
DENSE_RECT = Box(0.0, 0.0, 0.4 * CANVAS_W, 0.5 * CANVAS_H)  # 20% of the area
DENSE_FRACTION = 0.8
DEFAULT_SEED = 1234


class BenchError(Exception):
    pass


# --------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # "uniform" | "skewed"
    n: int = DEFAULT_N
    canvas_w: float = CANVAS_W
    canvas_h: float = CANVAS_H
    dense_rect: Optional[Box] = None  # skewed only
    dense_fraction: float = DENSE_FRACTION
    seed: int = DEFAULT_SEED

    def label(self) -> str:
        return self.kind

    def file_name(self) -> str:
        return f"{self.kind}_n{self.n}_seed{self.seed}.csv"


def uniform_spec(n: int = DEFAULT_N, seed: int = DEFAULT_SEED) -> DatasetSpec:
    return DatasetSpec(kind="uniform", n=n, seed=seed)


def skewed_spec(n: int = DEFAULT_N, seed: int = DEFAULT_SEED) -> DatasetSpec:
    return DatasetSpec(kind="skewed", n=n, dense_rect=DENSE_RECT, seed=seed)


def generate(spec: DatasetSpec, path: str | Path) -> Path:
    """Write the dataset as a cx,cy CSV. Identical spec => identical bytes."""
    path = Path(path)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "uniform":
        cx = rng.uniform(0.0, spec.canvas_w, spec.n)
        cy = rng.uniform(0.0, spec.canvas_h, spec.n)
    elif spec.kind == "skewed":
        rect = spec.dense_rect or DENSE_RECT
        if not Box(0, 0, spec.canvas_w, spec.canvas_h).contains_box(rect):
            raise BenchError("dense rectangle must lie inside the canvas")
        if not (0.0 <= spec.dense_fraction <= 1.0):
            raise BenchError("dense fraction must be in [0, 1]")
        n_dense = round(spec.n * spec.dense_fraction)
        n_sparse = spec.n - n_dense
        dx = rng.uniform(rect.x, rect.x2, n_dense)
        dy = rng.uniform(rect.y, rect.y2, n_dense)
        sx_parts, sy_parts = [], []
        got = 0
        while got < n_sparse:
            want = n_sparse - got
            batch = max(1024, int(want * 1.5))
            bx = rng.uniform(0.0, spec.canvas_w, batch)
            by = rng.uniform(0.0, spec.canvas_h, batch)
            outside = ~((bx >= rect.x) & (bx < rect.x2) & (by >= rect.y) & (by < rect.y2))
            bx, by = bx[outside][:want], by[outside][:want]
            sx_parts.append(bx)
            sy_parts.append(by)
            got += len(bx)
        cx = np.concatenate([dx] + sx_parts)
        cy = np.concatenate([dy] + sy_parts)
    else:
        raise BenchError(f"unknown dataset kind {spec.kind!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"cx": cx, "cy": cy}).to_csv(path, index=False)
    return path


def ensure_dataset(spec: DatasetSpec, workdir: str | Path) -> Path:
    """Generate into workdir unless the (seed-stamped) file already exists."""
    path = Path(workdir) / spec.file_name()
    if not path.exists():
        generate(spec, path)
    return path


def dense_point_count(path: str | Path, rect: Box) -> int:
    frame = pd.read_csv(path)
    cx, cy = frame["cx"].to_numpy(), frame["cy"].to_numpy()
    return int(np.sum((cx >= rect.x) & (cx < rect.x2) & (cy >= rect.y) & (cy < rect.y2)))


# --------------------------------------------------------------------------
# traces

@dataclass(frozen=True)
class TraceSpec:
    kind: str  # "a" | "b" | "c"
    step_len: float = TILE_LEN
    steps_per_leg: int = 6
    start: Optional[tuple[float, float]] = None
    viewport_w: float = VIEWPORT_W
    viewport_h: float = VIEWPORT_H

    def label(self) -> str:
        return self.kind


def _default_start(kind: str, step_len: float) -> tuple[float, float]:
    if kind == "a":
        return (8.0 * step_len, 8.0 * step_len)  # tile-aligned
    if kind == "b":
        return (8.0 * step_len + step_len / 2.0, 8.0 * step_len + step_len / 2.0)
    return (step_len, step_len)  # c: bottom-left, inside the dense region


def make_trace(spec: TraceSpec, canvas_w: float, canvas_h: float) -> list[Viewport]:
    """Ordered viewports, first one included.

    kind a: tile-aligned start; steps_per_leg leftward steps of step_len,
    then the same number upward (+y). kind b: identical movement from a
    half-tile-offset start, so no edge ever aligns with a tile boundary.
    kind c: diagonal, start + k*(step_len, step_len).
    """
    if spec.kind not in ("a", "b", "c"):
        raise BenchError(f"unknown trace kind {spec.kind!r}")
    sx, sy = spec.start if spec.start is not None else _default_start(spec.kind, spec.step_len)
    vw, vh = spec.viewport_w, spec.viewport_h
    points = [(sx, sy)]
    if spec.kind in ("a", "b"):
        x, y = sx, sy
        for _ in range(spec.steps_per_leg):
            x -= spec.step_len
            points.append((x, y))
        for _ in range(spec.steps_per_leg):
            y += spec.step_len
            points.append((x, y))
    else:
        for k in range(1, spec.steps_per_leg + 1):
            points.append((sx + k * spec.step_len, sy + k * spec.step_len))
    vps = [Box(x, y, vw, vh) for x, y in points]
    for vp in vps:
        if vp.x < 0 or vp.y < 0 or vp.x2 > canvas_w or vp.y2 > canvas_h:
            raise BenchError(
                f"trace {spec.kind} escapes the canvas at ({vp.x:g},{vp.y:g})")
    return vps


# --------------------------------------------------------------------------
# the bench application (one canvas, one point layer)

BENCH_TABLE = "points"
BENCH_CANVAS = "main"
BENCH_LAYER: tuple[str, int] = (BENCH_CANVAS, 0)


def bench_app_document(csv_path: str | Path, canvas_w: float = CANVAS_W,
                       canvas_h: float = CANVAS_H) -> str:
    import json
    return json.dumps({
        "name": "bench",
        "viewport": {"width": VIEWPORT_W, "height": VIEWPORT_H},
        "data": [{"table": BENCH_TABLE, "file": str(csv_path)}],
        "canvases": [{
            "id": BENCH_CANVAS, "width": canvas_w, "height": canvas_h,
            "layers": [{
                "static": False,
                "transform": {"table": BENCH_TABLE, "steps": []},
                "placement": {"x": "cx", "y": "cy", "width": 0, "height": 0},
                "mark": {"kind": "circle",
                         "encodings": {"radius": {"value": 1}, "fill": {"value": "#4682b4"}}},
            }],
        }],
        "jumps": [],
        "initial": {"canvas": BENCH_CANVAS, "centerX": canvas_w / 2, "centerY": canvas_h / 2},
    })


def build_bench_engine(csv_path: Path, spec: DatasetSpec,
                       join_sizes: Sequence[float]) -> Engine:
    document = bench_app_document(csv_path, spec.canvas_w, spec.canvas_h)
    app = A.parse_spec(document)
    compiled = A.validate(app, {BENCH_TABLE: sniff_schema(csv_path)})
    engine = Engine(compiled)
    engine.ingest_all(".")
    # the natural point placement is separable; the study measures the
    # precomputed designs, so build them anyway
    engine.precompute(tile_sizes=sorted(join_sizes), materialize_separable=True)
    return engine


# --------------------------------------------------------------------------
# replay

@dataclass(frozen=True)
class StepRow:
    dataset: str
    trace: str
    scheme: str
    run: int
    step: int
    ms: float
    objects: int
    queries: int
    cache_hits: int
    initial: bool
    coverage: Optional[tuple[int, ...]] = None


@dataclass
class RunReport:
    rows: list[StepRow] = field(default_factory=list)

    def datasets(self) -> list[str]:
        return sorted({r.dataset for r in self.rows})

    def traces(self, dataset: str) -> list[str]:
        return sorted({r.trace for r in self.rows if r.dataset == dataset})

    def schemes(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.scheme not in seen:
                seen.append(r.scheme)
        return seen

    def select(self, dataset: str, trace: str, scheme: str,
               pan_only: bool = True) -> list[StepRow]:
        return [r for r in self.rows
                if r.dataset == dataset and r.trace == trace and r.scheme == scheme
                and not (pan_only and r.initial)]

    def mean(self, dataset: str, trace: str, scheme: str, attr: str,
             pan_only: bool = True) -> float:
        rows = self.select(dataset, trace, scheme, pan_only)
        if not rows:
            raise BenchError(f"no rows for {dataset}/{trace}/{scheme}")
        return float(np.mean([getattr(r, attr) for r in rows]))

    def csv_text(self) -> str:
        lines = ["dataset,trace,scheme,run,step,ms,objects,queries,cache_hits"]
        for r in self.rows:
            lines.append(f"{r.dataset},{r.trace},{r.scheme},{r.run},{r.step},"
                         f"{r.ms!r},{r.objects},{r.queries},{r.cache_hits}")
        return "\n".join(lines) + "\n"

    def text_tables(self) -> str:
        out = []
        for d in self.datasets():
            for t in self.traces(d):
                out.append(f"== dataset {d}, trace {t} (means over pan steps) ==")
                out.append(f"{'scheme':<22}{'ms':>10}{'objects':>12}{'queries':>10}{'load ms':>10}")
                for s in self.schemes():
                    if not self.select(d, t, s):
                        continue
                    initial = [r.ms for r in self.rows
                               if r.dataset == d and r.trace == t and r.scheme == s and r.initial]
                    out.append(
                        f"{s:<22}"
                        f"{self.mean(d, t, s, 'ms'):>10.2f}"
                        f"{self.mean(d, t, s, 'objects'):>12.1f}"
                        f"{self.mean(d, t, s, 'queries'):>10.2f}"
                        f"{float(np.mean(initial)) if initial else float('nan'):>10.2f}")
                out.append("")
        return "\n".join(out)

    # -- ordering assertions (the reproducible part of the study) ----------

    def ordering_checks(self) -> list["Check"]:
        checks: list[Check] = []
        schemes = self.schemes()
        dbox0, dbox50 = "dbox:0", "dbox:0.5"
        t1024 = "tile:1024:spatial"
        t4096, t256 = "tile:4096:spatial", "tile:256:spatial"
        for d in self.datasets():
            for t in self.traces(d):
                if t in ("b", "c") and dbox0 in schemes:
                    worst = None
                    ok = True
                    base = self.mean(d, t, dbox0, "ms")
                    for s in schemes:
                        if s == dbox0 or not self.select(d, t, s):
                            continue
                        other = self.mean(d, t, s, "ms")
                        if base > other:
                            ok = False
                            worst = (s, other)
                    checks.append(Check(
                        f"dbox:0 fastest on {d}/trace-{t}", ok,
                        f"dbox:0 {base:.2f} ms" + (f" vs {worst[0]} {worst[1]:.2f} ms"
                                                   if worst else "")))
                if t == "a" and t1024 in schemes and dbox50 in schemes \
                        and self.select(d, t, t1024) and self.select(d, t, dbox50):
                    lt, ld = self.mean(d, t, t1024, "ms"), self.mean(d, t, dbox50, "ms")
                    checks.append(Check(
                        f"tile:1024:spatial <= dbox:0.5 on {d}/trace-a", lt <= ld,
                        f"{lt:.2f} ms vs {ld:.2f} ms"))
                present = [s for s in schemes if self.select(d, t, s)]
                if t4096 in present and len(present) > 1:
                    objs = {s: self.mean(d, t, s, "objects") for s in present}
                    ok = all(objs[t4096] >= v for v in objs.values())
                    checks.append(Check(
                        f"tile:4096 fetches most objects on {d}/trace-{t}", ok,
                        ", ".join(f"{s}={v:.0f}" for s, v in objs.items())))
                if t256 in present and len(present) > 1:
                    qs = {s: self.mean(d, t, s, "queries") for s in present}
                    ok = all(qs[t256] >= v for v in qs.values())
                    checks.append(Check(
                        f"tile:256 issues most queries on {d}/trace-{t}", ok,
                        ", ".join(f"{s}={v:.2f}" for s, v in qs.items())))
        return checks


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  [{self.detail}]"


def render_checks(checks: Sequence[Check]) -> str:
    return "\n".join(c.line() for c in checks)


# --------------------------------------------------------------------------
# suite driver

def _replay_inprocess(engine: Engine, viewports: Sequence[Viewport],
                      scheme: FetchScheme, cache_capacity: int,
                      capture_coverage: bool):
    state = ClientState()
    cache = BackendCache(cache_capacity)
    steps = []
    for i, vp in enumerate(viewports):
        t0 = time.perf_counter()
        plan = plan_fetch(vp, scheme, state)
        results, m = execute(plan, engine, BENCH_LAYER, cache)
        m.ms = (time.perf_counter() - t0) * 1000.0
        apply_results(state, results)
        coverage = viewport_object_ids(state, vp) if capture_coverage else None
        steps.append((i, m, coverage))
    return steps


def _replay_http(client, viewports: Sequence[Viewport], scheme: FetchScheme,
                 capture_coverage: bool):
    from .fetch import StepMetrics
    state = ClientState()
    steps = []
    for i, vp in enumerate(viewports):
        t0 = time.perf_counter()
        plan = plan_fetch(vp, scheme, state)
        results: list[FetchResult] = []
        m = StepMetrics(requests=len(plan.requests))
        for req in plan.requests:
            if isinstance(req, TileRequest):
                body = client.tile(BENCH_CANVAS, 0, req.tile.col, req.tile.row,
                                   req.tile.size, scheme.index)
                objects = [client.parse_object(o) for o in body["objects"]]
                results.append(FetchResult(req, req.tile, objects,
                                           body.get("served_from_cache", False)))
            else:
                body = client.dbox(BENCH_CANVAS, 0, req.viewport, req.inflation)
                b = body["box"]
                box = Box(b["x"], b["y"], b["w"], b["h"])
                objects = [client.parse_object(o) for o in body["objects"]]
                results.append(FetchResult(req, box, objects,
                                           body.get("served_from_cache", False)))
            if results[-1].from_cache:
                m.cache_hits += 1
            else:
                m.queries += 1
            m.objects += len(results[-1].objects)
        m.ms = (time.perf_counter() - t0) * 1000.0
        apply_results(state, results)
        coverage = viewport_object_ids(state, vp) if capture_coverage else None
        steps.append((i, m, coverage))
    return steps


def run_suite(datasets: Sequence[DatasetSpec],
              traces: Sequence[TraceSpec],
              schemes: Sequence[FetchScheme],
              runs: int = 3,
              mode: str = "in-process",
              workdir: str | Path = "bench-work",
              cache_capacity: int = 200_000,
              capture_coverage: bool = False,
              engine_factory=build_bench_engine) -> RunReport:
    """Replay every (dataset, trace, scheme) combination ``runs`` times.

    Each run starts with fresh frontend and backend caches. ``mode`` "http"
    drives the wire API of a loopback server wrapped around the same
    engine; "in-process" (the default, and the one to trust for timing)
    calls the fetch engine directly.
    """
    if mode not in ("in-process", "http"):
        raise BenchError(f"unknown mode {mode!r}")
    report = RunReport()
    join_sizes = sorted({s.size for s in schemes if isinstance(s, TileScheme)
                         and s.index == "join"})
    for dspec in datasets:
        csv_path = ensure_dataset(dspec, workdir)
        engine = engine_factory(csv_path, dspec, join_sizes)
        server = None
        client = None
        try:
            if mode == "http":
                from .server import AppServer, ServerConfig, WireClient
                server = AppServer(engine.compiled, engine,
                                   ServerConfig(port=0, cache_capacity=cache_capacity))
                server.start()
                client = WireClient(f"http://127.0.0.1:{server.port}")
            for tspec in traces:
                viewports = make_trace(tspec, dspec.canvas_w, dspec.canvas_h)
                for scheme in schemes:
                    for run in range(runs):
                        if mode == "http":
                            server.reset_cache()
                            steps = _replay_http(client, viewports, scheme,
                                                 capture_coverage)
                        else:
                            steps = _replay_inprocess(engine, viewports, scheme,
                                                      cache_capacity, capture_coverage)
                        for i, m, coverage in steps:
                            report.rows.append(StepRow(
                                dataset=dspec.label(), trace=tspec.label(),
                                scheme=scheme.label(), run=run, step=i,
                                ms=m.ms, objects=m.objects, queries=m.queries,
                                cache_hits=m.cache_hits, initial=(i == 0),
                                coverage=coverage))
        finally:
            if server is not None:
                server.stop()
        del engine
    return report
