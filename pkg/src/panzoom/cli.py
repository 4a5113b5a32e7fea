"""Command-line entrypoint: compile, ingest, precompute, serve, bench,
oracle-check.

Exit codes: 0 success, 1 domain failure (validation error, failed check),
2 usage or I/O error. The PANZOOM_PORT and PANZOOM_ARTIFACTS environment
variables override the port and artifact directory defaults.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import appspec as A
from . import bench as B
from .fetch import parse_scheme, standard_schemes
from .geom import Box, tiles_covering_viewport
from .oracle import ScanOracle
from .server import AppServer, ServerConfig
from .storage import Engine, IngestError, StorageError, sniff_schema

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _artifact_default() -> str:
    return os.environ.get("PANZOOM_ARTIFACTS", "artifacts")


def _port_default() -> int:
    return int(os.environ.get("PANZOOM_PORT", "8844"))


def _load_spec(path: str) -> tuple[A.AppSpec, Path]:
    p = Path(path)
    if not p.exists():
        print(f"error: spec file {path!r} not found", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return A.parse_spec(p.read_text()), p


def _compile(spec_path: str) -> A.CompiledApp:
    app, p = _load_spec(spec_path)
    schemas = {}
    for table, file_path in app.data:
        fp = Path(file_path)
        if not fp.is_absolute():
            fp = p.parent / fp
        schemas[table] = sniff_schema(fp)
    return A.validate(app, schemas)


# --------------------------------------------------------------------------
# subcommands

def cmd_compile(args) -> int:
    try:
        compiled = _compile(args.spec)
    except (A.CompileError,) as ex:
        print(f"error {ex.code}: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    except IngestError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    app = compiled.app
    print(f"{app.name}: {len(app.canvases)} canvases, {len(app.jumps)} jumps")
    for cl in compiled.layers:
        kind = ("static" if cl.static else
                ("separable" if cl.separable else "non-separable"))
        extra = ""
        if cl.separable:
            extra = (f" [x = {cl.affine_x.scale:g}*{cl.affine_x.column}"
                     f"{cl.affine_x.offset:+g},"
                     f" y = {cl.affine_y.scale:g}*{cl.affine_y.column}"
                     f"{cl.affine_y.offset:+g}]")
        print(f"  {cl.canvas_id}/layer{cl.index}: {kind}{extra}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    try:
        compiled = _compile(args.spec)
        engine = Engine(compiled)
        counts = engine.ingest_all(Path(args.spec).parent)
        engine.save(args.artifacts)
    except A.CompileError as ex:
        print(f"error {ex.code}: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    except (IngestError, StorageError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    for table, n in counts.items():
        print(f"ingested {table}: {n} rows")
    print(f"artifacts written to {args.artifacts}")
    return EXIT_OK


def cmd_precompute(args) -> int:
    try:
        compiled = _compile(args.spec)
        engine = Engine.load(args.artifacts, compiled)
        report = engine.precompute(tile_sizes=args.tile_size,
                                   materialize_separable=args.materialize_separable)
        engine.save(args.artifacts)
    except A.CompileError as ex:
        print(f"error {ex.code}: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    except (IngestError, StorageError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    print(report.to_text())
    return EXIT_OK


def cmd_serve(args) -> int:
    try:
        compiled = _compile(args.spec)
        engine = Engine.load(args.artifacts, compiled)
    except A.CompileError as ex:
        print(f"error {ex.code}: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    except (IngestError, StorageError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    config = ServerConfig(host=args.host, port=args.port,
                          cache_capacity=args.cache_capacity,
                          default_inflation=args.inflation,
                          compress=args.compress)
    server = AppServer(compiled, engine, config)
    print(f"serving {compiled.app.name!r} on http://{args.host}:{server.port}")
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_bench(args) -> int:
    dataset_specs = []
    for name in args.dataset:
        if name == "uniform":
            dataset_specs.append(B.uniform_spec(n=args.n, seed=args.seed))
        elif name == "skewed":
            dataset_specs.append(B.skewed_spec(n=args.n, seed=args.seed))
        else:
            print(f"error: unknown dataset {name!r} (uniform|skewed)", file=sys.stderr)
            return EXIT_USAGE
    traces = [B.TraceSpec(kind=k) for k in args.trace]
    schemes = ([parse_scheme(s) for s in args.scheme]
               if args.scheme else standard_schemes())
    try:
        report = B.run_suite(dataset_specs, traces, schemes, runs=args.runs,
                             mode=args.mode, workdir=args.workdir,
                             cache_capacity=args.cache_capacity)
    except B.BenchError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    print(report.text_tables())
    checks = report.ordering_checks()
    if checks:
        # informational at arbitrary scale; the orderings are acceptance
        # properties of the desk-scale defaults
        print(B.render_checks(checks))
    if args.out:
        Path(args.out).write_text(report.csv_text())
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    try:
        compiled = _compile(args.spec)
        engine = Engine.load(args.artifacts, compiled)
    except A.CompileError as ex:
        print(f"error {ex.code}: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    except (IngestError, StorageError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    rng = np.random.default_rng(args.seed)
    failures = 0
    for cl in compiled.layers:
        if cl.static:
            continue
        key = (cl.canvas_id, cl.index)
        canvas = compiled.app.canvas(cl.canvas_id)
        layer = canvas.layers[cl.index]
        table = engine.tables[layer.transform.table]
        oracle = ScanOracle.build(layer, table)
        ld = engine.layers[key]
        print(f"checking {cl.canvas_id}/layer{cl.index} "
              f"({oracle.tuple_ids.size} placed rows, {args.rects} rectangles)")
        for _ in range(args.rects):
            w = rng.uniform(1.0, canvas.width / 4)
            h = rng.uniform(1.0, canvas.height / 4)
            box = Box(rng.uniform(-w / 2, canvas.width - w / 2),
                      rng.uniform(-h / 2, canvas.height - h / 2), w, h)
            expect = oracle.query_ids(box).tolist()
            paths = {}
            try:
                if ld.spatial is not None:
                    paths["spatial"] = [o.tuple_id
                                        for o in engine.query_box_spatial(key, box)]
                if cl.separable and ld.raw_tree is not None:
                    paths["separable"] = [o.tuple_id
                                          for o in engine.query_box_separable(key, box)]
                for size, _tm in sorted(ld.tile_maps.items()):
                    ids = set()
                    for t in tiles_covering_viewport(box, size):
                        ids.update(o.tuple_id for o in engine.query_tile_join(key, t))
                    hits = sorted(i for i in ids
                                  if box.intersects_closed(*_bbox_of(engine, key, i)))
                    paths[f"tiles:{size:g}"] = hits
            except Exception as ex:
                failures += 1
                print(f"MISMATCH (query path failed) on rectangle "
                      f"({box.x!r},{box.y!r},{box.w!r},{box.h!r}): {ex}")
                continue
            for name, got in paths.items():
                if got != expect:
                    failures += 1
                    print(f"MISMATCH {name} on rectangle "
                          f"({box.x!r},{box.y!r},{box.w!r},{box.h!r}): "
                          f"expected {len(expect)} objects, got {len(got)}")
                    break
    if failures:
        print(f"oracle check FAILED ({failures} mismatching rectangles)")
        return EXIT_FAILURE
    print("oracle check passed")
    return EXIT_OK


def _bbox_of(engine: Engine, key, tuple_id: int):
    pc = engine.layers[key].placed
    pos = int(np.searchsorted(pc.tuple_ids, tuple_id))
    return (float(pc.minx[pos]), float(pc.miny[pos]),
            float(pc.maxx[pos]), float(pc.maxy[pos]))


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panzoom",
        description="Details-on-demand pan/zoom visualization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="parse and validate an application spec")
    p.add_argument("spec", help="path to the .app.json document")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("ingest", help="load the spec's data sources into the artifact dir")
    p.add_argument("--spec", required=True)
    p.add_argument("--artifacts", default=_artifact_default(),
                   help="artifact directory (env PANZOOM_ARTIFACTS)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("precompute", help="build indexes and placed objects")
    p.add_argument("--spec", required=True)
    p.add_argument("--artifacts", default=_artifact_default())
    p.add_argument("--tile-size", type=float, action="append",
                   default=None, help="tile sizes for tuple-tile mappings (repeatable)")
    p.add_argument("--materialize-separable", action="store_true",
                   help="build the full artifact set even for separable layers")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("serve", help="serve the wire API")
    p.add_argument("--spec", required=True)
    p.add_argument("--artifacts", default=_artifact_default())
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=_port_default(),
                   help="0 picks a free port (env PANZOOM_PORT)")
    p.add_argument("--cache-capacity", type=int, default=200_000,
                   help="backend cache budget, in objects")
    p.add_argument("--inflation", type=float, default=0.5,
                   help="default dynamic-box inflation")
    p.add_argument("--compress", action="store_true", help="gzip responses")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="run the fetching-scheme study")
    p.add_argument("--dataset", action="append", default=None,
                   help="uniform|skewed (repeatable; default both)")
    p.add_argument("--trace", action="append", default=None,
                   help="a|b|c (repeatable; default all)")
    p.add_argument("--scheme", action="append", default=None,
                   help="dbox:<inflation> or tile:<size>:<spatial|join> "
                        "(repeatable; default the six standard schemes)")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--seed", type=int, default=B.DEFAULT_SEED)
    p.add_argument("--n", type=int, default=B.DEFAULT_N, help="points per dataset")
    p.add_argument("--mode", choices=["in-process", "http"], default="in-process")
    p.add_argument("--workdir", default="bench-work")
    p.add_argument("--cache-capacity", type=int, default=200_000)
    p.add_argument("--out", default=None, help="write per-step CSV here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle-check",
                       help="compare every query path against a linear-scan oracle")
    p.add_argument("--spec", required=True)
    p.add_argument("--artifacts", default=_artifact_default())
    p.add_argument("--rects", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_oracle_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "bench":
        if args.dataset is None:
            args.dataset = ["uniform", "skewed"]
        if args.trace is None:
            args.trace = ["a", "b", "c"]
    if args.command == "precompute" and args.tile_size is None:
        args.tile_size = [256.0, 1024.0, 4096.0]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
