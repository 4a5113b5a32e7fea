"""Details-on-demand pan/zoom visualizations over large tabular data.

A declarative spec compiler, an in-process spatially indexed backend with
two physical designs, a fetch engine supporting static-tile and dynamic-box
granularities, an HTTP data server, and a benchmark harness for comparing
fetching schemes.
"""

from .appspec import AppSpec, CompiledApp, CompileError, parse_spec, resolve_jump, validate
from .bench import DatasetSpec, RunReport, TraceSpec, generate, make_trace, run_suite
from .expr import AffineForm, as_affine, evaluate, parse_expr, pretty_print
from .fetch import (BackendCache, ClientState, DboxScheme, FetchPlan, TileScheme,
                    compute_dbox, execute, needs_new_box, plan_fetch,
                    tiles_for_viewport)
from .geom import Box, TileId, Viewport
from .oracle import ScanOracle
from .server import AppServer, ServerConfig, WireClient
from .storage import (Engine, PlacedObject, RecordTable, STRTree, build_spatial_index,
                      build_tile_mapping, ingest, materialize_layer)

__version__ = "0.1.0"

__all__ = [
    "AffineForm", "AppServer", "AppSpec", "BackendCache", "Box", "ClientState",
    "CompileError", "CompiledApp", "DatasetSpec", "DboxScheme", "Engine",
    "FetchPlan", "PlacedObject", "RecordTable", "RunReport", "STRTree",
    "ScanOracle", "ServerConfig", "TileId", "TileScheme", "TraceSpec",
    "Viewport", "WireClient", "as_affine", "build_spatial_index",
    "build_tile_mapping", "compute_dbox", "evaluate", "execute", "generate",
    "ingest", "make_trace", "materialize_layer", "needs_new_box", "parse_expr",
    "parse_spec", "plan_fetch", "pretty_print", "resolve_jump", "run_suite",
    "tiles_for_viewport", "validate",
]
