"""Read-only HTTP API serving one compiled application.

Endpoints (all GET, JSON bodies):

    /app                                      application descriptor
    /canvas/{id}                              one canvas descriptor
    /static?canvas=&layer=                    full rows of a static layer
    /tile?canvas=&layer=&col=&row=&size=&index=
    /dbox?canvas=&layer=&vx=&vy=&vw=&vh=&inflation=

Wire objects carry exactly tupleId, fields, cx, cy and bbox (a 4-array
[minx,miny,maxx,maxy]), which is everything a renderer needs. Errors are
4xx/5xx with a {code, message} body; every endpoint answers 503 NOT_READY
until precomputation has been loaded.

Requests are handled concurrently over immutable storage; the backend LRU
cache is the only shared mutable state and synchronizes internally.
"""

from __future__ import annotations

import gzip
import json
import math
import threading
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from . import appspec as A
from . import expr as E
from .fetch import (BackendCache, DboxRequest, DboxScheme, FetchPlan, TileRequest,
                    TileScheme, execute)
from .geom import Box, TileId
from .storage import Engine, PlacedObject, StorageError


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8844
    cache_capacity: int = 200_000
    tile_sizes: tuple[float, ...] = (256.0, 1024.0, 4096.0)
    default_inflation: float = 0.5
    compress: bool = False


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.status = status
        self.code = code
        self.message = message


# --------------------------------------------------------------------------
# descriptors

def _expr_source(e: Optional[E.Expr]) -> Optional[str]:
    return None if e is None else E.pretty_print(e)


def _encoding_json(enc: A.Encoding):
    return {"field": enc.field} if enc.field is not None else {"value": enc.value}


def canvas_descriptor(compiled: A.CompiledApp, canvas: A.CanvasSpec) -> dict:
    layers = []
    for idx, layer in enumerate(canvas.layers):
        cl = compiled.layer(canvas.id, idx)
        layers.append({
            "static": layer.static,
            "mark": {"kind": layer.mark.kind,
                     "encodings": {ch: _encoding_json(enc)
                                   for ch, enc in layer.mark.encodings}},
            "separable": cl.separable,
        })
    return {"id": canvas.id, "width": canvas.width, "height": canvas.height,
            "layers": layers}


def app_descriptor(compiled: A.CompiledApp) -> dict:
    app = compiled.app
    return {
        "name": app.name,
        "viewport": {"width": app.viewport_w, "height": app.viewport_h},
        "canvases": [canvas_descriptor(compiled, c) for c in app.canvases],
        "jumps": [{
            "from": j.source,
            "to": j.target,
            "type": j.type,
            "selector": {"layer": j.selector.layer,
                         "predicate": _expr_source(j.selector.predicate)},
            "newViewport": {"centerX": _expr_source(j.center_x),
                            "centerY": _expr_source(j.center_y)},
            "name": j.name_template,
        } for j in app.jumps],
        "initial": {"canvas": app.initial_canvas,
                    "centerX": app.initial_cx, "centerY": app.initial_cy},
    }


def object_json(o: PlacedObject) -> dict:
    return {"tupleId": o.tuple_id, "fields": o.fields, "cx": o.cx, "cy": o.cy,
            "bbox": list(o.bbox)}


# --------------------------------------------------------------------------
# server

class AppServer:
    """One process serves one application."""

    def __init__(self, compiled: A.CompiledApp, engine: Optional[Engine] = None,
                 config: Optional[ServerConfig] = None):
        self.config = config or ServerConfig()
        self.compiled = compiled
        self.engine = engine
        self.cache = BackendCache(self.config.cache_capacity)
        self._httpd = ThreadingHTTPServer((self.config.host, self.config.port), _Handler)
        self._httpd.app_server = self  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def ready(self) -> bool:
        return self.engine is not None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def set_engine(self, engine: Engine) -> None:
        self.engine = engine

    def reset_cache(self) -> None:
        self.cache = BackendCache(self.config.cache_capacity)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    # route table filled below
    def do_GET(self) -> None:  # noqa: N802 (stdlib naming)
        srv: AppServer = self.server.app_server  # type: ignore[attr-defined]
        self._from_cache = None
        parsed = urllib.parse.urlparse(self.path)
        params = {k: v[-1] for k, v in urllib.parse.parse_qs(parsed.query).items()}
        try:
            if not srv.ready and parsed.path != "/health":
                raise ApiError(503, "NOT_READY", "precompute has not finished")
            if parsed.path == "/app":
                body = app_descriptor(srv.compiled)
            elif parsed.path.startswith("/canvas/"):
                body = self._canvas(srv, parsed.path[len("/canvas/"):])
            elif parsed.path == "/static":
                body = self._static(srv, params)
            elif parsed.path == "/tile":
                body = self._tile(srv, params)
            elif parsed.path == "/dbox":
                body = self._dbox(srv, params)
            elif parsed.path == "/health":
                body = {"ready": srv.ready}
            else:
                raise ApiError(404, "NOT_FOUND", f"no such endpoint {parsed.path!r}")
            self._respond(200, body)
        except ApiError as ex:
            self._respond(ex.status, {"code": ex.code, "message": ex.message})
        except StorageError as ex:
            self._respond(400, {"code": "STORAGE", "message": str(ex)})
        except Exception as ex:  # pragma: no cover - defensive
            self._respond(500, {"code": "INTERNAL", "message": str(ex)})

    # -- endpoint bodies ----------------------------------------------------

    def _canvas_or_404(self, srv: AppServer, canvas_id: str) -> A.CanvasSpec:
        try:
            return srv.compiled.app.canvas(canvas_id)
        except KeyError:
            raise ApiError(404, "UNKNOWN_CANVAS", f"no canvas {canvas_id!r}")

    def _layer_or_404(self, srv: AppServer, canvas: A.CanvasSpec, idx: int) -> A.LayerSpec:
        if not (0 <= idx < len(canvas.layers)):
            raise ApiError(404, "UNKNOWN_LAYER",
                           f"canvas {canvas.id!r} has no layer {idx}")
        return canvas.layers[idx]

    def _canvas(self, srv: AppServer, canvas_id: str) -> dict:
        return canvas_descriptor(srv.compiled, self._canvas_or_404(srv, canvas_id))

    def _static(self, srv: AppServer, params: dict) -> dict:
        canvas = self._canvas_or_404(srv, self._str(params, "canvas"))
        idx = self._int(params, "layer")
        layer = self._layer_or_404(srv, canvas, idx)
        if not layer.static:
            raise ApiError(400, "STATIC_ONLY",
                           f"layer {idx} of canvas {canvas.id!r} is not static")
        rows = srv.engine.static_rows((canvas.id, idx))
        return {"canvas": canvas.id, "layer": idx, "rows": rows}

    def _tile(self, srv: AppServer, params: dict) -> dict:
        canvas = self._canvas_or_404(srv, self._str(params, "canvas"))
        idx = self._int(params, "layer")
        layer = self._layer_or_404(srv, canvas, idx)
        if layer.static:
            raise ApiError(400, "STATIC_LAYER", "use /static for static layers")
        col = self._int(params, "col")
        row = self._int(params, "row")
        size = self._float(params, "size")
        index = params.get("index", "spatial")
        if index not in ("spatial", "join"):
            raise ApiError(400, "BAD_PARAM", f"index must be spatial|join, got {index!r}")
        if size <= 0:
            raise ApiError(400, "BAD_PARAM", "size must be positive")
        body = {"canvas": canvas.id, "layer": idx,
                "tile": {"col": col, "row": row, "size": size}}
        grid_cols = max(1, math.ceil(canvas.width / size))
        grid_rows = max(1, math.ceil(canvas.height / size))
        if col < 0 or row < 0 or col >= grid_cols or row >= grid_rows:
            body["objects"] = []
            body["warning"] = "TILE_OUT_OF_RANGE"
            return body
        tile = TileId(col, row, size)
        scheme = TileScheme(size, index)
        if index == "join" and size not in srv.engine.layers[(canvas.id, idx)].tile_maps:
            raise ApiError(400, "SIZE_NOT_PRECOMPUTED",
                           f"no tuple-tile mapping for size {size:g}")
        results, _ = execute(FetchPlan(scheme, (TileRequest(tile),)),
                             srv.engine, (canvas.id, idx), srv.cache)
        body["objects"] = [object_json(o) for o in results[0].objects]
        self._from_cache = results[0].from_cache
        return body

    def _dbox(self, srv: AppServer, params: dict) -> dict:
        canvas = self._canvas_or_404(srv, self._str(params, "canvas"))
        idx = self._int(params, "layer")
        layer = self._layer_or_404(srv, canvas, idx)
        if layer.static:
            raise ApiError(400, "STATIC_LAYER", "use /static for static layers")
        vx = self._float(params, "vx")
        vy = self._float(params, "vy")
        vw = self._float(params, "vw")
        vh = self._float(params, "vh")
        if vw <= 0 or vh <= 0:
            raise ApiError(400, "BAD_VIEWPORT", "viewport dimensions must be positive")
        inflation = (self._float(params, "inflation") if "inflation" in params
                     else srv.config.default_inflation)
        if inflation < 0:
            raise ApiError(400, "BAD_PARAM", "inflation must be >= 0")
        req = DboxRequest(Box(vx, vy, vw, vh), inflation)
        results, _ = execute(FetchPlan(DboxScheme(inflation), (req,)), srv.engine,
                             (canvas.id, idx), srv.cache)
        box = results[0].unit
        self._from_cache = results[0].from_cache
        return {"canvas": canvas.id, "layer": idx,
                "box": {"x": box.x, "y": box.y, "w": box.w, "h": box.h},
                "objects": [object_json(o) for o in results[0].objects]}

    # -- plumbing -------------------------------------------------------------

    @staticmethod
    def _str(params: dict, key: str) -> str:
        if key not in params:
            raise ApiError(400, "BAD_PARAM", f"missing query parameter {key!r}")
        return params[key]

    def _int(self, params: dict, key: str) -> int:
        raw = self._str(params, key)
        try:
            return int(raw)
        except ValueError:
            raise ApiError(400, "BAD_PARAM", f"{key} must be an integer, got {raw!r}")

    def _float(self, params: dict, key: str) -> float:
        raw = self._str(params, key)
        try:
            return float(raw)
        except ValueError:
            raise ApiError(400, "BAD_PARAM", f"{key} must be a number, got {raw!r}")

    def _respond(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        srv: AppServer = self.server.app_server  # type: ignore[attr-defined]
        encoding = None
        if srv.config.compress and "gzip" in self.headers.get("Accept-Encoding", ""):
            data = gzip.compress(data)
            encoding = "gzip"
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        if self._from_cache is not None:
            self.send_header("X-Served-From-Cache", "1" if self._from_cache else "0")
        if encoding:
            self.send_header("Content-Encoding", encoding)
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt, *args) -> None:  # quiet by default
        pass


# --------------------------------------------------------------------------
# client

class WireClient:
    """Minimal stdlib client for the wire API (bench http mode, tests)."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def get(self, path: str, params: Optional[dict] = None) -> dict:
        url = self.base_url + path
        if params:
            url += "?" + urllib.parse.urlencode(params)
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                payload = resp.read()
                if resp.headers.get("Content-Encoding") == "gzip":
                    payload = gzip.decompress(payload)
                body = json.loads(payload.decode("utf-8"))
                flag = resp.headers.get("X-Served-From-Cache")
                if flag is not None and isinstance(body, dict):
                    body["served_from_cache"] = flag == "1"
                return body
        except urllib.error.HTTPError as ex:
            try:
                body = json.loads(ex.read().decode("utf-8"))
            except Exception:
                body = {"code": "HTTP", "message": str(ex)}
            raise ApiError(ex.code, body.get("code", "HTTP"), body.get("message", ""))

    def app(self) -> dict:
        return self.get("/app")

    def canvas(self, canvas_id: str) -> dict:
        return self.get(f"/canvas/{canvas_id}")

    def static(self, canvas: str, layer: int) -> dict:
        return self.get("/static", {"canvas": canvas, "layer": layer})

    def tile(self, canvas: str, layer: int, col: int, row: int, size: float,
             index: str = "spatial") -> dict:
        return self.get("/tile", {"canvas": canvas, "layer": layer, "col": col,
                                  "row": row, "size": f"{size:g}", "index": index})

    def dbox(self, canvas: str, layer: int, vp: Box, inflation: float) -> dict:
        return self.get("/dbox", {"canvas": canvas, "layer": layer,
                                  "vx": repr(vp.x), "vy": repr(vp.y),
                                  "vw": repr(vp.w), "vh": repr(vp.h),
                                  "inflation": f"{inflation:g}"})

    @staticmethod
    def parse_object(d: dict) -> PlacedObject:
        return PlacedObject(tuple_id=d["tupleId"], fields=d["fields"],
                            cx=d["cx"], cy=d["cy"], bbox=tuple(d["bbox"]))
