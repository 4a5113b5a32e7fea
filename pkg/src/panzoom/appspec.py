"""Declarative application model: parsing, validation, jump resolution.

An application is a JSON document with top-level keys ``name``, ``viewport``,
``data``, ``canvases``, ``jumps`` and ``initial``. Canvases hold ordered
layers (rendered bottom-up); non-static layers place each transformed row on
the canvas through expression-valued placements; jumps are click-triggered
transitions between canvases.

``parse_spec`` is purely structural (strict keys, expression syntax);
``validate`` performs the semantic checks and computes everything later
phases need: per-layer output schemas, the separability flag and the affine
forms that allow storage to skip precomputation for a layer.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Mapping, Optional, Union

from . import expr as E

JUMP_TYPES = ("geometric_zoom", "semantic_zoom", "geometric_semantic_zoom")
MARK_KINDS = ("circle", "rect", "text")
ENCODING_CHANNELS = ("x", "y", "fill", "radius", "label", "width", "height")

# error codes, stable across releases; the CLI exposes them verbatim
MALFORMED_DOCUMENT = "MALFORMED_DOCUMENT"
UNKNOWN_KEY = "UNKNOWN_KEY"
DUPLICATE_CANVAS_ID = "DUPLICATE_CANVAS_ID"
NONPOSITIVE_CANVAS_SIZE = "NONPOSITIVE_CANVAS_SIZE"
EMPTY_CANVAS = "EMPTY_CANVAS"
NONPOSITIVE_VIEWPORT = "NONPOSITIVE_VIEWPORT"
MISSING_INITIAL_CANVAS = "MISSING_INITIAL_CANVAS"
DANGLING_JUMP_TARGET = "DANGLING_JUMP_TARGET"
UNKNOWN_JUMP_TYPE = "UNKNOWN_JUMP_TYPE"
SELECTOR_LAYER_OUT_OF_RANGE = "SELECTOR_LAYER_OUT_OF_RANGE"
SELECTOR_LAYER_STATIC = "SELECTOR_LAYER_STATIC"
MISSING_PLACEMENT = "MISSING_PLACEMENT"
STATIC_LAYER_WITH_PLACEMENT = "STATIC_LAYER_WITH_PLACEMENT"
UNKNOWN_FIELD = "UNKNOWN_FIELD"
TYPE_MISMATCH = "TYPE_MISMATCH"
UNKNOWN_TABLE = "UNKNOWN_TABLE"
DUPLICATE_TABLE = "DUPLICATE_TABLE"
DUPLICATE_DERIVED_FIELD = "DUPLICATE_DERIVED_FIELD"
NONPOSITIVE_LIMIT = "NONPOSITIVE_LIMIT"
UNKNOWN_MARK_KIND = "UNKNOWN_MARK_KIND"
UNKNOWN_CHANNEL = "UNKNOWN_CHANNEL"


class CompileError(Exception):
    """Spec rejected; ``code`` is one of the module-level constants."""

    def __init__(self, code: str, message: str, path: str = ""):
        self.code = code
        self.path = path
        where = f" at {path}" if path else ""
        super().__init__(f"{code}: {message}{where}")


# --------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class FilterStep:
    predicate: E.Expr


@dataclass(frozen=True)
class DeriveStep:
    name: str
    expression: E.Expr


@dataclass(frozen=True)
class LimitStep:
    n: int


TransformStep = Union[FilterStep, DeriveStep, LimitStep]


@dataclass(frozen=True)
class TransformSpec:
    table: str
    steps: tuple[TransformStep, ...] = ()


@dataclass(frozen=True)
class PlacementSpec:
    """Centroid (x, y); bbox is [x-w/2, x+w/2] x [y-h/2, y+h/2]."""

    x: E.Expr
    y: E.Expr
    width: E.Expr
    height: E.Expr


@dataclass(frozen=True)
class Encoding:
    """Visual channel binding: either a post-transform field or a constant."""

    field: Optional[str] = None
    value: object = None


@dataclass(frozen=True)
class MarkSpec:
    kind: str
    encodings: tuple[tuple[str, Encoding], ...] = ()


@dataclass(frozen=True)
class LayerSpec:
    static: bool
    transform: TransformSpec
    mark: MarkSpec
    placement: Optional[PlacementSpec] = None


@dataclass(frozen=True)
class CanvasSpec:
    id: str
    width: float
    height: float
    layers: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class SelectorSpec:
    layer: int
    predicate: Optional[E.Expr] = None


@dataclass(frozen=True)
class JumpSpec:
    source: str
    target: str
    type: str
    selector: SelectorSpec
    center_x: E.Expr
    center_y: E.Expr
    name_template: str = ""


@dataclass(frozen=True)
class AppSpec:
    name: str
    viewport_w: float
    viewport_h: float
    data: tuple[tuple[str, str], ...]  # (table, file path)
    canvases: tuple[CanvasSpec, ...]
    jumps: tuple[JumpSpec, ...]
    initial_canvas: str
    initial_cx: float
    initial_cy: float

    def canvas(self, canvas_id: str) -> CanvasSpec:
        for c in self.canvases:
            if c.id == canvas_id:
                return c
        raise KeyError(canvas_id)


@dataclass(frozen=True)
class CompiledLayer:
    canvas_id: str
    index: int
    static: bool
    schema: tuple[tuple[str, str], ...]  # (column, "num"|"text"), post-transform
    separable: bool = False
    affine_x: Optional[E.AffineForm] = None
    affine_y: Optional[E.AffineForm] = None
    half_w: float = 0.0  # literal width/2 when separable
    half_h: float = 0.0

    def schema_dict(self) -> dict[str, str]:
        return dict(self.schema)


@dataclass(frozen=True)
class CompiledApp:
    app: AppSpec
    layers: tuple[CompiledLayer, ...]

    def layer(self, canvas_id: str, index: int) -> CompiledLayer:
        for cl in self.layers:
            if cl.canvas_id == canvas_id and cl.index == index:
                return cl
        raise KeyError((canvas_id, index))


# --------------------------------------------------------------------------
# parsing (structural only)

def _err(code, message, path):
    raise CompileError(code, message, path)


def _require(obj, key, typ, path):
    if key not in obj:
        _err(MALFORMED_DOCUMENT, f"missing key {key!r}", path)
    v = obj[key]
    if typ is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            _err(MALFORMED_DOCUMENT, f"key {key!r} must be a number", path)
        return float(v)
    if not isinstance(v, typ):
        _err(MALFORMED_DOCUMENT, f"key {key!r} must be {typ.__name__}", path)
    return v


def _check_keys(obj, allowed, path):
    for k in obj:
        if k not in allowed:
            _err(UNKNOWN_KEY, f"unknown key {k!r}", path)


def _parse_expr(source, path):
    if isinstance(source, bool):
        _err(MALFORMED_DOCUMENT, "expression must be a string or number", path)
    if isinstance(source, (int, float)):
        return E.Lit(float(source))
    if not isinstance(source, str):
        _err(MALFORMED_DOCUMENT, "expression must be a string or number", path)
    try:
        return E.parse_expr(source)
    except E.ExprError as ex:
        _err(MALFORMED_DOCUMENT, f"bad expression {source!r}: {ex}", path)


def _parse_step(obj, path):
    if not isinstance(obj, dict) or len(obj) != 1:
        _err(MALFORMED_DOCUMENT, "transform step must have exactly one key", path)
    (kind, body), = obj.items()
    if kind == "filter":
        return FilterStep(_parse_expr(body, path))
    if kind == "derive":
        if not isinstance(body, dict):
            _err(MALFORMED_DOCUMENT, "derive body must be an object", path)
        _check_keys(body, {"field", "expr"}, path)
        name = _require(body, "field", str, path)
        return DeriveStep(name, _parse_expr(_require(body, "expr", (str, int, float), path), path))
    if kind == "limit":
        if isinstance(body, bool) or not isinstance(body, int):
            _err(MALFORMED_DOCUMENT, "limit must be an integer", path)
        return LimitStep(body)
    _err(UNKNOWN_KEY, f"unknown transform step {kind!r}", path)


def _parse_transform(obj, path):
    _check_keys(obj, {"table", "steps"}, path)
    table = _require(obj, "table", str, path)
    steps = tuple(
        _parse_step(s, f"{path}.steps[{i}]") for i, s in enumerate(obj.get("steps", []))
    )
    return TransformSpec(table, steps)


def _parse_mark(obj, path):
    _check_keys(obj, {"kind", "encodings"}, path)
    kind = _require(obj, "kind", str, path)
    encodings = []
    for channel, enc in obj.get("encodings", {}).items():
        epath = f"{path}.encodings.{channel}"
        if isinstance(enc, dict):
            _check_keys(enc, {"field", "value"}, epath)
            if ("field" in enc) == ("value" in enc):
                _err(MALFORMED_DOCUMENT, "encoding needs exactly one of field/value", epath)
            if "field" in enc:
                encodings.append((channel, Encoding(field=_require(enc, "field", str, epath))))
            else:
                encodings.append((channel, Encoding(value=enc["value"])))
        else:
            _err(MALFORMED_DOCUMENT, "encoding must be {field:...} or {value:...}", epath)
    return MarkSpec(kind, tuple(encodings))


def _parse_layer(obj, path):
    _check_keys(obj, {"static", "transform", "placement", "mark"}, path)
    static = _require(obj, "static", bool, path)
    transform = _parse_transform(_require(obj, "transform", dict, path), f"{path}.transform")
    mark = _parse_mark(_require(obj, "mark", dict, path), f"{path}.mark")
    placement = None
    if "placement" in obj:
        pobj = obj["placement"]
        ppath = f"{path}.placement"
        if not isinstance(pobj, dict):
            _err(MALFORMED_DOCUMENT, "placement must be an object", ppath)
        _check_keys(pobj, {"x", "y", "width", "height"}, ppath)
        placement = PlacementSpec(
            x=_parse_expr(_require(pobj, "x", (str, int, float), ppath), f"{ppath}.x"),
            y=_parse_expr(_require(pobj, "y", (str, int, float), ppath), f"{ppath}.y"),
            width=_parse_expr(pobj.get("width", 0.0), f"{ppath}.width"),
            height=_parse_expr(pobj.get("height", 0.0), f"{ppath}.height"),
        )
    return LayerSpec(static=static, transform=transform, mark=mark, placement=placement)


def _parse_jump(obj, path):
    _check_keys(obj, {"from", "to", "type", "selector", "newViewport", "name"}, path)
    sobj = _require(obj, "selector", dict, path)
    _check_keys(sobj, {"layer", "predicate"}, f"{path}.selector")
    layer = sobj.get("layer")
    if isinstance(layer, bool) or not isinstance(layer, int):
        _err(MALFORMED_DOCUMENT, "selector.layer must be an integer", path)
    predicate = None
    if "predicate" in sobj:
        predicate = _parse_expr(sobj["predicate"], f"{path}.selector.predicate")
    vobj = _require(obj, "newViewport", dict, path)
    _check_keys(vobj, {"centerX", "centerY"}, f"{path}.newViewport")
    return JumpSpec(
        source=_require(obj, "from", str, path),
        target=_require(obj, "to", str, path),
        type=_require(obj, "type", str, path),
        selector=SelectorSpec(layer=layer, predicate=predicate),
        center_x=_parse_expr(_require(vobj, "centerX", (str, int, float), path), f"{path}.newViewport.centerX"),
        center_y=_parse_expr(_require(vobj, "centerY", (str, int, float), path), f"{path}.newViewport.centerY"),
        name_template=obj.get("name", ""),
    )


def parse_spec(document: str) -> AppSpec:
    """Parse the JSON document into an AppSpec. Structure and expression
    syntax only; semantic checks happen in :func:`validate`."""
    try:
        root = json.loads(document)
    except json.JSONDecodeError as ex:
        raise CompileError(MALFORMED_DOCUMENT, f"invalid JSON: {ex}", f"line {ex.lineno}")
    if not isinstance(root, dict):
        raise CompileError(MALFORMED_DOCUMENT, "top level must be an object")
    _check_keys(root, {"name", "viewport", "data", "canvases", "jumps", "initial"}, "$")

    vobj = _require(root, "viewport", dict, "$")
    _check_keys(vobj, {"width", "height"}, "$.viewport")

    data = []
    for i, d in enumerate(root.get("data", [])):
        dpath = f"$.data[{i}]"
        if not isinstance(d, dict):
            _err(MALFORMED_DOCUMENT, "data source must be an object", dpath)
        _check_keys(d, {"table", "file"}, dpath)
        data.append((_require(d, "table", str, dpath), _require(d, "file", str, dpath)))

    canvases = []
    for i, c in enumerate(_require(root, "canvases", list, "$")):
        cpath = f"$.canvases[{i}]"
        if not isinstance(c, dict):
            _err(MALFORMED_DOCUMENT, "canvas must be an object", cpath)
        _check_keys(c, {"id", "width", "height", "layers"}, cpath)
        layers = tuple(
            _parse_layer(l, f"{cpath}.layers[{j}]")
            for j, l in enumerate(_require(c, "layers", list, cpath))
        )
        canvases.append(CanvasSpec(
            id=_require(c, "id", str, cpath),
            width=_require(c, "width", float, cpath),
            height=_require(c, "height", float, cpath),
            layers=layers,
        ))

    jumps = tuple(
        _parse_jump(j, f"$.jumps[{i}]") for i, j in enumerate(root.get("jumps", []))
    )

    iobj = _require(root, "initial", dict, "$")
    _check_keys(iobj, {"canvas", "centerX", "centerY"}, "$.initial")

    return AppSpec(
        name=_require(root, "name", str, "$"),
        viewport_w=_require(vobj, "width", float, "$.viewport"),
        viewport_h=_require(vobj, "height", float, "$.viewport"),
        data=tuple(data),
        canvases=tuple(canvases),
        jumps=jumps,
        initial_canvas=_require(iobj, "canvas", str, "$.initial"),
        initial_cx=_require(iobj, "centerX", float, "$.initial"),
        initial_cy=_require(iobj, "centerY", float, "$.initial"),
    )


# --------------------------------------------------------------------------
# validation / compilation

def _check_expr_fields(e: E.Expr, schema: Mapping[str, str], path: str,
                       want: str = "num") -> None:
    for name in sorted(E.fields_of(e)):
        if name not in schema:
            _err(UNKNOWN_FIELD, f"unknown field {name!r}", path)
        if schema[name] != "num":
            _err(TYPE_MISMATCH, f"field {name!r} is not numeric", path)
    if E.type_of(e) != want:
        _err(TYPE_MISMATCH, f"expression must be {want}-typed", path)


def _apply_transform_schema(tf: TransformSpec, schema: dict[str, str], path: str) -> dict[str, str]:
    out = dict(schema)
    for i, step in enumerate(tf.steps):
        spath = f"{path}.steps[{i}]"
        if isinstance(step, FilterStep):
            _check_expr_fields(step.predicate, out, spath, want="bool")
        elif isinstance(step, DeriveStep):
            if step.name in out:
                _err(DUPLICATE_DERIVED_FIELD, f"field {step.name!r} already exists", spath)
            _check_expr_fields(step.expression, out, spath)
            out[step.name] = "num"
        else:
            if step.n <= 0:
                _err(NONPOSITIVE_LIMIT, f"limit must be positive, got {step.n}", spath)
    return out


def _inline_derives(e: E.Expr, env: Mapping[str, E.Expr]) -> E.Expr:
    if isinstance(e, E.Field) and e.name in env:
        return env[e.name]
    if isinstance(e, E.Unary):
        return E.Unary(e.op, _inline_derives(e.operand, env))
    if isinstance(e, E.Binary):
        return E.Binary(e.op, _inline_derives(e.left, env), _inline_derives(e.right, env))
    return e


def _layer_separability(layer: LayerSpec):
    """(affine_x, affine_y, half_w, half_h) when the layer qualifies for the
    raw-index fast path, else None.

    Requirements: x and y each affine in one raw column after inlining
    derive steps, literal width/height, and a limit-free transform (a limit
    needs global knowledge a box-local candidate set cannot give).
    """
    p = layer.placement
    if p is None:
        return None
    if any(isinstance(s, LimitStep) for s in layer.transform.steps):
        return None
    if not isinstance(p.width, E.Lit) or not isinstance(p.height, E.Lit):
        return None
    env: dict[str, E.Expr] = {}
    for step in layer.transform.steps:
        if isinstance(step, DeriveStep):
            env[step.name] = _inline_derives(step.expression, env)
    ax = E.as_affine(_inline_derives(p.x, env))
    ay = E.as_affine(_inline_derives(p.y, env))
    if ax is None or ay is None:
        return None
    return ax, ay, p.width.value / 2.0, p.height.value / 2.0


def validate(app: AppSpec, schemas: Mapping[str, Mapping[str, str]]) -> CompiledApp:
    """Semantic validation; returns the executable plan.

    ``schemas`` maps each ingested table to its column types ("num"/"text").
    """
    if app.viewport_w <= 0 or app.viewport_h <= 0:
        _err(NONPOSITIVE_VIEWPORT, "viewport dimensions must be positive", "$.viewport")

    seen_tables = set()
    for table, _path in app.data:
        if table in seen_tables:
            _err(DUPLICATE_TABLE, f"table {table!r} declared twice", "$.data")
        seen_tables.add(table)

    seen = set()
    for c in app.canvases:
        if c.id in seen:
            _err(DUPLICATE_CANVAS_ID, f"canvas {c.id!r} declared twice", "$.canvases")
        seen.add(c.id)

    compiled: list[CompiledLayer] = []
    for c in app.canvases:
        cpath = f"$.canvases[{c.id}]"
        if c.width <= 0 or c.height <= 0:
            _err(NONPOSITIVE_CANVAS_SIZE, f"canvas {c.id!r} has nonpositive size", cpath)
        if not c.layers:
            _err(EMPTY_CANVAS, f"canvas {c.id!r} has no layers", cpath)
        for idx, layer in enumerate(c.layers):
            lpath = f"{cpath}.layers[{idx}]"
            if layer.static and layer.placement is not None:
                _err(STATIC_LAYER_WITH_PLACEMENT, "static layers take no placement", lpath)
            if not layer.static and layer.placement is None:
                _err(MISSING_PLACEMENT, "non-static layers need a placement", lpath)
            table = layer.transform.table
            if table not in schemas:
                _err(UNKNOWN_TABLE, f"table {table!r} is not a data source", lpath)
            schema = _apply_transform_schema(
                layer.transform, dict(schemas[table]), f"{lpath}.transform")

            if layer.mark.kind not in MARK_KINDS:
                _err(UNKNOWN_MARK_KIND, f"unknown mark kind {layer.mark.kind!r}", lpath)
            for channel, enc in layer.mark.encodings:
                if channel not in ENCODING_CHANNELS:
                    _err(UNKNOWN_CHANNEL, f"unknown channel {channel!r}", f"{lpath}.mark")
                if enc.field is not None and enc.field not in schema:
                    _err(UNKNOWN_FIELD, f"unknown field {enc.field!r}", f"{lpath}.mark")

            sep = None
            if layer.placement is not None:
                ppath = f"{lpath}.placement"
                for part, pe in (("x", layer.placement.x), ("y", layer.placement.y),
                                 ("width", layer.placement.width),
                                 ("height", layer.placement.height)):
                    _check_expr_fields(pe, schema, f"{ppath}.{part}")
                sep = _layer_separability(layer)

            compiled.append(CompiledLayer(
                canvas_id=c.id,
                index=idx,
                static=layer.static,
                schema=tuple(sorted(schema.items())),
                separable=sep is not None,
                affine_x=sep[0] if sep else None,
                affine_y=sep[1] if sep else None,
                half_w=sep[2] if sep else 0.0,
                half_h=sep[3] if sep else 0.0,
            ))

    canvas_ids = {c.id for c in app.canvases}
    for i, jump in enumerate(app.jumps):
        jpath = f"$.jumps[{i}]"
        if jump.source not in canvas_ids:
            _err(DANGLING_JUMP_TARGET, f"jump 'from' canvas {jump.source!r} does not exist", jpath)
        if jump.target not in canvas_ids:
            _err(DANGLING_JUMP_TARGET, f"jump 'to' canvas {jump.target!r} does not exist", jpath)
        if jump.type not in JUMP_TYPES:
            _err(UNKNOWN_JUMP_TYPE, f"unknown jump type {jump.type!r}", jpath)
        source = app.canvas(jump.source)
        if not (0 <= jump.selector.layer < len(source.layers)):
            _err(SELECTOR_LAYER_OUT_OF_RANGE,
                 f"selector layer {jump.selector.layer} out of range", jpath)
        if source.layers[jump.selector.layer].static:
            _err(SELECTOR_LAYER_STATIC, "selector layer must be non-static", jpath)
        sel_layer = next(cl for cl in compiled
                         if cl.canvas_id == jump.source and cl.index == jump.selector.layer)
        schema = sel_layer.schema_dict()
        if jump.selector.predicate is not None:
            _check_expr_fields(jump.selector.predicate, schema,
                               f"{jpath}.selector.predicate", want="bool")
        _check_expr_fields(jump.center_x, schema, f"{jpath}.newViewport.centerX")
        _check_expr_fields(jump.center_y, schema, f"{jpath}.newViewport.centerY")
        for name in template_fields(jump.name_template):
            if name not in schema:
                _err(UNKNOWN_FIELD, f"template field {name!r} unknown", f"{jpath}.name")

    if app.initial_canvas not in canvas_ids:
        _err(MISSING_INITIAL_CANVAS,
             f"initial canvas {app.initial_canvas!r} does not exist", "$.initial")

    return CompiledApp(app=app, layers=tuple(compiled))


# --------------------------------------------------------------------------
# jumps

def template_fields(template: str) -> list[str]:
    return re.findall(r"\{([A-Za-z_][A-Za-z0-9_]*)\}", template)


def _format_value(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def interpolate_template(template: str, row: Mapping[str, object]) -> str:
    def sub(m):
        name = m.group(1)
        if name not in row:
            raise E.ExprEvalError(f"template field {name!r} missing from row")
        return _format_value(row[name])

    return re.sub(r"\{([A-Za-z_][A-Za-z0-9_]*)\}", sub, template)


def clamp_center(cx: float, cy: float, canvas_w: float, canvas_h: float,
                 viewport_w: float, viewport_h: float) -> tuple[float, float]:
    """Nearest center putting the viewport inside the canvas."""
    if viewport_w >= canvas_w:
        cx = canvas_w / 2.0
    else:
        cx = min(max(cx, viewport_w / 2.0), canvas_w - viewport_w / 2.0)
    if viewport_h >= canvas_h:
        cy = canvas_h / 2.0
    else:
        cy = min(max(cy, viewport_h / 2.0), canvas_h - viewport_h / 2.0)
    return cx, cy


def resolve_jump(compiled: CompiledApp, jump: JumpSpec,
                 row: Mapping[str, object]) -> tuple[str, float, float, str]:
    """(target canvas, clamped center x/y, display name) for a clicked row.

    The row must satisfy the jump's selector predicate.
    """
    if jump.selector.predicate is not None:
        if not E.evaluate(jump.selector.predicate, row):
            raise E.ExprEvalError("row does not satisfy the jump selector predicate")
    cx = E.evaluate(jump.center_x, row)
    cy = E.evaluate(jump.center_y, row)
    target = compiled.app.canvas(jump.target)
    cx, cy = clamp_center(cx, cy, target.width, target.height,
                          compiled.app.viewport_w, compiled.app.viewport_h)
    name = interpolate_template(jump.name_template, row)
    return jump.target, cx, cy, name
