import json
from pathlib import Path

import numpy as np
import pytest

from panzoom import appspec as A
from panzoom.storage import Engine, sniff_schema


def write_csv(path: Path, header, rows) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def random_points_csv(path: Path, n: int, w: float, h: float, seed: int) -> Path:
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0, w, n)
    ys = rng.uniform(0, h, n)
    vs = rng.uniform(0, 100, n)
    return write_csv(path, ["cx", "cy", "v"],
                     [(repr(float(x)), repr(float(y)), repr(float(v)))
                      for x, y, v in zip(xs, ys, vs)])


def one_layer_app_doc(csv_path, canvas_w=4096, canvas_h=4096,
                      placement=None, steps=None) -> str:
    placement = placement or {"x": "cx", "y": "cy", "width": 0, "height": 0}
    return json.dumps({
        "name": "fixture",
        "viewport": {"width": 800, "height": 600},
        "data": [{"table": "points", "file": str(csv_path)}],
        "canvases": [{
            "id": "main", "width": canvas_w, "height": canvas_h,
            "layers": [{
                "static": False,
                "transform": {"table": "points", "steps": steps or []},
                "placement": placement,
                "mark": {"kind": "circle", "encodings": {"radius": {"value": 2}}},
            }],
        }],
        "jumps": [],
        "initial": {"canvas": "main", "centerX": 2048, "centerY": 2048},
    })


def build_engine(doc: str, tile_sizes=(), materialize_separable=False) -> Engine:
    app = A.parse_spec(doc)
    schemas = {t: sniff_schema(f) for t, f in app.data}
    compiled = A.validate(app, schemas)
    engine = Engine(compiled)
    engine.ingest_all(".")
    engine.precompute(tile_sizes=tile_sizes, materialize_separable=materialize_separable)
    return engine


@pytest.fixture
def small_engine(tmp_path):
    """1,000 random points on a 4096x4096 canvas, everything precomputed."""
    csv = random_points_csv(tmp_path / "pts.csv", 1000, 4096, 4096, seed=42)
    return build_engine(one_layer_app_doc(csv), tile_sizes=(256.0, 1024.0),
                        materialize_separable=True)
