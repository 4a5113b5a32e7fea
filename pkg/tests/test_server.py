"""Wire API: endpoints, error codes, determinism, concurrency."""

import concurrent.futures
import json
import urllib.request
from pathlib import Path

import pytest

from panzoom import appspec as A
from panzoom.geom import Box, TileId
from panzoom.server import ApiError, AppServer, ServerConfig, WireClient
from panzoom.storage import Engine, sniff_schema

from conftest import build_engine, one_layer_app_doc, random_points_csv

REPO = Path(__file__).resolve().parents[1]
USMAP = REPO / "examples" / "usmap.app.json"


@pytest.fixture(scope="module")
def points_server(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("srv")
    csv = random_points_csv(tmp / "p.csv", 1500, 4096, 4096, seed=55)
    engine = build_engine(one_layer_app_doc(csv), tile_sizes=(256.0, 1024.0),
                          materialize_separable=True)
    server = AppServer(engine.compiled, engine, ServerConfig(port=0))
    server.start()
    yield server, engine, WireClient(f"http://127.0.0.1:{server.port}")
    server.stop()


@pytest.fixture(scope="module")
def usmap_server():
    app = A.parse_spec(USMAP.read_text())
    schemas = {t: sniff_schema(REPO / "examples" / f) for t, f in app.data}
    compiled = A.validate(app, schemas)
    engine = Engine(compiled)
    engine.ingest_all(REPO / "examples")
    engine.precompute()  # separable layers: raw index only; statics materialized
    server = AppServer(compiled, engine, ServerConfig(port=0))
    server.start()
    yield server, WireClient(f"http://127.0.0.1:{server.port}")
    server.stop()


# --------------------------------------------------------------------------
# /app and /canvas

def test_app_descriptor_usmap(usmap_server):
    _, client = usmap_server
    body = client.app()
    assert body["name"] == "usmap"
    assert [c["id"] for c in body["canvases"]] == ["statemap", "countymap"]
    assert len(body["jumps"]) == 1
    jump = body["jumps"][0]
    assert jump["type"] == "geometric_semantic_zoom"
    assert jump["selector"]["layer"] == 1
    assert jump["newViewport"]["centerX"] == "cx * 5.0 - 1000.0"
    assert body["initial"]["canvas"] == "statemap"
    # enough layer metadata to render without further questions
    legend = body["canvases"][0]["layers"][0]
    assert legend["static"] is True
    assert legend["mark"]["kind"] == "rect"


def test_app_descriptor_single_canvas_no_jumps(points_server):
    _, _, client = points_server
    body = client.app()
    assert len(body["canvases"]) == 1
    assert body["jumps"] == []


def test_canvas_endpoint(usmap_server):
    _, client = usmap_server
    body = client.canvas("countymap")
    assert body["width"] == 10000
    assert len(body["layers"]) == 2
    with pytest.raises(ApiError) as exc:
        client.canvas("atlantis")
    assert exc.value.code == "UNKNOWN_CANVAS"


def test_not_ready_returns_503():
    doc = one_layer_app_doc("unused.csv")
    app = A.parse_spec(doc)
    compiled = A.validate(app, {"points": {"cx": "num", "cy": "num", "v": "num"}})
    server = AppServer(compiled, engine=None, config=ServerConfig(port=0))
    server.start()
    try:
        client = WireClient(f"http://127.0.0.1:{server.port}")
        with pytest.raises(ApiError) as exc:
            client.app()
        assert exc.value.status == 503 and exc.value.code == "NOT_READY"
    finally:
        server.stop()


# --------------------------------------------------------------------------
# /static

def test_static_rows_and_errors(usmap_server):
    _, client = usmap_server
    body = client.static("statemap", 0)
    assert len(body["rows"]) == 5
    assert body["rows"][0]["label"] == "under 2"
    with pytest.raises(ApiError) as exc:
        client.static("statemap", 1)
    assert exc.value.code == "STATIC_ONLY"
    with pytest.raises(ApiError) as exc:
        client.static("statemap", 9)
    assert exc.value.code == "UNKNOWN_LAYER"


def test_static_repeat_is_byte_identical(usmap_server):
    server, _ = usmap_server
    url = f"http://127.0.0.1:{server.port}/static?canvas=statemap&layer=0"
    a = urllib.request.urlopen(url).read()
    b = urllib.request.urlopen(url).read()
    assert a == b


# --------------------------------------------------------------------------
# /tile

def test_tile_matches_engine(points_server):
    _, engine, client = points_server
    body = client.tile("main", 0, 1, 1, 1024, index="join")
    want = [o.tuple_id for o in engine.query_tile_join(("main", 0), TileId(1, 1, 1024.0))]
    assert [o["tupleId"] for o in body["objects"]] == want
    # wire objects carry exactly the renderable payload
    o = body["objects"][0]
    assert set(o) == {"tupleId", "fields", "cx", "cy", "bbox"}
    assert len(o["bbox"]) == 4


def test_tile_spatial_equals_join(points_server):
    _, _, client = points_server
    a = client.tile("main", 0, 2, 1, 1024, index="join")
    b = client.tile("main", 0, 2, 1, 1024, index="spatial")
    assert ([o["tupleId"] for o in a["objects"]]
            == [o["tupleId"] for o in b["objects"]])


def test_tile_out_of_range_warns(points_server):
    _, _, client = points_server
    body = client.tile("main", 0, 99, 0, 1024)
    assert body["objects"] == [] and body["warning"] == "TILE_OUT_OF_RANGE"


def test_tile_size_not_precomputed(points_server):
    _, _, client = points_server
    with pytest.raises(ApiError) as exc:
        client.tile("main", 0, 0, 0, 512, index="join")
    assert exc.value.code == "SIZE_NOT_PRECOMPUTED"


def test_tile_on_separable_only_app_uses_fast_path(usmap_server):
    _, client = usmap_server
    body = client.tile("statemap", 1, 0, 0, 1024, index="spatial")
    assert len(body["objects"]) > 0  # states in the top-left 1024x1024


# --------------------------------------------------------------------------
# /dbox

def test_dbox_inflation_zero_echoes_viewport(points_server):
    _, _, client = points_server
    body = client.dbox("main", 0, Box(100, 200, 800, 600), 0.0)
    assert body["box"] == {"x": 100.0, "y": 200.0, "w": 800.0, "h": 600.0}


def test_dbox_clamped_at_origin(points_server):
    _, _, client = points_server
    body = client.dbox("main", 0, Box(0, 0, 1000, 500), 0.5)
    assert body["box"] == {"x": 0.0, "y": 0.0, "w": 1250.0, "h": 625.0}


def test_dbox_whole_canvas_returns_everything(points_server):
    _, engine, client = points_server
    body = client.dbox("main", 0, Box(0, 0, 4096, 4096), 0.0)
    assert len(body["objects"]) == 1500


def test_dbox_rejects_nonpositive_viewport(points_server):
    _, _, client = points_server
    with pytest.raises(ApiError) as exc:
        client.dbox("main", 0, Box(0, 0, -5, 100), 0.0)
    assert exc.value.code == "BAD_VIEWPORT"


def test_dbox_second_request_serves_from_cache(points_server):
    _, _, client = points_server
    vp = Box(512, 512, 777, 555)
    first = client.dbox("main", 0, vp, 0.5)
    second = client.dbox("main", 0, vp, 0.5)
    assert second["served_from_cache"] is True
    assert ([o["tupleId"] for o in first["objects"]]
            == [o["tupleId"] for o in second["objects"]])


# --------------------------------------------------------------------------
# behavior under concurrency, compression

def test_concurrent_identical_requests_are_identical(points_server):
    server, _, _ = points_server
    url = (f"http://127.0.0.1:{server.port}"
           "/dbox?canvas=main&layer=0&vx=300&vy=300&vw=900&vh=700&inflation=0.25")
    def fetch(_):
        return urllib.request.urlopen(url).read()
    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
        bodies = list(pool.map(fetch, range(16)))
    assert len(set(bodies)) == 1


def test_gzip_when_enabled(tmp_path):
    csv = random_points_csv(tmp_path / "p.csv", 50, 100, 100, seed=3)
    engine = build_engine(one_layer_app_doc(csv), materialize_separable=True)
    server = AppServer(engine.compiled, engine,
                       ServerConfig(port=0, compress=True))
    server.start()
    try:
        req = urllib.request.Request(
            f"http://127.0.0.1:{server.port}/app",
            headers={"Accept-Encoding": "gzip"})
        resp = urllib.request.urlopen(req)
        assert resp.headers.get("Content-Encoding") == "gzip"
        import gzip as gz
        json.loads(gz.decompress(resp.read()))
        # and the WireClient transparently decodes it
        client = WireClient(f"http://127.0.0.1:{server.port}")
        assert client.app()["name"] == "fixture"
    finally:
        server.stop()


def test_data_responses_byte_identical_across_repeats(points_server):
    """Bodies are pure functions of the request; the cache flag rides a
    header so hits and misses serialize identically."""
    server, _, _ = points_server
    base = f"http://127.0.0.1:{server.port}"
    for path in ("/tile?canvas=main&layer=0&col=1&row=2&size=1024&index=spatial",
                 "/dbox?canvas=main&layer=0&vx=50&vy=60&vw=700&vh=500&inflation=0.5"):
        a = urllib.request.urlopen(base + path).read()
        b = urllib.request.urlopen(base + path).read()
        assert a == b


def test_unknown_endpoint_404(points_server):
    _, _, client = points_server
    with pytest.raises(ApiError) as exc:
        client.get("/nope")
    assert exc.value.status == 404
