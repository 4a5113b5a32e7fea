"""Storage engine: ingest, materialization, indexes, query equivalence."""

import json
from pathlib import Path

import numpy as np
import pytest

from panzoom import appspec as A
from panzoom.geom import Box, TileId, tiles_overlapping_bbox
from panzoom.oracle import ScanOracle
from panzoom import storage as S

from conftest import build_engine, one_layer_app_doc, random_points_csv, write_csv


# --------------------------------------------------------------------------
# ingest

def test_ingest_three_rows(tmp_path):
    csv = write_csv(tmp_path / "t.csv", ["cx", "cy"], [(1, 2), (3, 4), (5, 6)])
    table = S.ingest("t", csv)
    assert table.n == 3
    assert table.types == {"cx": "num", "cy": "num"}
    assert table.numeric["cx"].tolist() == [1.0, 3.0, 5.0]


def test_ingest_text_column(tmp_path):
    csv = write_csv(tmp_path / "t.csv", ["name", "v"], [("ma", 1), ("ny", 2)])
    table = S.ingest("t", csv)
    assert table.types == {"name": "text", "v": "num"}
    assert table.text["name"] == ["ma", "ny"]


def test_ingest_rejects_non_numeric_in_numeric_column(tmp_path):
    csv = write_csv(tmp_path / "t.csv", ["cx"], [(1,), ("oops",), (3,)])
    with pytest.raises(S.IngestError) as exc:
        S.ingest("t", csv)
    assert "cx" in str(exc.value) and "row 1" in str(exc.value)


def test_ingest_rejects_missing_and_empty_and_ragged(tmp_path):
    with pytest.raises(S.IngestError, match="no such file"):
        S.ingest("t", tmp_path / "absent.csv")
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(S.IngestError, match="empty"):
        S.ingest("t", empty)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("a,b\n1,2\n3,4,5\n")
    with pytest.raises(S.IngestError):
        S.ingest("t", ragged)


def test_ingest_large_synthetic_count(tmp_path):
    n = 50_000  # scaled-down stand-in for the million-row case
    rng = np.random.default_rng(0)
    import pandas as pd
    pd.DataFrame({"cx": rng.uniform(0, 100, n),
                  "cy": rng.uniform(0, 100, n)}).to_csv(tmp_path / "big.csv", index=False)
    assert S.ingest("big", tmp_path / "big.csv").n == n


# --------------------------------------------------------------------------
# materialization

def _layer_from_doc(doc: str):
    app = A.parse_spec(doc)
    return app.canvases[0].layers[0]


def test_materialize_identity_points(tmp_path):
    csv = write_csv(tmp_path / "t.csv", ["cx", "cy"], [(10, 20), (30, 40), (50, 60)])
    doc = one_layer_app_doc(csv)
    layer = _layer_from_doc(doc)
    placed = S.materialize_layer(layer, S.ingest("points", csv))
    assert placed.n == 3
    assert placed.tuple_ids.tolist() == [0, 1, 2]
    assert placed.cx.tolist() == [10.0, 30.0, 50.0]
    # point bboxes collapse to the centroid
    assert placed.minx.tolist() == placed.maxx.tolist() == [10.0, 30.0, 50.0]


def test_materialize_filter_keeps_two_of_five(tmp_path):
    rows = [(i, i, v) for i, v in enumerate([3, 12, 7, 15, 9])]
    csv = write_csv(tmp_path / "t.csv", ["cx", "cy", "v"], rows)
    doc = one_layer_app_doc(csv, steps=[{"filter": "v >= 10"}])
    placed = S.materialize_layer(_layer_from_doc(doc), S.ingest("points", csv))
    assert placed.tuple_ids.tolist() == [1, 3]  # hand-filtered fixture


def test_materialize_derive_then_place(tmp_path):
    csv = write_csv(tmp_path / "t.csv", ["cx", "cy"], [(1, 1), (2, 2), (3, 3)])
    doc = one_layer_app_doc(
        csv, placement={"x": "x10", "y": "cy", "width": 0, "height": 0},
        steps=[{"derive": {"field": "x10", "expr": "cx*10"}}])
    placed = S.materialize_layer(_layer_from_doc(doc), S.ingest("points", csv))
    assert placed.cx.tolist() == [10.0, 20.0, 30.0]


def test_materialize_limit_applies_in_pipeline_order(tmp_path):
    csv = write_csv(tmp_path / "t.csv", ["cx", "cy", "v"],
                    [(i, i, i % 2) for i in range(10)])
    # limit 4 first, then filter odd: survivors are rows 1, 3
    doc = one_layer_app_doc(csv, steps=[{"limit": 4}, {"filter": "v == 1"}])
    placed = S.materialize_layer(_layer_from_doc(doc), S.ingest("points", csv))
    assert placed.tuple_ids.tolist() == [1, 3]


def test_materialize_division_by_zero_names_tuple(tmp_path):
    csv = write_csv(tmp_path / "t.csv", ["cx", "cy"], [(1, 1), (0, 2)])
    doc = one_layer_app_doc(csv, placement={"x": "10 / cx", "y": "cy",
                                            "width": 0, "height": 0})
    with pytest.raises(S.StorageError, match="tupleId 1"):
        S.materialize_layer(_layer_from_doc(doc), S.ingest("points", csv))


# --------------------------------------------------------------------------
# tile mapping

def _tile_map_pairs(tm: S.TileMap):
    return {(col, row): ids.tolist() for (col, row), ids in tm.groups.items()}


def _placed_from_bboxes(bboxes):
    bboxes = np.asarray(bboxes, dtype=np.float64)
    n = len(bboxes)
    return S.PlacedColumns(
        tuple_ids=np.arange(n, dtype=np.int64),
        cx=(bboxes[:, 0] + bboxes[:, 2]) / 2, cy=(bboxes[:, 1] + bboxes[:, 3]) / 2,
        minx=bboxes[:, 0], miny=bboxes[:, 1], maxx=bboxes[:, 2], maxy=bboxes[:, 3],
        num_fields={}, text_fields={})


def test_tile_mapping_interior_point():
    placed = _placed_from_bboxes([(100, 100, 100, 100)])
    tm = S.build_tile_mapping(placed, 1024.0)
    assert _tile_map_pairs(tm) == {(0, 0): [0]}


def test_tile_mapping_x_boundary_span():
    # verified against the rectangle-intersection oracle below
    placed = _placed_from_bboxes([(1000, 500, 1100, 600)])
    tm = S.build_tile_mapping(placed, 1024.0)
    assert set(_tile_map_pairs(tm)) == {(0, 0), (1, 0)}
    assert set(tiles_overlapping_bbox(1000, 500, 1100, 600, 1024.0)) == {(0, 0), (1, 0)}


def test_tile_mapping_corner_span():
    placed = _placed_from_bboxes([(1020, 1020, 1030, 1030)])
    tm = S.build_tile_mapping(placed, 1024.0)
    assert set(_tile_map_pairs(tm)) == {(0, 0), (1, 0), (0, 1), (1, 1)}


def test_tile_boundary_point_belongs_to_higher_tile_only():
    placed = _placed_from_bboxes([(1024, 512, 1024, 512)])
    tm = S.build_tile_mapping(placed, 1024.0)
    assert _tile_map_pairs(tm) == {(1, 0): [0]}


def test_tile_mapping_soundness_and_completeness_random():
    rng = np.random.default_rng(11)
    n, size = 400, 128.0
    x0 = rng.uniform(-50, 900, n)
    y0 = rng.uniform(-50, 900, n)
    w = rng.uniform(0, 300, n)
    h = rng.uniform(0, 300, n)
    placed = _placed_from_bboxes(np.stack([x0, y0, x0 + w, y0 + h], axis=1))
    tm = S.build_tile_mapping(placed, size)
    got = {(c, r, t) for (c, r), ids in tm.groups.items() for t in ids}
    want = set()
    for t in range(n):
        for (c, r) in tiles_overlapping_bbox(x0[t], y0[t], x0[t] + w[t],
                                             y0[t] + h[t], size):
            want.add((c, r, t))
    assert got == want


# --------------------------------------------------------------------------
# spatial index vs scan

def _scan_ids(placed, box: Box):
    hit = ((placed.minx <= box.x2) & (placed.maxx >= box.x) &
           (placed.miny <= box.y2) & (placed.maxy >= box.y))
    return placed.tuple_ids[hit].tolist()


def test_strtree_empty():
    tree = S.STRTree([], [], [], [], [])
    assert tree.query(0, 0, 1e9, 1e9).tolist() == []


def test_strtree_single_object_self_query():
    tree = S.STRTree([5], [5], [10], [10], [42])
    assert tree.query(5, 5, 10, 10).tolist() == [42]
    assert tree.query(10, 10, 11, 11).tolist() == [42]  # closed intersection
    assert tree.query(10.0001, 10, 11, 11).tolist() == []


def test_strtree_matches_scan_on_10k_rects():
    rng = np.random.default_rng(3)
    n = 10_000
    x0 = rng.uniform(0, 10_000, n)
    y0 = rng.uniform(0, 10_000, n)
    w = rng.uniform(0, 50, n)
    h = rng.uniform(0, 50, n)
    placed = _placed_from_bboxes(np.stack([x0, y0, x0 + w, y0 + h], axis=1))
    tree = S.build_spatial_index(placed)
    for _ in range(100):
        qw, qh = rng.uniform(10, 2000, 2)
        qx = rng.uniform(-qw, 10_000)
        qy = rng.uniform(-qh, 10_000)
        box = Box(qx, qy, qw, qh)
        got = sorted(tree.query(box.x, box.y, box.x2, box.y2).tolist())
        assert got == _scan_ids(placed, box)


# --------------------------------------------------------------------------
# engine query paths

def test_query_tile_join_empty_tile(small_engine):
    assert small_engine.query_tile_join(("main", 0), TileId(100, 100, 1024.0)) == []


def test_query_requires_precomputed_size(small_engine):
    with pytest.raises(S.StorageError, match="512"):
        small_engine.query_tile_join(("main", 0), TileId(0, 0, 512.0))


def test_cross_design_equivalence(small_engine):
    """query_tile_join(T) == query_box_spatial(rect(T)) == scan oracle."""
    layer = small_engine.compiled.app.canvases[0].layers[0]
    oracle = ScanOracle.build(layer, small_engine.tables["points"])
    rng = np.random.default_rng(5)
    for _ in range(50):
        col, row = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        tile = TileId(col, row, 1024.0)
        join_ids = [o.tuple_id for o in small_engine.query_tile_join(("main", 0), tile)]
        box_ids = [o.tuple_id for o in small_engine.query_box_spatial(("main", 0), tile.rect())]
        scan = oracle.query_ids(tile.rect()).tolist()
        assert join_ids == box_ids == scan
        assert join_ids == sorted(join_ids)


def test_query_box_spatial_universal_and_empty(small_engine):
    allq = small_engine.query_box_spatial(("main", 0), Box(0, 0, 4096, 4096))
    assert len(allq) == 1000
    assert small_engine.query_box_spatial(("main", 0), Box(9000, 9000, 10, 10)) == []


def test_query_box_random_matches_scan(small_engine):
    layer = small_engine.compiled.app.canvases[0].layers[0]
    oracle = ScanOracle.build(layer, small_engine.tables["points"])
    rng = np.random.default_rng(6)
    for _ in range(100):
        w, h = rng.uniform(1, 2000, 2)
        box = Box(rng.uniform(-100, 4096), rng.uniform(-100, 4096), w, h)
        got = [o.tuple_id for o in small_engine.query_box_spatial(("main", 0), box)]
        assert got == oracle.query_ids(box).tolist()


def test_separable_identity_matches_spatial(small_engine):
    rng = np.random.default_rng(8)
    for _ in range(60):
        w, h = rng.uniform(1, 1500, 2)
        box = Box(rng.uniform(0, 4096 - w), rng.uniform(0, 4096 - h), w, h)
        sep = [o.tuple_id for o in small_engine.query_box_separable(("main", 0), box)]
        spa = [o.tuple_id for o in small_engine.query_box_spatial(("main", 0), box)]
        assert sep == spa


def test_separable_scaled_and_negative_scale(tmp_path):
    """Inverse-affine pushdown with scaling, offset and a negative scale."""
    csv = random_points_csv(tmp_path / "p.csv", 800, 400, 400, seed=13)
    for x_expr in ("cx*10", "4000 - cx*10"):
        doc = one_layer_app_doc(csv, placement={"x": x_expr, "y": "cy*10",
                                                "width": 6, "height": 6})
        engine = build_engine(doc, materialize_separable=True)
        layer = engine.compiled.app.canvases[0].layers[0]
        oracle = ScanOracle.build(layer, engine.tables["points"])
        assert engine.compiled.layer("main", 0).separable
        rng = np.random.default_rng(14)
        for _ in range(60):
            w, h = rng.uniform(1, 1200, 2)
            box = Box(rng.uniform(-w, 4096), rng.uniform(-h, 4096), w, h)
            sep = [o.tuple_id for o in engine.query_box_separable(("main", 0), box)]
            assert sep == oracle.query_ids(box).tolist(), (x_expr, box)


def test_separable_with_filter_and_derive(tmp_path):
    csv = random_points_csv(tmp_path / "p.csv", 500, 400, 400, seed=23)
    doc = one_layer_app_doc(
        csv,
        placement={"x": "sx", "y": "cy*2", "width": 0, "height": 0},
        steps=[{"derive": {"field": "sx", "expr": "cx*5 + 100"}},
               {"filter": "v >= 25"}])
    engine = build_engine(doc, materialize_separable=True)
    assert engine.compiled.layer("main", 0).separable
    layer = engine.compiled.app.canvases[0].layers[0]
    oracle = ScanOracle.build(layer, engine.tables["points"])
    rng = np.random.default_rng(24)
    for _ in range(40):
        w, h = rng.uniform(10, 900, 2)
        box = Box(rng.uniform(0, 2100), rng.uniform(0, 800), w, h)
        sep = [o.tuple_id for o in engine.query_box_separable(("main", 0), box)]
        spa = [o.tuple_id for o in engine.query_box_spatial(("main", 0), box)]
        assert sep == spa == oracle.query_ids(box).tolist()


# --------------------------------------------------------------------------
# precompute

def test_precompute_skips_for_separable(tmp_path):
    csv = random_points_csv(tmp_path / "p.csv", 100, 100, 100, seed=1)
    engine = build_engine(one_layer_app_doc(csv))  # default: no materialization
    report_text = engine.precompute(tile_sizes=(256,)).to_text()
    assert "tile mapping SKIPPED" in report_text
    assert engine.layers[("main", 0)].tile_maps == {}
    assert engine.layers[("main", 0)].raw_tree is not None


def test_precompute_builds_three_mappings_when_forced(tmp_path):
    csv = random_points_csv(tmp_path / "p.csv", 100, 100, 100, seed=1)
    engine = build_engine(one_layer_app_doc(csv), tile_sizes=(256, 1024, 4096),
                          materialize_separable=True)
    ld = engine.layers[("main", 0)]
    assert sorted(ld.tile_maps) == [256.0, 1024.0, 4096.0]
    assert ld.spatial is not None


def test_precompute_nonseparable_builds_mappings(tmp_path):
    csv = random_points_csv(tmp_path / "p.csv", 100, 100, 100, seed=1)
    doc = one_layer_app_doc(csv, placement={"x": "cx*10*cy/cy", "y": "cy*10",
                                            "width": 0, "height": 0})
    engine = build_engine(doc, tile_sizes=(256, 1024, 4096))
    ld = engine.layers[("main", 0)]
    assert not engine.compiled.layer("main", 0).separable
    assert sorted(ld.tile_maps) == [256.0, 1024.0, 4096.0]
    assert ld.spatial is not None


def test_precompute_static_only_app(tmp_path):
    csv = write_csv(tmp_path / "leg.csv", ["label", "sx"], [("a", 1), ("b", 2)])
    doc = json.dumps({
        "name": "static", "viewport": {"width": 100, "height": 100},
        "data": [{"table": "legend", "file": str(csv)}],
        "canvases": [{"id": "c", "width": 500, "height": 500, "layers": [
            {"static": True, "transform": {"table": "legend", "steps": []},
             "mark": {"kind": "text", "encodings": {"label": {"field": "label"}}}}]}],
        "jumps": [], "initial": {"canvas": "c", "centerX": 0, "centerY": 0}})
    engine = build_engine(doc, tile_sizes=(256,))
    ld = engine.layers[("c", 0)]
    assert ld.spatial is None and ld.tile_maps == {} and ld.raw_tree is None
    assert engine.static_rows(("c", 0)) == [
        {"label": "a", "sx": 1.0}, {"label": "b", "sx": 2.0}]


# --------------------------------------------------------------------------
# persistence

def test_save_load_round_trip(tmp_path, small_engine):
    d = tmp_path / "artifacts"
    small_engine.save(d)
    loaded = S.Engine.load(d, small_engine.compiled)
    box = Box(100, 100, 1500, 900)
    assert ([o.tuple_id for o in loaded.query_box_spatial(("main", 0), box)]
            == [o.tuple_id for o in small_engine.query_box_spatial(("main", 0), box)])
    tile = TileId(1, 1, 1024.0)
    assert ([o.tuple_id for o in loaded.query_tile_join(("main", 0), tile)]
            == [o.tuple_id for o in small_engine.query_tile_join(("main", 0), tile)])
    assert ([o.tuple_id for o in loaded.query_box_separable(("main", 0), box)]
            == [o.tuple_id for o in small_engine.query_box_separable(("main", 0), box)])
    # objects round-trip exactly, fields included
    a = small_engine.query_box_spatial(("main", 0), box)[0]
    b = loaded.query_box_spatial(("main", 0), box)[0]
    assert a == b


def test_artifact_magic_header_checked(tmp_path, small_engine):
    d = tmp_path / "artifacts"
    small_engine.save(d)
    victim = d / "layers" / "main__0" / "spatial.pzi"
    data = bytearray(victim.read_bytes())
    data[0] ^= 0xFF
    victim.write_bytes(bytes(data))
    with pytest.raises(S.StorageError, match="magic"):
        S.Engine.load(d, small_engine.compiled)


def test_missing_manifest(tmp_path, small_engine):
    with pytest.raises(S.StorageError, match="manifest"):
        S.Engine.load(tmp_path / "nope", small_engine.compiled)
