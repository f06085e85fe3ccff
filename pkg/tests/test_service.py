"""HTTP service: config parsing, scan scheduler, and the REST surface."""

import base64
import http.client
import json
import os
import time
from datetime import datetime, timezone

import numpy as np
import pytest

from geotiff_writer import write_geotiff
from minicube import export as export_mod
from minicube.catalog import BandDef, CatalogStore, ProductDefinition
from minicube.engine import Engine, LoadQuery
from minicube.errors import IoFailure
from minicube.geo import CrsId
from minicube.service import Scheduler, Service, ServiceConfig, load_config

UTM30 = 32630
ORIGIN = (500_000.0, 4_760_000.0)
PIX = 10.0
BANDS = ("B02", "B04", "B08")
T0 = datetime(2020, 6, 1, 10, 50, 31, tzinfo=timezone.utc)
T1 = datetime(2020, 6, 11, 10, 50, 31, tzinfo=timezone.utc)
FAR = datetime(2030, 1, 1, tzinfo=timezone.utc)


# --- config ---------------------------------------------------------------------

def test_config_defaults():
    c = ServiceConfig()
    assert c.host == "127.0.0.1" and c.port == 8430
    assert c.scan_interval == 0.0 and c.static_root == ""


def test_config_rejects_subsecond_interval():
    with pytest.raises(ValueError):
        ServiceConfig(scan_interval=0.5)
    ServiceConfig(scan_interval=0)   # disabled is fine
    ServiceConfig(scan_interval=1.0)


def test_config_rejects_bad_listen():
    with pytest.raises(ValueError):
        ServiceConfig(listen="no-port")
    with pytest.raises(ValueError):
        ServiceConfig(listen=":8430")


def test_load_config_file(tmp_path):
    p = tmp_path / "svc.conf"
    p.write_text(
        "# comment\n"
        "\n"
        "listen = 0.0.0.0:9000\n"
        "scan_interval = 30\n"
        "data_root=/var/lib/cube\n")
    c = load_config(str(p), env={})
    assert c.listen == "0.0.0.0:9000"
    assert c.scan_interval == 30.0
    assert c.data_root == "/var/lib/cube"
    assert c.static_root == ""


def test_load_config_env_overrides_file(tmp_path):
    p = tmp_path / "svc.conf"
    p.write_text("listen = 127.0.0.1:9000\ndata_root = a\n")
    c = load_config(str(p), env={"MINICUBE_LISTEN": "127.0.0.1:9100",
                                 "MINICUBE_DATA_ROOT": "b"})
    assert c.listen == "127.0.0.1:9100" and c.data_root == "b"


def test_load_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "svc.conf"
    p.write_text("lisen = 127.0.0.1:9000\n")
    with pytest.raises(ValueError, match="unknown config keys: lisen"):
        load_config(str(p), env={})


def test_load_config_rejects_bare_line(tmp_path):
    p = tmp_path / "svc.conf"
    p.write_text("listen\n")
    with pytest.raises(ValueError, match="expected key=value"):
        load_config(str(p), env={})


def test_load_config_missing_file():
    with pytest.raises(IoFailure):
        load_config("/nonexistent/svc.conf", env={})


def test_load_config_no_file_uses_defaults():
    assert load_config(None, env={}) == ServiceConfig()


# --- fixtures -------------------------------------------------------------------

def make_arrays(shape, seed):
    rng = np.random.default_rng(seed)
    return {b: rng.integers(1, 5000, shape).astype(np.uint16) for b in BANDS}


def write_scene(dirpath, ts_name, arrays, scene="T30TWN"):
    os.makedirs(dirpath, exist_ok=True)
    for band, arr in arrays.items():
        data = write_geotiff(arr, ORIGIN[0], ORIGIN[1], PIX, PIX, UTM30,
                             nodata=0.0)
        with open(os.path.join(dirpath, f"S2X_{scene}_{ts_name}_{band}.tif"),
                  "wb") as f:
            f.write(data)


def s2_product(source_root):
    return ProductDefinition(
        name="s2",
        bands=tuple(BandDef(b, "uint16", 0.0, 1e-4, 0) for b in BANDS),
        crs=CrsId(UTM30),
        resolution=(PIX, PIX),
        filename_rule="S2X_{scene}_{timestamp}_{band}.tif",
        timestamp_format="%Y%m%dT%H%M%S",
        source_kind="local_dir",
        source_root=str(source_root),
    )


def field_geojson():
    ext = [[500050, 4759900], [500250, 4759900], [500250, 4759700],
           [500050, 4759700], [500050, 4759900]]
    return json.dumps({
        "type": "FeatureCollection",
        "features": [{
            "type": "Feature", "id": "field_a",
            "geometry": {"type": "Polygon", "coordinates": [ext]},
            "properties": {"crop": "wheat"},
        }],
    }).encode()


@pytest.fixture()
def svc(tmp_path):
    """Running service on an ephemeral port over a two-scene catalog."""
    data_dir = tmp_path / "scenes"
    write_scene(str(data_dir), "20200601T105031", make_arrays((64, 64), 11))
    write_scene(str(data_dir), "20200611T105031", make_arrays((64, 64), 22))

    root = tmp_path / "cat"
    store = CatalogStore(str(root))
    store.register_product(s2_product(data_dir))
    store.scan_source("s2")
    store.ingest_polygons(field_geojson(), crs_override=CrsId(UTM30))

    config = ServiceConfig(listen="127.0.0.1:0", data_root=str(root))
    service = Service(config, store=store)
    service.start()
    yield service
    service.stop()
    store.close()


def request(service, method, path, body=None, accept=None):
    """Returns (status, content-type, payload bytes)."""
    host, port = service.address
    conn = http.client.HTTPConnection(host, port, timeout=30)
    headers = {}
    data = None
    if body is not None:
        data = body if isinstance(body, bytes) else json.dumps(body).encode()
        headers["Content-Type"] = "application/json"
    if accept:
        headers["Accept"] = accept
    try:
        conn.request(method, path, body=data, headers=headers)
        resp = conn.getresponse()
        payload = resp.read()
        return resp.status, resp.getheader("Content-Type", ""), payload
    finally:
        conn.close()


def get_json(service, path):
    status, _, payload = request(service, "GET", path)
    return status, json.loads(payload)


QUERY_BODY = {
    "polygon_ids": ["field_a"],
    "products": ["s2"],
    "measures": ["ndvi", "B04"],
    "start": "2020-06-01T00:00:00Z",
    "end": "2030-01-01T00:00:00Z",
}


# --- routes ---------------------------------------------------------------------

def test_healthz_counts(svc):
    status, doc = get_json(svc, "/healthz")
    assert status == 200
    assert doc == {"status": "ok", "products": 1, "datasets": 2,
                   "polygons": 1, "annotations": 0}


def test_products_listing(svc):
    status, doc = get_json(svc, "/products")
    assert status == 200
    assert [p["name"] for p in doc] == ["s2"]
    assert [b["name"] for b in doc[0]["bands"]] == list(BANDS)


def test_register_product_roundtrip(svc):
    body = {
        "name": "s3", "crs": UTM30, "resolution": [20.0, 20.0],
        "filename_rule": "S3_{timestamp}.tif",
        "timestamp_format": "%Y%m%dT%H%M%S",
        "bands": [{"name": "B01", "sample_type": "uint16", "nodata": 0.0,
                   "scale": 1e-4}],
    }
    status, _, payload = request(svc, "POST", "/products", body=body)
    assert status == 201
    doc = json.loads(payload)
    assert doc["name"] == "s3"
    assert doc["bands"][0]["band_index_in_file"] == 0  # default applied
    _, listing = get_json(svc, "/products")
    assert {p["name"] for p in listing} == {"s2", "s3"}


def test_register_product_bad_shape_400(svc):
    # bands given as bare strings instead of objects
    body = {
        "name": "s4", "crs": UTM30, "resolution": [20.0, 20.0],
        "filename_rule": "S4_{timestamp}.tif",
        "timestamp_format": "%Y%m%dT%H%M%S",
        "bands": ["B01", "B02"],
    }
    status, _, payload = request(svc, "POST", "/products", body=body)
    assert status == 400
    doc = json.loads(payload)
    assert doc["code"] == "invalid_request"
    assert "malformed product body" in doc["message"]


def test_register_product_conflict_409(svc):
    body = {
        "name": "s2", "crs": UTM30, "resolution": [99.0, 99.0],
        "filename_rule": "other_{timestamp}.tif",
        "timestamp_format": "%Y%m%dT%H%M%S",
        "bands": [{"name": "B01"}],
    }
    status, _, payload = request(svc, "POST", "/products", body=body)
    assert status == 409
    doc = json.loads(payload)
    assert doc["code"] == "conflicting_definition"
    assert set(doc) == {"code", "message", "detail"}


def test_register_product_idempotent_when_equal(svc):
    _, listing = get_json(svc, "/products")
    status, _, payload = request(svc, "POST", "/products", body=listing[0])
    assert status == 201
    assert json.loads(payload)["name"] == "s2"


def test_infer_product_from_sample(svc, tmp_path):
    arr = np.arange(12, dtype=np.uint16).reshape(3, 4)
    sample = write_geotiff(arr, 0.0, 30.0, 10.0, 10.0, UTM30, nodata=0.0)
    body = {
        "name": "probe",
        "sample_b64": base64.b64encode(sample).decode(),
        "sample_name": "P_20200601T105031_B05.tif",
        "filename_rule": "P_{timestamp}_{band}.tif",
        "timestamp_format": "%Y%m%dT%H%M%S",
        "source_root": str(tmp_path / "probe-src"),
    }
    status, _, payload = request(svc, "POST", "/products", body=body)
    assert status == 201
    doc = json.loads(payload)
    assert doc["crs"] == UTM30
    assert doc["resolution"] == [10.0, 10.0]
    assert [b["name"] for b in doc["bands"]] == ["B05"]
    assert doc["source_root"].endswith("probe-src")


def test_infer_product_bad_base64(svc):
    body = {"name": "x", "sample_b64": "!!!", "filename_rule": "a_{timestamp}",
            "timestamp_format": "%Y"}
    status, _, payload = request(svc, "POST", "/products", body=body)
    assert status == 400
    assert json.loads(payload)["code"] == "invalid_request"


def test_scan_endpoint_converges(svc, tmp_path):
    data_dir = tmp_path / "scenes"
    write_scene(str(data_dir), "20200621T105031", make_arrays((64, 64), 33))
    status, _, payload = request(svc, "POST", "/datasets/scan?product=s2")
    assert status == 200
    doc = json.loads(payload)
    assert doc["product"] == "s2"
    assert len(doc["new_datasets"]) == 1 and doc["errors"] == []
    status, _, payload = request(svc, "POST", "/datasets/scan?product=s2")
    assert json.loads(payload)["new_datasets"] == []
    _, health = get_json(svc, "/healthz")
    assert health["datasets"] == 3


def test_datasets_listing_filters(svc):
    status, doc = get_json(svc, "/datasets?product=s2&start=2020-06-05T00:00:00Z")
    assert status == 200
    assert len(doc) == 1
    assert doc[0]["timestamp"] == "2020-06-11T10:50:31Z"
    status, doc = get_json(svc, "/datasets?bbox=-3.2,42.0,-2.8,44.0")
    assert status == 200 and len(doc) == 2
    status, doc = get_json(svc, "/datasets?bbox=10.0,42.0,10.5,44.0")
    assert status == 200 and doc == []


def test_polygons_served_in_geographic_coords(svc):
    status, doc = get_json(svc, "/polygons")
    assert status == 200
    assert doc["type"] == "FeatureCollection" and len(doc["features"]) == 1
    feat = doc["features"][0]
    assert feat["id"] == "field_a"
    assert feat["properties"] == {"crop": "wheat"}
    ring = feat["geometry"]["coordinates"][0]
    assert ring[0] == ring[-1]
    for lon, lat in ring:
        assert -3.2 < lon < -2.8 and 42.5 < lat < 43.5

    status, single = get_json(svc, "/polygons/field_a")
    assert status == 200
    assert single["geometry"] == feat["geometry"]


def test_polygon_import_endpoint(svc):
    ext = [[500300, 4759950], [500620, 4759820], [500400, 4759500],
           [500300, 4759950]]
    fc = {"type": "FeatureCollection", "features": [{
        "type": "Feature", "id": "tri",
        "geometry": {"type": "Polygon", "coordinates": [ext]},
        "properties": {},
    }]}
    status, _, payload = request(
        svc, "POST", f"/polygons?crs={UTM30}", body=fc)
    assert status == 201
    assert json.loads(payload) == {"imported": 1}
    status, doc = get_json(svc, "/polygons/tri")
    assert status == 200


def test_unknown_polygon_404(svc):
    status, doc = get_json(svc, "/polygons/ghost")
    assert status == 404
    assert doc["code"] == "unknown_polygon"


def test_query_json_matches_engine(svc):
    status, _, payload = request(svc, "POST", "/query", body=QUERY_BODY)
    assert status == 200
    doc = json.loads(payload)
    assert doc["mode"] == "zonal"

    q = LoadQuery(polygon_ids=("field_a",), products=("s2",),
                  measures=("ndvi", "B04"), start=T0, end=FAR)
    assert doc["fingerprint"] == q.fingerprint()
    with Engine(svc.store) as engine:
        table = engine.load(q)
    assert len(doc["rows"]) == len(table.rows) == 4
    for got, (pid, product, ts, measure, s) in zip(doc["rows"], table.rows):
        assert got["polygon_id"] == pid and got["measure"] == measure
        assert got["mean"] == s.mean and got["valid_count"] == s.valid_count


def test_query_csv_equals_direct_export(svc):
    status, ctype, payload = request(svc, "POST", "/query", body=QUERY_BODY,
                                     accept="text/csv")
    assert status == 200
    assert ctype.startswith("text/csv")
    q = LoadQuery(polygon_ids=("field_a",), products=("s2",),
                  measures=("ndvi", "B04"), start=T0, end=FAR)
    with Engine(svc.store) as engine:
        expected = export_mod.csv_bytes(engine.load(q))
    assert payload == expected


def test_query_rejects_per_pixel_over_http(svc):
    body = dict(QUERY_BODY, aggregate="per_pixel")
    status, _, payload = request(svc, "POST", "/query", body=body)
    assert status == 400
    doc = json.loads(payload)
    assert doc["code"] == "invalid_request"
    assert "zonal" in doc["message"]


def test_query_missing_field_400(svc):
    body = {k: v for k, v in QUERY_BODY.items() if k != "measures"}
    status, _, payload = request(svc, "POST", "/query", body=body)
    assert status == 400
    assert "measures" in json.loads(payload)["message"]


def test_query_unknown_product_404(svc):
    status, _, payload = request(
        svc, "POST", "/query", body=dict(QUERY_BODY, products=["nope"]))
    assert status == 404
    assert json.loads(payload)["code"] == "unknown_product"


def test_timeseries_endpoint(svc):
    status, doc = get_json(
        svc, "/timeseries?polygon_id=field_a&product=s2&measure=ndvi"
             "&start=2020-06-01T00:00:00Z&end=2030-01-01T00:00:00Z")
    assert status == 200
    assert doc["measure"] == "ndvi"
    assert [pt["timestamp"] for pt in doc["series"]] == [
        "2020-06-01T10:50:31Z", "2020-06-11T10:50:31Z"]
    assert all(pt["valid_count"] > 0 for pt in doc["series"])


def test_export_endpoint_relative_destination(svc):
    body = {"query": QUERY_BODY, "destination": "report.csv"}
    status, _, payload = request(svc, "POST", "/export", body=body)
    assert status == 200
    doc = json.loads(payload)
    dest = doc["destination"]
    assert dest == os.path.join(svc.config.data_root, "exports", "report.csv")
    assert os.path.exists(dest) and os.path.exists(dest + ".manifest")
    assert doc["rows"] == 4 == doc["covered"]


def test_export_merge_endpoint_idempotent(svc):
    body = {"query": QUERY_BODY, "destination": "merged.csv"}
    status, _, p1 = request(svc, "POST", "/export/merge", body=body)
    assert status == 200
    dest = json.loads(p1)["destination"]
    with open(dest, "rb") as f:
        first = f.read()
    status, _, p2 = request(svc, "POST", "/export/merge", body=body)
    assert status == 200
    with open(dest, "rb") as f:
        assert f.read() == first
    assert json.loads(p2)["covered"] == 4


def test_export_geojson_over_http(svc):
    body = {"query": QUERY_BODY, "destination": "zones.geojson",
            "format": "geojson"}
    status, _, payload = request(svc, "POST", "/export", body=body)
    assert status == 200
    with open(json.loads(payload)["destination"]) as f:
        fc = json.load(f)
    assert fc["type"] == "FeatureCollection"
    lon, lat = fc["features"][0]["geometry"]["coordinates"][0][0]
    assert -3.2 < lon < -2.8 and 42.5 < lat < 43.5  # exported in lon/lat


def test_annotations_lifecycle(svc):
    status, _, payload = request(svc, "POST", "/annotations", body={
        "polygon_id": "field_a", "label": "flooded", "author": "ana",
        "note": "north half only"})
    assert status == 201
    rec = json.loads(payload)
    assert rec["label"] == "flooded" and rec["polygon_id"] == "field_a"

    status, listing = get_json(svc, "/annotations?polygon_id=field_a")
    assert status == 200 and len(listing) == 1
    assert listing[0]["author"] == "ana"
    status, empty = get_json(svc, "/annotations?polygon_id=other")
    assert status == 200 and empty == []


def test_annotation_needs_label(svc):
    status, _, payload = request(svc, "POST", "/annotations",
                                 body={"polygon_id": "field_a", "label": ""})
    assert status == 400
    status, _, payload = request(svc, "POST", "/annotations",
                                 body={"polygon_id": "ghost", "label": "x"})
    assert status == 404


def test_unknown_route_404(svc):
    status, doc = get_json(svc, "/nope")
    assert status == 404 and doc["code"] == "not_found"
    status, _, payload = request(svc, "POST", "/polygons/field_a")
    assert status == 404


def test_malformed_json_400(svc):
    status, _, payload = request(svc, "POST", "/query", body=b"{nope")
    assert status == 400
    doc = json.loads(payload)
    assert doc["code"] == "invalid_request"
    assert set(doc) == {"code", "message", "detail"}


def test_static_ui_serving(tmp_path):
    ui = tmp_path / "ui"
    ui.mkdir()
    (ui / "index.html").write_text("<!doctype html><title>cube</title>")
    (ui / "app.js").write_text("console.log('hi')")
    (tmp_path / "secret.txt").write_text("keep out")

    config = ServiceConfig(listen="127.0.0.1:0",
                           data_root=str(tmp_path / "cat"),
                           static_root=str(ui))
    service = Service(config)
    service.start()
    try:
        status, ctype, payload = request(service, "GET", "/ui")
        assert status == 200 and b"cube" in payload
        assert "text/html" in ctype
        status, ctype, _ = request(service, "GET", "/ui/app.js")
        assert status == 200
        assert "javascript" in ctype
        status, _, _ = request(service, "GET", "/")
        assert status == 200
        status, _, _ = request(service, "GET", "/ui/../secret.txt")
        assert status == 404
        status, _, _ = request(service, "GET", "/ui/missing.js")
        assert status == 404
    finally:
        service.stop()


def test_static_disabled_without_root(svc):
    status, _, _ = request(svc, "GET", "/ui")
    assert status == 404


# --- scheduler ------------------------------------------------------------------

def wait_until(predicate, timeout=8.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return False


def test_scheduler_picks_up_new_scenes(tmp_path):
    data_dir = tmp_path / "src"
    write_scene(str(data_dir), "20200601T105031", make_arrays((16, 16), 1))
    store = CatalogStore(str(tmp_path / "cat"))
    store.register_product(s2_product(data_dir))

    sched = Scheduler(store, interval=0.05)
    sched.start()
    try:
        assert wait_until(lambda: len(store.query_datasets()) == 1)
        write_scene(str(data_dir), "20200611T105031", make_arrays((16, 16), 2))
        write_scene(str(data_dir), "20200621T105031", make_arrays((16, 16), 3))
        assert wait_until(lambda: len(store.query_datasets()) == 3)
    finally:
        sched.stop()
        store.close()


def test_scheduler_survives_broken_source(tmp_path):
    store = CatalogStore(str(tmp_path / "cat"))
    store.register_product(s2_product(tmp_path / "does-not-exist"))
    sched = Scheduler(store, interval=0.05)
    sched.tick("s2")          # direct call must swallow the failure
    sched.start()
    time.sleep(0.3)           # a few failing ticks in the background
    sched.stop()
    assert store.query_datasets() == []
    store.close()


def test_scheduler_disabled_at_zero_interval(tmp_path):
    store = CatalogStore(str(tmp_path / "cat"))
    sched = Scheduler(store, interval=0)
    sched.start()
    assert sched._supervisor is None
    sched.stop()
    store.close()


def test_service_scheduler_scans_while_serving(tmp_path):
    data_dir = tmp_path / "src"
    store = CatalogStore(str(tmp_path / "cat"))
    store.register_product(s2_product(data_dir))
    config = ServiceConfig(listen="127.0.0.1:0", data_root=str(tmp_path / "cat"),
                           scan_interval=1.0)
    service = Service(config, store=store)
    service.start()
    try:
        write_scene(str(data_dir), "20200601T105031", make_arrays((16, 16), 5))
        assert wait_until(
            lambda: get_json(service, "/healthz")[1]["datasets"] == 1)
    finally:
        service.stop()
        store.close()


def test_port_conflict_reports_io_failure(svc):
    host, port = svc.address
    other = Service(ServiceConfig(listen=f"{host}:{port}",
                                  data_root=svc.config.data_root))
    with pytest.raises(IoFailure, match="cannot listen"):
        other.start()
