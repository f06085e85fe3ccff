"""HTTP facade over the catalog/engine/export stack, plus periodic scanning.

The server is a plain ThreadingHTTPServer: many concurrent readers, while
every write funnels through the catalog store's own lock. Zonal results are
the only aggregation served over HTTP; per-pixel extraction stays in the
library and CLI where the payload lands on disk instead of a socket.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import posixpath
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from minicube import export as export_mod
from minicube.catalog import (
    BandDef,
    CatalogStore,
    ProductDefinition,
    _dataset_to_json,
    _product_to_json,
    infer_product_definition,
)
from minicube.engine import Engine, LoadQuery
from minicube.errors import IoFailure, MinicubeError
from minicube.geo import GEOGRAPHIC, CrsId, GeoPolygon, transform_polygon
from minicube.timeutil import format_utc, parse_utc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServiceConfig:
    listen: str = "127.0.0.1:8430"
    data_root: str = "minicube-data"
    scan_interval: float = 0.0  # seconds between source scans; 0 disables
    static_root: str = ""       # ui bundle directory; empty disables /ui

    def __post_init__(self):
        if self.scan_interval != 0 and self.scan_interval < 1.0:
            raise ValueError("scan_interval must be 0 (disabled) or >= 1")
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"listen must be host:port, got {self.listen!r}")

    @property
    def host(self) -> str:
        return self.listen.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen.rpartition(":")[2])


CONFIG_KEYS = ("listen", "data_root", "scan_interval", "static_root")


def load_config(path: str | None = None, env=None) -> ServiceConfig:
    """Read a flat key=value config file with environment overrides.

    Lines are `key = value`; blank lines and '#' comments are skipped.
    MINICUBE_LISTEN and MINICUBE_DATA_ROOT override the file.
    """
    env = os.environ if env is None else env
    values = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise IoFailure(f"cannot read config {path}: {e}")
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{n}: expected key=value")
            values[key.strip()] = value.strip()
    if env.get("MINICUBE_LISTEN"):
        values["listen"] = env["MINICUBE_LISTEN"]
    if env.get("MINICUBE_DATA_ROOT"):
        values["data_root"] = env["MINICUBE_DATA_ROOT"]
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "scan_interval" in values:
        values["scan_interval"] = float(values["scan_interval"])
    return ServiceConfig(**values)


class Scheduler:
    """Periodic per-product scanning at a fixed cadence from tick start.

    Each product gets one loop thread; a scan that overruns its interval
    makes the loop skip the missed ticks rather than queue them. Source
    failures are logged and retried on the next tick.
    """

    def __init__(self, store: CatalogStore, interval: float):
        self.store = store
        self.interval = interval
        self._stop = threading.Event()
        self._loops: dict = {}
        self._supervisor = None

    def start(self):
        if self.interval <= 0:
            return
        self._supervisor = threading.Thread(
            target=self._supervise, name="scan-supervisor", daemon=True)
        self._supervisor.start()

    def stop(self):
        self._stop.set()
        if self._supervisor:
            self._supervisor.join(timeout=5)
        for t in self._loops.values():
            t.join(timeout=5)

    def _supervise(self):
        while not self._stop.is_set():
            for p in self.store.products():
                if p.name not in self._loops:
                    t = threading.Thread(target=self._loop, args=(p.name,),
                                         name=f"scan-{p.name}", daemon=True)
                    self._loops[p.name] = t
                    t.start()
            self._stop.wait(min(self.interval, 1.0))

    def _loop(self, product: str):
        while not self._stop.is_set():
            started = time.monotonic()
            self.tick(product)
            next_tick = started + self.interval
            now = time.monotonic()
            while next_tick <= now:  # overlapped ticks are skipped, not queued
                next_tick += self.interval
            if self._stop.wait(next_tick - now):
                return

    def tick(self, product: str):
        """One scan pass; never raises."""
        try:
            report = self.store.scan_source(product)
            if report.records or report.errors:
                log.info("scan %s: %d new, %d errors", product,
                         len(report.records), len(report.errors))
            for err in report.errors:
                log.warning("scan %s: %s: %s", product, err["file"],
                            err["message"])
        except Exception as e:
            log.warning("scan %s failed: %s", product, e)


def _band_from_body(d: dict) -> BandDef:
    return BandDef(
        d["name"],
        d.get("sample_type", "float64"),
        d.get("nodata"),
        d.get("scale", 1.0),
        d.get("band_index_in_file", 0),
    )


def _product_from_body(d: dict) -> ProductDefinition:
    return ProductDefinition(
        name=d["name"],
        bands=tuple(_band_from_body(b) for b in d["bands"]),
        crs=CrsId(int(d["crs"])),
        resolution=tuple(d["resolution"]),
        filename_rule=d["filename_rule"],
        timestamp_format=d["timestamp_format"],
        source_kind=d.get("source_kind", "local_dir"),
        source_root=d.get("source_root", ""),
        band_roles=d.get("band_roles", ()),
    )


def _product_json(p: ProductDefinition) -> dict:
    doc = _product_to_json(p)
    doc.pop("kind", None)
    return doc


def _dataset_json(r) -> dict:
    doc = _dataset_to_json(r)
    doc.pop("kind", None)
    return doc


def _stats_json(s) -> dict:
    return {"count": s.count, "valid_count": s.valid_count, "mean": s.mean,
            "std": s.std, "min": s.min, "max": s.max, "median": s.median}


def _zonal_rows_json(table) -> list:
    return [
        {"polygon_id": pid, "product": product, "timestamp": format_utc(ts),
         "measure": measure, **_stats_json(s)}
        for pid, product, ts, measure, s in table.rows
    ]


def _polygon_feature(p: GeoPolygon) -> dict:
    """RFC 7946 feature: geometry always emitted in geographic coordinates."""
    geo = p if p.crs.is_geographic else transform_polygon(p, GEOGRAPHIC)
    rings = [[list(v) for v in geo.exterior] + [list(geo.exterior[0])]]
    for h in geo.holes:
        rings.append([list(v) for v in h] + [list(h[0])])
    return {
        "type": "Feature",
        "id": p.id,
        "geometry": {"type": "Polygon", "coordinates": rings},
        "properties": dict(p.attributes),
    }


def _load_query(body: dict) -> LoadQuery:
    if body.get("aggregate", "zonal") != "zonal":
        raise ValueError("only zonal aggregation is served over http")
    try:
        return LoadQuery(
            polygon_ids=tuple(body["polygon_ids"]),
            products=tuple(body["products"]),
            measures=tuple(body["measures"]),
            start=parse_utc(body["start"]),
            end=parse_utc(body["end"]),
            aggregate="zonal",
        )
    except KeyError as e:
        raise ValueError(f"query body is missing field {e.args[0]!r}")


class Service:
    """Owns the store, the HTTP server, and the scan scheduler."""

    def __init__(self, config: ServiceConfig, store: CatalogStore | None = None):
        self.config = config
        self.store = store if store is not None else CatalogStore(config.data_root)
        self.scheduler = Scheduler(self.store, config.scan_interval)
        self.httpd = None
        self._thread = None

    # --- lifecycle -------------------------------------------------------

    def start(self):
        try:
            self.httpd = _Server((self.config.host, self.config.port),
                                 _Handler, self)
        except OSError as e:
            raise IoFailure(
                f"cannot listen on {self.config.listen}: {e}")
        self._thread = threading.Thread(
            target=self.httpd.serve_forever, name="http", daemon=True)
        self._thread.start()
        self.scheduler.start()
        log.info("serving on %s:%d", *self.address)

    def stop(self):
        self.scheduler.stop()
        if self.httpd:
            self.httpd.shutdown()
            self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    @property
    def address(self) -> tuple:
        return self.httpd.server_address[:2]

    def serve_forever(self):
        self.start()
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # --- request handlers (called from _Handler threads) ------------------

    def handle(self, method: str, path: str, query: dict, body: bytes,
               accept: str):
        """Dispatch one request; returns (status, content_type, payload)."""
        if method == "GET":
            if path == "/healthz":
                return self._healthz()
            if path == "/products":
                return _json_ok([_product_json(p) for p in self.store.products()])
            if path == "/datasets":
                return self._get_datasets(query)
            if path == "/polygons":
                return self._get_polygons()
            if path.startswith("/polygons/"):
                pid = path[len("/polygons/"):]
                return _json_ok(_polygon_feature(self.store.get_polygon(pid)))
            if path == "/timeseries":
                return self._get_timeseries(query)
            if path == "/annotations":
                pid = _one(query, "polygon_id", default=None)
                return _json_ok(self.store.annotations(polygon_id=pid))
            if self.config.static_root and (path == "/" or path.startswith("/ui")):
                return self._static(path)
        elif method == "POST":
            if path == "/products":
                return self._post_products(_json_body(body))
            if path == "/datasets/scan":
                return self._post_scan(query)
            if path == "/polygons":
                return self._post_polygons(query, body)
            if path == "/query":
                return self._post_query(_json_body(body), accept)
            if path == "/export":
                return self._post_export(_json_body(body), merge=False)
            if path == "/export/merge":
                return self._post_export(_json_body(body), merge=True)
            if path == "/annotations":
                return self._post_annotation(_json_body(body))
        return 404, "application/json", _err_body(
            "not_found", f"no route {method} {path}")

    def _healthz(self):
        return _json_ok({
            "status": "ok",
            "products": len(self.store.products()),
            "datasets": len(self.store.query_datasets()),
            "polygons": len(self.store.polygons()),
            "annotations": len(self.store.annotations()),
        })

    def _get_datasets(self, query):
        product = _one(query, "product", default=None)
        bbox = None
        if "bbox" in query:
            parts = _one(query, "bbox").split(",")
            if len(parts) != 4:
                raise ValueError("bbox must be minx,miny,maxx,maxy")
            bbox = tuple(float(v) for v in parts)
        bbox_crs = GEOGRAPHIC
        if "bbox_crs" in query:
            bbox_crs = CrsId(int(_one(query, "bbox_crs")))
        start = end = None
        if "start" in query:
            start = parse_utc(_one(query, "start"))
        if "end" in query:
            end = parse_utc(_one(query, "end"))
        recs = self.store.query_datasets(product=product, bbox=bbox,
                                         bbox_crs=bbox_crs, start=start,
                                         end=end)
        return _json_ok([_dataset_json(r) for r in recs])

    def _get_polygons(self):
        feats = [_polygon_feature(p) for p in self.store.polygons()]
        return _json_ok({"type": "FeatureCollection", "features": feats})

    def _get_timeseries(self, query):
        pid = _one(query, "polygon_id")
        product = _one(query, "product")
        measure = _one(query, "measure")
        start = parse_utc(_one(query, "start"))
        end = parse_utc(_one(query, "end"))
        with Engine(self.store) as engine:
            series = engine.timeseries(pid, product, measure, start, end)
        return _json_ok({
            "polygon_id": pid, "product": product, "measure": measure,
            "series": [
                {"timestamp": format_utc(ts), **_stats_json(s)}
                for ts, s in series
            ],
        })

    def _post_products(self, body):
        if "sample_b64" in body:
            try:
                sample = base64.b64decode(body["sample_b64"], validate=True)
            except Exception:
                raise ValueError("sample_b64 is not valid base64")
            product = infer_product_definition(
                sample, body["name"], body["filename_rule"],
                body["timestamp_format"], sample_name=body.get("sample_name"))
            if body.get("source_root") or body.get("source_kind"):
                product = ProductDefinition(
                    name=product.name, bands=product.bands, crs=product.crs,
                    resolution=product.resolution,
                    filename_rule=product.filename_rule,
                    timestamp_format=product.timestamp_format,
                    source_kind=body.get("source_kind", "local_dir"),
                    source_root=body.get("source_root", ""),
                    band_roles=body.get("band_roles", ()),
                )
        else:
            try:
                product = _product_from_body(body)
            except KeyError as e:
                raise ValueError(f"product body is missing field {e.args[0]!r}")
            except TypeError as e:
                raise ValueError(f"malformed product body: {e}")
        registered = self.store.register_product(product)
        return 201, "application/json", json.dumps(
            _product_json(registered)).encode()

    def _post_scan(self, query):
        product = _one(query, "product")
        report = self.store.scan_source(product)
        return _json_ok({
            "product": product,
            "new_datasets": [r.id for r in report.records],
            "errors": report.errors,
        })

    def _post_polygons(self, query, body):
        crs = None
        if "crs" in query:
            crs = CrsId(int(_one(query, "crs")))
        n = self.store.ingest_polygons(body, crs_override=crs)
        return 201, "application/json", json.dumps({"imported": n}).encode()

    def _post_query(self, body, accept):
        q = _load_query(body)
        with Engine(self.store) as engine:
            table = engine.load(q)
        if "text/csv" in (accept or ""):
            return 200, "text/csv; charset=utf-8", export_mod.csv_bytes(table)
        return _json_ok({
            "mode": table.mode,
            "fingerprint": q.fingerprint(),
            "rows": _zonal_rows_json(table),
        })

    def _post_export(self, body, merge: bool):
        q = _load_query(body.get("query", {}))
        fmt = body.get("format", "csv")
        destination = body.get("destination")
        if not destination:
            raise ValueError("export body needs a destination")
        if not os.path.isabs(destination):
            destination = os.path.join(self.config.data_root, "exports",
                                       destination)
        os.makedirs(os.path.dirname(destination) or ".", exist_ok=True)
        with Engine(self.store) as engine:
            table = engine.load(q)
        if merge:
            manifest = export_mod.merge_incremental(destination, table,
                                                    q.fingerprint())
        else:
            polygons = {}
            if fmt == "geojson":
                polygons = {p.id: (p if p.crs.is_geographic else
                                   transform_polygon(p, GEOGRAPHIC))
                            for p in self.store.polygons()}
            manifest = export_mod.export_table(table, destination, fmt,
                                               q.fingerprint(), polygons)
        return _json_ok({
            "destination": destination,
            "fingerprint": manifest.fingerprint,
            "rows": len(table.rows),
            "covered": len(manifest.covered),
        })

    def _post_annotation(self, body):
        try:
            pid = body["polygon_id"]
            label = body["label"]
        except KeyError as e:
            raise ValueError(f"annotation body is missing field {e.args[0]!r}")
        if not label:
            raise ValueError("label must be non-empty")
        rec = self.store.add_annotation(
            pid, label, author=body.get("author", ""),
            note=body.get("note"))
        return 201, "application/json", json.dumps(rec).encode()

    def _static(self, path: str):
        rel = path[len("/ui"):].lstrip("/") if path.startswith("/ui") else ""
        rel = rel or "index.html"
        norm = posixpath.normpath(rel)
        if norm.startswith("..") or norm.startswith("/"):
            return 404, "application/json", _err_body("not_found", "bad path")
        full = os.path.join(self.config.static_root, norm)
        if not os.path.isfile(full):
            return 404, "application/json", _err_body("not_found",
                                                      f"no asset {norm}")
        ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
        with open(full, "rb") as f:
            return 200, ctype, f.read()


def _one(query: dict, key: str, default=...):
    vals = query.get(key)
    if not vals:
        if default is not ...:
            return default
        raise ValueError(f"missing query parameter {key!r}")
    return vals[0]


def _json_body(body: bytes) -> dict:
    try:
        doc = json.loads(body or b"")
    except ValueError:
        raise ValueError("request body is not valid json")
    if not isinstance(doc, dict):
        raise ValueError("request body must be a json object")
    return doc


def _json_ok(payload) -> tuple:
    return 200, "application/json", json.dumps(payload).encode()


def _err_body(code: str, message: str, detail=None) -> bytes:
    return json.dumps(
        {"code": code, "message": message, "detail": detail}).encode()


class _Server(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, addr, handler, service: Service):
        self.service = service
        super().__init__(addr, handler)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route access logs through logging
        log.debug("%s %s", self.address_string(), fmt % args)

    def _respond(self, status: int, ctype: str, payload: bytes):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _dispatch(self, method: str):
        parsed = urlparse(self.path)
        query = parse_qs(parsed.query)
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        try:
            status, ctype, payload = self.server.service.handle(
                method, parsed.path, query, body,
                self.headers.get("Accept", ""))
        except MinicubeError as e:
            status, ctype = e.http_status, "application/json"
            payload = json.dumps(e.to_dict()).encode()
        except ValueError as e:
            status, ctype = 400, "application/json"
            payload = _err_body("invalid_request", str(e))
        except Exception as e:
            log.exception("unhandled error on %s %s", method, self.path)
            status, ctype = 500, "application/json"
            payload = _err_body("internal_error", str(e))
        self._respond(status, ctype, payload)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")
