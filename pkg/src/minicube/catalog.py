"""Product definitions, scene index, polygon store and source scanner.

State lives in memory and is made durable through an append-only record log
(newline-delimited JSON, one kind-tagged record per line, version header
first) plus an optional compaction snapshot in the same format. Reload
reproduces the exact in-memory state; a log whose tail was cut mid-record
reloads to the last complete record.

Single writer, many readers: every mutation and every read of shared dicts
happens under one lock, and mutations apply whole records at a time, so a
query never observes a half-ingested scene.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

from minicube import sources
from minicube.errors import (
    ConflictingDefinition,
    InconsistentScene,
    InvalidPattern,
    IoFailure,
    MalformedGeoJson,
    PatternMismatch,
    UnknownPolygon,
    UnknownProduct,
)
from minicube.geo import GEOGRAPHIC, CrsId, GeoPolygon, transform_polygon
from minicube.raster_io import GeoTransform, RasterMetadata, parse_metadata
from minicube.timeutil import format_utc, now_utc, parse_utc

log = logging.getLogger(__name__)

LOG_FORMAT_VERSION = 1
_HEADER = {"kind": "header", "format": "minicube-catalog", "version": LOG_FORMAT_VERSION}

_PLACEHOLDER = re.compile(r"\{(timestamp|band|scene)\}")


def compile_filename_rule(rule: str) -> re.Pattern:
    """Compile a filename rule to a regex.

    Two spellings are accepted: a template with {timestamp} / {band} /
    {scene} placeholders (each matching a run free of '_', '/', '.'), or a
    raw regex using (?P<...>) groups for full control. The timestamp capture
    is mandatory; band and scene are optional.
    """
    if "(?P<" in rule:
        try:
            rx = re.compile(rule)
        except re.error as exc:
            raise InvalidPattern(f"bad filename rule: {exc}")
    else:
        parts, pos = [], 0
        for m in _PLACEHOLDER.finditer(rule):
            parts.append(re.escape(rule[pos:m.start()]))
            parts.append(f"(?P<{m.group(1)}>[^_/.\\\\]+)")
            pos = m.end()
        parts.append(re.escape(rule[pos:]))
        try:
            rx = re.compile("".join(parts))
        except re.error as exc:
            raise InvalidPattern(f"bad filename rule: {exc}")
    if "timestamp" not in rx.groupindex:
        raise InvalidPattern("filename rule must capture {timestamp}")
    return rx


@dataclass(frozen=True, eq=False)
class BandDef:
    name: str
    sample_type: str
    nodata: float | None = None
    scale: float = 1.0
    band_index_in_file: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"band {self.name!r}: scale must be > 0")

    def _key(self):
        # NaN nodata must compare equal to itself for idempotence checks
        nd = self.nodata
        if isinstance(nd, float) and nd != nd:
            nd = "nan"
        return (self.name, self.sample_type, nd, self.scale, self.band_index_in_file)

    def __eq__(self, other):
        if not isinstance(other, BandDef):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


@dataclass(frozen=True)
class ProductDefinition:
    name: str
    bands: tuple
    crs: CrsId
    resolution: tuple
    filename_rule: str
    timestamp_format: str
    source_kind: str = "local_dir"
    source_root: str = ""
    # role -> band name, consulted by index computation; Sentinel-2 defaults
    # (B08 nir, B04 red, B02 blue) apply to roles not listed here.
    band_roles: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(self.bands))
        object.__setattr__(
            self,
            "band_roles",
            tuple((str(r), str(b)) for r, b in
                  (self.band_roles.items() if isinstance(self.band_roles, dict)
                   else self.band_roles)),
        )
        object.__setattr__(
            self, "resolution", (float(self.resolution[0]), float(self.resolution[1]))
        )
        names = [b.name for b in self.bands]
        if len(set(names)) != len(names):
            raise ValueError(f"product {self.name!r}: duplicate band names")
        if self.resolution[0] <= 0 or self.resolution[1] <= 0:
            raise ValueError(f"product {self.name!r}: resolution must be positive")
        if self.source_kind not in ("local_dir", "http_listing"):
            raise ValueError(f"product {self.name!r}: bad source kind")
        compile_filename_rule(self.filename_rule)  # raises InvalidPattern

    @property
    def rule(self) -> re.Pattern:
        return compile_filename_rule(self.filename_rule)

    @property
    def has_band_capture(self) -> bool:
        return "band" in self.rule.groupindex

    def band(self, name: str) -> BandDef:
        for b in self.bands:
            if b.name == name:
                return b
        raise KeyError(name)


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    product: str
    timestamp: datetime
    footprint: GeoPolygon
    geotransform: GeoTransform
    files: dict
    ingested_at: datetime
    partial: bool = False


@dataclass
class ScanReport:
    """Outcome of one scan pass: new records plus per-file failures."""

    records: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def add_error(self, file: str, exc: Exception):
        code = getattr(exc, "code", "error")
        self.errors.append({"file": file, "code": code, "message": str(exc)})


def dataset_id(product: str, scene: str, timestamp: datetime) -> str:
    """Deterministic scene identity: content hash of the grouping key."""
    payload = f"{product}\n{scene}\n{format_utc(timestamp)}".encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def footprint_polygon(record_id: str, meta_width: int, meta_height: int,
                      gt: GeoTransform, crs: CrsId) -> GeoPolygon:
    """Rectangle spanned by the raster corners under the geotransform."""
    corners = [(0, 0), (meta_width, 0), (meta_width, meta_height), (0, meta_height)]
    pts = tuple(
        (gt.c0 + c * gt.c1 + r * gt.c2, gt.c3 + c * gt.c4 + r * gt.c5)
        for c, r in corners
    )
    return GeoPolygon(id=f"{record_id}/footprint", exterior=pts, crs=crs)


def infer_product_definition(
    sample: bytes,
    name: str,
    filename_rule: str,
    timestamp_format: str,
    sample_name: str | None = None,
) -> ProductDefinition:
    """Build a product definition from one sample image plus naming rules.

    Bands are enumerated from the sample. When the rule captures {band} each
    file carries one band and the name is read from the sample's own filename,
    so sample_name is required in that case; without a band capture the bands
    are named band_0..band_{n-1} in file order.
    """
    rx = compile_filename_rule(filename_rule)
    meta = parse_metadata(sample)
    crs = CrsId(meta.crs)
    resolution = (abs(meta.geotransform.c1), abs(meta.geotransform.c5))

    if "band" in rx.groupindex:
        if sample_name is None:
            raise PatternMismatch(
                "rule captures {band}: the sample's filename is needed to name it"
            )
        m = rx.fullmatch(os.path.basename(sample_name))
        if not m:
            raise PatternMismatch(
                f"sample name {sample_name!r} does not match the filename rule"
            )
        bands = (BandDef(m.group("band"), meta.sample_type, meta.nodata, 1.0, 0),)
    else:
        bands = tuple(
            BandDef(f"band_{i}", meta.sample_type, meta.nodata, 1.0, i)
            for i in range(meta.band_count)
        )
    return ProductDefinition(
        name=name,
        bands=bands,
        crs=crs,
        resolution=resolution,
        filename_rule=filename_rule,
        timestamp_format=timestamp_format,
    )


# --- JSON (de)serialization of records --------------------------------------

def _poly_to_json(p: GeoPolygon) -> dict:
    return {
        "id": p.id,
        "exterior": [[x, y] for x, y in p.exterior],
        "holes": [[[x, y] for x, y in h] for h in p.holes],
        "crs": p.crs.epsg,
        "attributes": dict(p.attributes),
    }


def _poly_from_json(d: dict) -> GeoPolygon:
    return GeoPolygon(
        id=d["id"],
        exterior=tuple((x, y) for x, y in d["exterior"]),
        holes=tuple(tuple((x, y) for x, y in h) for h in d["holes"]),
        crs=CrsId(d["crs"]),
        attributes=dict(d["attributes"]),
    )


def _product_to_json(p: ProductDefinition) -> dict:
    return {
        "kind": "product",
        "name": p.name,
        "bands": [
            {
                "name": b.name,
                "sample_type": b.sample_type,
                "nodata": b.nodata,
                "scale": b.scale,
                "band_index_in_file": b.band_index_in_file,
            }
            for b in p.bands
        ],
        "crs": p.crs.epsg,
        "resolution": [p.resolution[0], p.resolution[1]],
        "filename_rule": p.filename_rule,
        "timestamp_format": p.timestamp_format,
        "source_kind": p.source_kind,
        "source_root": p.source_root,
        "band_roles": {r: b for r, b in p.band_roles},
    }


def _product_from_json(d: dict) -> ProductDefinition:
    return ProductDefinition(
        name=d["name"],
        bands=tuple(
            BandDef(
                b["name"], b["sample_type"], b["nodata"], b["scale"],
                b["band_index_in_file"],
            )
            for b in d["bands"]
        ),
        crs=CrsId(d["crs"]),
        resolution=(d["resolution"][0], d["resolution"][1]),
        filename_rule=d["filename_rule"],
        timestamp_format=d["timestamp_format"],
        source_kind=d["source_kind"],
        source_root=d["source_root"],
        band_roles=tuple(d.get("band_roles", {}).items()),
    )


def _dataset_to_json(r: DatasetRecord) -> dict:
    return {
        "kind": "dataset",
        "id": r.id,
        "product": r.product,
        "timestamp": format_utc(r.timestamp),
        "footprint": _poly_to_json(r.footprint),
        "geotransform": list(r.geotransform.as_tuple()),
        "files": dict(r.files),
        "ingested_at": format_utc(r.ingested_at),
        "partial": r.partial,
    }


def _dataset_from_json(d: dict) -> DatasetRecord:
    return DatasetRecord(
        id=d["id"],
        product=d["product"],
        timestamp=parse_utc(d["timestamp"]),
        footprint=_poly_from_json(d["footprint"]),
        geotransform=GeoTransform(*d["geotransform"]),
        files=dict(d["files"]),
        ingested_at=parse_utc(d["ingested_at"]),
        partial=d["partial"],
    )


class CatalogStore:
    """Durable store for products, datasets, polygons and annotations."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.log_path = os.path.join(root, "catalog.log")
        self.snapshot_path = os.path.join(root, "catalog.snapshot")
        self._lock = threading.RLock()
        self._products: dict = {}
        self._datasets: dict = {}
        self._polygons: dict = {}
        self._annotations: dict = {}
        self._ann_seq = 0
        self._log_file = None
        self._load()

    # --- persistence ---------------------------------------------------------

    def _apply(self, rec: dict):
        kind = rec.get("kind")
        if kind == "product":
            p = _product_from_json(rec)
            self._products[p.name] = p
        elif kind == "dataset":
            r = _dataset_from_json(rec)
            self._datasets[r.id] = r
        elif kind == "polygon":
            p = _poly_from_json(rec)
            self._polygons[p.id] = p
        elif kind == "annotation":
            self._annotations[rec["id"]] = {k: v for k, v in rec.items() if k != "kind"}
            m = re.fullmatch(r"ann_(\d+)", rec["id"])
            if m:
                self._ann_seq = max(self._ann_seq, int(m.group(1)))
        # unknown kinds are skipped so future formats stay readable

    def _read_records(self, path: str, tolerate_tail: bool):
        """Yield records from one NDJSON file; returns valid byte length."""
        with open(path, "rb") as f:
            data = f.read()
        offset = 0
        first = True
        while offset < len(data):
            nl = data.find(b"\n", offset)
            if nl < 0:
                if tolerate_tail:
                    break  # trailing partial record: cut it
                raise IoFailure(f"{path}: unterminated record")
            line = data[offset:nl]
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                if tolerate_tail:
                    break
                raise IoFailure(f"{path}: undecodable record at byte {offset}")
            if first:
                if rec.get("kind") != "header" or rec.get("version") != LOG_FORMAT_VERSION:
                    raise IoFailure(f"{path}: missing or unsupported header")
                first = False
            else:
                self._apply(rec)
            offset = nl + 1
        return offset

    def _load(self):
        if os.path.exists(self.snapshot_path):
            self._read_records(self.snapshot_path, tolerate_tail=False)
        if os.path.exists(self.log_path):
            valid = self._read_records(self.log_path, tolerate_tail=True)
            if valid < os.path.getsize(self.log_path):
                log.warning("dropping partial tail of %s", self.log_path)
                with open(self.log_path, "r+b") as f:
                    f.truncate(valid)
        if not os.path.exists(self.log_path) or os.path.getsize(self.log_path) == 0:
            # fresh log, or one whose only (header) record was cut mid-write
            with open(self.log_path, "wb") as f:
                f.write(json.dumps(_HEADER).encode() + b"\n")
        self._log_file = open(self.log_path, "ab")

    def _append(self, rec: dict):
        line = json.dumps(rec, separators=(",", ":")).encode() + b"\n"
        self._log_file.write(line)
        self._log_file.flush()

    def compact(self):
        """Fold the log into a fresh snapshot and reset the log."""
        with self._lock:
            tmp = self.snapshot_path + ".tmp"
            with open(tmp, "wb") as f:
                f.write(json.dumps(_HEADER).encode() + b"\n")
                for p in self._products.values():
                    f.write(json.dumps(_product_to_json(p), separators=(",", ":")).encode() + b"\n")
                for r in sorted(self._datasets.values(), key=lambda r: r.id):
                    f.write(json.dumps(_dataset_to_json(r), separators=(",", ":")).encode() + b"\n")
                for p in self._polygons.values():
                    f.write(json.dumps({"kind": "polygon", **_poly_to_json(p)}, separators=(",", ":")).encode() + b"\n")
                for a in self._annotations.values():
                    f.write(json.dumps({"kind": "annotation", **a}, separators=(",", ":")).encode() + b"\n")
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, self.snapshot_path)
            self._log_file.close()
            with open(self.log_path, "wb") as f:
                f.write(json.dumps(_HEADER).encode() + b"\n")
            self._log_file = open(self.log_path, "ab")

    def close(self):
        with self._lock:
            if self._log_file:
                self._log_file.close()
                self._log_file = None

    # --- products -------------------------------------------------------------

    def register_product(self, definition: ProductDefinition) -> ProductDefinition:
        with self._lock:
            existing = self._products.get(definition.name)
            if existing is not None:
                if existing == definition:
                    return existing
                raise ConflictingDefinition(
                    f"product {definition.name!r} already registered with a "
                    "different definition"
                )
            self._products[definition.name] = definition
            self._append(_product_to_json(definition))
        return definition

    def get_product(self, name: str) -> ProductDefinition:
        with self._lock:
            p = self._products.get(name)
        if p is None:
            raise UnknownProduct(f"no product named {name!r}")
        return p

    def products(self) -> list:
        with self._lock:
            return sorted(self._products.values(), key=lambda p: p.name)

    # --- scenes ---------------------------------------------------------------

    def _match_file(self, product: ProductDefinition, uri: str) -> dict:
        base = os.path.basename(uri.split("?", 1)[0].rstrip("/"))
        m = product.rule.fullmatch(base)
        if not m:
            raise PatternMismatch(
                f"{base!r} does not match the filename rule of {product.name!r}"
            )
        return m.groupdict()

    def _group_key(self, product: ProductDefinition, uri: str):
        caps = self._match_file(product, uri)
        try:
            ts = datetime.strptime(caps["timestamp"], product.timestamp_format)
        except ValueError as exc:
            raise PatternMismatch(f"{os.path.basename(uri)!r}: bad timestamp: {exc}")
        ts = ts.replace(tzinfo=timezone.utc)
        return caps.get("scene") or "", ts, caps.get("band")

    def ingest_scene(self, product_name: str, uris: list) -> DatasetRecord:
        """Ingest one scene (all URIs must share scene capture + timestamp)."""
        product = self.get_product(product_name)
        if not uris:
            raise PatternMismatch("no files given")

        groups = {}
        for uri in uris:
            scene, ts, band = self._group_key(product, uri)
            groups.setdefault((scene, ts), []).append((uri, band))
        if len(groups) > 1:
            keys = sorted(f"{s or '-'}@{format_utc(t)}" for s, t in groups)
            raise InconsistentScene(
                f"files span {len(groups)} scene groups ({', '.join(keys)}); "
                "ingest them one scene at a time"
            )
        (scene, ts), members = next(iter(groups.items()))

        files: dict = {}
        if product.has_band_capture:
            for uri, band in members:
                if band not in {b.name for b in product.bands}:
                    raise PatternMismatch(
                        f"{os.path.basename(uri)!r}: band {band!r} is not part "
                        f"of product {product.name!r}"
                    )
                if band in files and files[band] != uri:
                    raise InconsistentScene(
                        f"band {band!r} appears in two files of one scene"
                    )
                files[band] = uri
        else:
            distinct = {uri for uri, _ in members}
            if len(distinct) > 1:
                raise InconsistentScene(
                    "rule has no band capture, so a scene is a single file, "
                    f"but {len(distinct)} files share one scene group"
                )
            uri = next(iter(distinct))
            files = {b.name: uri for b in product.bands}

        # every file of the scene must agree on grid and CRS
        meta0: RasterMetadata | None = None
        for uri in sorted(set(files.values())):
            with sources.SourceHandle(uri) as handle:
                meta = parse_metadata(handle)
            if meta.crs != product.crs.epsg:
                raise InconsistentScene(
                    f"{os.path.basename(uri)}: CRS {meta.crs} differs from "
                    f"product CRS {product.crs.epsg}"
                )
            if meta0 is None:
                meta0 = meta
            elif (meta.geotransform != meta0.geotransform
                  or (meta.width, meta.height) != (meta0.width, meta0.height)):
                raise InconsistentScene(
                    f"{os.path.basename(uri)}: geotransform or extent differs "
                    "from the scene's other files"
                )

        rec_id = dataset_id(product.name, scene, ts)
        partial = set(files) != {b.name for b in product.bands}
        record = DatasetRecord(
            id=rec_id,
            product=product.name,
            timestamp=ts,
            footprint=footprint_polygon(
                rec_id, meta0.width, meta0.height, meta0.geotransform, product.crs
            ),
            geotransform=meta0.geotransform,
            files=files,
            ingested_at=now_utc(),
            partial=partial,
        )

        with self._lock:
            existing = self._datasets.get(rec_id)
            if existing is not None:
                if existing.geotransform != record.geotransform:
                    raise InconsistentScene(
                        f"scene {rec_id} was ingested with a different geotransform"
                    )
                if set(files.items()) <= set(existing.files.items()):
                    return existing  # identical or subset: no-op
                if not set(existing.files.items()) <= set(files.items()):
                    raise InconsistentScene(
                        f"scene {rec_id} re-ingested with conflicting file set"
                    )
                # superset of a partial record: upgrade in place, same id
            self._datasets[rec_id] = record
            self._append(_dataset_to_json(record))
        return record

    def get_dataset(self, rec_id: str) -> DatasetRecord | None:
        with self._lock:
            return self._datasets.get(rec_id)

    def all_datasets(self) -> list:
        with self._lock:
            return sorted(self._datasets.values(), key=lambda r: (r.timestamp, r.id))

    def query_datasets(
        self,
        product: str | None = None,
        bbox: tuple | None = None,
        bbox_crs: CrsId = GEOGRAPHIC,
        start: datetime | None = None,
        end: datetime | None = None,
    ) -> list:
        """Filter complete records by product, bbox overlap and [start, end)."""
        if product is not None:
            self.get_product(product)  # raises UnknownProduct
        with self._lock:
            records = list(self._datasets.values())
            product_crs = {name: p.crs for name, p in self._products.items()}

        bbox_cache: dict = {}

        def bbox_in(crs: CrsId):
            if crs.epsg not in bbox_cache:
                x0, y0, x1, y1 = bbox
                rect = GeoPolygon(
                    id="query/bbox",
                    exterior=((x0, y0), (x1, y0), (x1, y1), (x0, y1)),
                    crs=bbox_crs,
                )
                moved = transform_polygon(rect, crs)
                xs = [x for x, _ in moved.exterior]
                ys = [y for _, y in moved.exterior]
                bbox_cache[crs.epsg] = (min(xs), min(ys), max(xs), max(ys))
            return bbox_cache[crs.epsg]

        out = []
        for rec in records:
            if rec.partial:
                continue
            if product is not None and rec.product != product:
                continue
            if start is not None and rec.timestamp < start:
                continue
            if end is not None and rec.timestamp >= end:
                continue
            if bbox is not None:
                qx0, qy0, qx1, qy1 = bbox_in(product_crs[rec.product])
                xs = [x for x, _ in rec.footprint.exterior]
                ys = [y for _, y in rec.footprint.exterior]
                if max(xs) < qx0 or min(xs) > qx1 or max(ys) < qy0 or min(ys) > qy1:
                    continue
            out.append(rec)
        out.sort(key=lambda r: (r.timestamp, r.id))
        return out

    def scan_source(self, product_name: str) -> ScanReport:
        """One scan pass: ingest unseen scenes, report per-file failures."""
        product = self.get_product(product_name)
        if not product.source_root:
            raise UnknownProduct(
                f"product {product_name!r} has no source root configured"
            )
        uris = sources.list_source(product.source_kind, product.source_root)

        report = ScanReport()
        known_bands = {b.name for b in product.bands}
        groups: dict = {}
        for uri in uris:
            base = os.path.basename(uri.split("?", 1)[0].rstrip("/"))
            if not product.rule.fullmatch(base):
                continue  # unrelated file in the listing
            try:
                scene, ts, band = self._group_key(product, uri)
            except PatternMismatch as exc:
                report.add_error(uri, exc)
                continue
            if product.has_band_capture and band not in known_bands:
                report.add_error(
                    uri,
                    PatternMismatch(f"band {band!r} is not part of {product_name!r}"),
                )
                continue
            groups.setdefault((scene, ts), []).append(uri)

        for (scene, ts), group_uris in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            rec_id = dataset_id(product.name, scene, ts)
            with self._lock:
                existing = self._datasets.get(rec_id)
            if existing is not None and not existing.partial:
                continue
            try:
                before = existing
                record = self.ingest_scene(product_name, group_uris)
                if record is not before:
                    report.records.append(record)
            except Exception as exc:  # keep scanning; the report carries it
                report.add_error(", ".join(sorted(group_uris)), exc)
                log.warning("scan of %s scene %s failed: %s", product_name, scene, exc)
        return report

    # --- polygons ---------------------------------------------------------------

    def ingest_polygons(self, geojson: bytes, crs_override: CrsId | None = None) -> int:
        """Load a GeoJSON FeatureCollection of polygons into the store."""
        try:
            doc = json.loads(geojson)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedGeoJson(f"not parseable: {exc}")
        if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
            raise MalformedGeoJson("top-level object must be a FeatureCollection")
        features = doc.get("features")
        if not isinstance(features, list):
            raise MalformedGeoJson("FeatureCollection lacks a features list")

        crs = crs_override or GEOGRAPHIC
        new: list = []
        for i, feat in enumerate(features):
            if not isinstance(feat, dict) or not isinstance(feat.get("geometry"), dict):
                raise MalformedGeoJson(f"feature {i}: no geometry object")
            geom = feat["geometry"]
            gtype = geom.get("type")
            props = feat.get("properties") or {}
            if not isinstance(props, dict):
                raise MalformedGeoJson(f"feature {i}: properties must be an object")
            attributes = {
                str(k): ("" if v is None else str(v)) for k, v in props.items()
            }
            base_id = str(feat["id"]) if "id" in feat else f"poly_{i}"

            if gtype == "Polygon":
                parts = [geom.get("coordinates")]
            elif gtype == "MultiPolygon":
                parts = geom.get("coordinates") or []
                if not isinstance(parts, list) or not parts:
                    raise MalformedGeoJson(f"feature {i}: empty MultiPolygon")
            else:
                raise MalformedGeoJson(
                    f"feature {i}: geometry type {gtype!r} is not a polygon"
                )

            for part_idx, rings in enumerate(parts):
                if not isinstance(rings, list) or not rings:
                    raise MalformedGeoJson(f"feature {i}: empty coordinates")
                pid = base_id if gtype == "Polygon" else f"{base_id}_{part_idx}"
                try:
                    poly = GeoPolygon(
                        id=pid,
                        exterior=tuple((c[0], c[1]) for c in rings[0]),
                        holes=tuple(
                            tuple((c[0], c[1]) for c in ring) for ring in rings[1:]
                        ),
                        crs=crs,
                        attributes=attributes,
                    )
                except (ValueError, TypeError, IndexError) as exc:
                    raise MalformedGeoJson(f"feature {i}: {exc}")
                new.append(poly)

        with self._lock:
            for poly in new:
                self._polygons[poly.id] = poly
                self._append({"kind": "polygon", **_poly_to_json(poly)})
        return len(new)

    def get_polygon(self, pid: str) -> GeoPolygon:
        with self._lock:
            p = self._polygons.get(pid)
        if p is None:
            raise UnknownPolygon(f"no polygon named {pid!r}")
        return p

    def polygons(self) -> list:
        with self._lock:
            return sorted(self._polygons.values(), key=lambda p: p.id)

    # --- annotations --------------------------------------------------------------

    def add_annotation(self, polygon_id: str, label: str, author: str = "",
                       note: str | None = None) -> dict:
        self.get_polygon(polygon_id)  # raises UnknownPolygon
        with self._lock:
            self._ann_seq += 1
            rec = {
                "id": f"ann_{self._ann_seq:06d}",
                "polygon_id": polygon_id,
                "label": label,
                "author": author,
                "created_at": format_utc(now_utc()),
            }
            if note is not None:
                rec["note"] = note
            self._annotations[rec["id"]] = rec
            self._append({"kind": "annotation", **rec})
        return dict(rec)

    def annotations(self, polygon_id: str | None = None) -> list:
        with self._lock:
            items = list(self._annotations.values())
        if polygon_id is not None:
            items = [a for a in items if a["polygon_id"] == polygon_id]
        return sorted(items, key=lambda a: a["id"])
