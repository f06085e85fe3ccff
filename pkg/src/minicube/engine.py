"""Query evaluation: polygon/time/band selection, band indices, zonal stats.

The engine resolves a LoadQuery against the catalog, extracts only the
bounding window of each polygon's pixel region per band, applies band scale
factors, computes requested measures and assembles a deterministic table.
Everything runs over read-only catalog snapshots; per (polygon, dataset) work
items are independent.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime
from hashlib import sha256
from json import dumps as json_dumps

import numpy as np

from minicube import sources
from minicube.catalog import BandDef, CatalogStore, DatasetRecord, ProductDefinition
from minicube.errors import (
    EmptyRegion,
    MissingBandRole,
    ShapeMismatch,
    UnknownMeasure,
)
from minicube.geo import GeoPolygon, PixelRegion, rasterize_polygon, transform_polygon
from minicube.raster_io import PixelPatch, Window, parse_metadata, read_window

log = logging.getLogger(__name__)

INDEX_MEASURES = ("ndvi", "evi")

# EVI constants: gain, aerosol coefficients and canopy adjustment. Standard
# published values; recorded here as the single source of truth.
EVI_G = 2.5
EVI_C1 = 6.0
EVI_C2 = 7.5
EVI_L = 1.0

INDEX_ROLES = {"ndvi": ("nir", "red"), "evi": ("nir", "red", "blue")}
DEFAULT_ROLE_BANDS = {"nir": "B08", "red": "B04", "blue": "B02"}

# cells whose index denominator is smaller than this are marked invalid
DENOMINATOR_FLOOR = 1e-12

ZONAL_COLUMNS = (
    "polygon_id", "product", "timestamp", "measure",
    "count", "valid_count", "mean", "std", "min", "max", "median",
)
PIXEL_COLUMNS = (
    "polygon_id", "product", "timestamp", "measure", "col", "row", "x", "y", "value",
)


@dataclass(frozen=True)
class LoadQuery:
    """What to load: polygons x products x measures over [start, end)."""

    polygon_ids: tuple
    products: tuple
    measures: tuple
    start: datetime
    end: datetime
    aggregate: str = "zonal"

    def __post_init__(self):
        object.__setattr__(self, "polygon_ids", tuple(self.polygon_ids))
        object.__setattr__(self, "products", tuple(self.products))
        object.__setattr__(self, "measures", tuple(self.measures))
        if not self.polygon_ids:
            raise ValueError("query needs at least one polygon")
        if not self.products:
            raise ValueError("query needs at least one product")
        if not self.measures:
            raise ValueError("query needs at least one measure")
        if self.start >= self.end:
            raise ValueError("start must precede end")
        if self.aggregate not in ("zonal", "per_pixel"):
            raise ValueError(f"unknown aggregate mode {self.aggregate!r}")

    def fingerprint(self) -> str:
        """Hash of the query shape, interval excluded (export identity)."""
        ids = sorted(
            p.id if isinstance(p, GeoPolygon) else p for p in self.polygon_ids
        )
        payload = json_dumps(
            {
                "polygons": ids,
                "products": sorted(self.products),
                "measures": sorted(self.measures),
                "aggregate": self.aggregate,
            },
            separators=(",", ":"),
        )
        return sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ZonalStats:
    count: int
    valid_count: int
    mean: float | None = None
    std: float | None = None
    min: float | None = None
    max: float | None = None
    median: float | None = None


@dataclass
class ObservationTable:
    """Deterministically ordered result rows.

    zonal mode: (polygon_id, product, timestamp, measure, ZonalStats)
    per_pixel mode: (polygon_id, product, timestamp, measure, col, row, x, y, value)
    """

    mode: str
    rows: list

    @property
    def columns(self) -> tuple:
        return ZONAL_COLUMNS if self.mode == "zonal" else PIXEL_COLUMNS

    def sort(self):
        # stable: ties (e.g. two same-timestamp scenes) keep generation order
        if self.mode == "zonal":
            self.rows.sort(key=lambda r: (r[0], r[2], r[3], r[1]))
        else:
            self.rows.sort(key=lambda r: (r[0], r[2], r[3], r[1], r[5], r[4]))


def compute_index(name: str, bands: dict) -> PixelPatch:
    """Cellwise spectral index over role-keyed patches.

    ndvi = (nir - red) / (nir + red)
    evi  = G (nir - red) / (nir + C1 red - C2 blue + L)

    A cell is invalid where any input is invalid or the denominator's
    magnitude falls under 1e-12; outputs hold 0.0 there, never inf/nan.
    """
    if name not in INDEX_ROLES:
        raise UnknownMeasure(f"no index named {name!r}")
    missing = [r for r in INDEX_ROLES[name] if r not in bands]
    if missing:
        raise MissingBandRole(f"index {name!r} needs roles {', '.join(missing)}")
    patches = [bands[r] for r in INDEX_ROLES[name]]
    shape = patches[0].values.shape
    for p in patches[1:]:
        if p.values.shape != shape:
            raise ShapeMismatch(
                f"index inputs disagree: {p.values.shape} vs {shape}"
            )

    nir = patches[0].values
    red = patches[1].values
    if name == "ndvi":
        den = nir + red
        num = nir - red
    else:
        blue = patches[2].values
        den = nir + EVI_C1 * red - EVI_C2 * blue + EVI_L
        num = EVI_G * (nir - red)

    valid = np.logical_and.reduce([p.valid_mask for p in patches])
    valid = valid & (np.abs(den) >= DENOMINATOR_FLOOR)
    guarded = np.where(valid, den, 1.0)
    values = np.where(valid, num / guarded, 0.0)
    dropped = int(patches[0].valid_mask.sum() - valid.sum())
    if dropped:
        log.debug("%s: %d cells invalidated by guard or input masks", name, dropped)
    ref = patches[0]
    return PixelPatch(
        width=ref.width, height=ref.height, values=values, valid_mask=valid,
        geotransform=ref.geotransform, band_name=name,
    )


def zonal_stats(patch: PixelPatch, region: PixelRegion) -> ZonalStats:
    """Population statistics over in-region, valid cells."""
    if patch.values.shape != region.mask.shape:
        raise ShapeMismatch(
            f"patch {patch.values.shape} vs region {region.mask.shape}"
        )
    count = int(region.mask.sum())
    sel = patch.values[region.mask & patch.valid_mask]
    if sel.size == 0:
        return ZonalStats(count=count, valid_count=0)
    return ZonalStats(
        count=count,
        valid_count=int(sel.size),
        mean=float(sel.mean()),
        std=float(sel.std(ddof=0)),
        min=float(sel.min()),
        max=float(sel.max()),
        median=float(np.median(sel)),
    )


class Engine:
    """Evaluates LoadQueries against one catalog store.

    Not thread-safe per instance (handle/region caches); create one per
    worker. open_source is injectable so tests can count bytes read.
    """

    def __init__(self, store: CatalogStore, open_source=sources.SourceHandle,
                 max_open_files: int = 64):
        self.store = store
        self._open_source = open_source
        self._max_open = max_open_files
        self._handles: OrderedDict = OrderedDict()
        self._meta: dict = {}
        self._regions: dict = {}
        self._transformed: dict = {}

    def close(self):
        for h in self._handles.values():
            h.close()
        self._handles.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- plumbing -------------------------------------------------------------

    def _handle(self, uri: str):
        if uri in self._handles:
            self._handles.move_to_end(uri)
            return self._handles[uri]
        handle = self._open_source(uri)
        self._handles[uri] = handle
        if len(self._handles) > self._max_open:
            _, old = self._handles.popitem(last=False)
            old.close()
        return handle

    def _metadata(self, uri: str):
        if uri not in self._meta:
            self._meta[uri] = parse_metadata(self._handle(uri))
        return self._meta[uri]

    def _polygon_in(self, poly: GeoPolygon, product: ProductDefinition) -> GeoPolygon:
        key = (poly.id, product.crs.epsg)
        got = self._transformed.get(key)
        if got is None or got.id != poly.id:
            got = transform_polygon(poly, product.crs)
            self._transformed[key] = got
        return got

    def _region_for(self, poly: GeoPolygon, rec: DatasetRecord, meta) -> PixelRegion | None:
        """Rasterize once per (polygon, grid); None when no center falls in."""
        key = (poly.id, rec.geotransform.as_tuple(), meta.width, meta.height)
        if key in self._regions:
            return self._regions[key]
        try:
            region = rasterize_polygon(poly, rec.geotransform, meta.width, meta.height)
        except EmptyRegion:
            region = None
        self._regions[key] = region
        return region

    def _read_band(self, rec: DatasetRecord, band: BandDef, window: Window) -> PixelPatch:
        uri = rec.files[band.name]
        meta = self._metadata(uri)
        patch = read_window(self._handle(uri), meta, band.band_index_in_file, window)
        if band.nodata is not None:
            if isinstance(band.nodata, float) and band.nodata != band.nodata:
                patch.valid_mask &= ~np.isnan(patch.values)
            else:
                patch.valid_mask &= patch.values != band.nodata
        if band.scale != 1.0:
            patch.values *= band.scale
        return patch.renamed(band.name)

    @staticmethod
    def _resolve_role(product: ProductDefinition, role: str) -> BandDef:
        explicit = dict(product.band_roles)
        band_name = explicit.get(role) or DEFAULT_ROLE_BANDS.get(role)
        names = {b.name: b for b in product.bands}
        if band_name in names:
            return names[band_name]
        # a band literally named after the role also serves
        for b in product.bands:
            if b.name.lower() == role:
                return b
        raise MissingBandRole(
            f"product {product.name!r} has no band for role {role!r}"
        )

    def _bands_for_measures(self, product: ProductDefinition, measures) -> dict:
        """measure -> list of (role, BandDef) to read; validates names."""
        band_names = {b.name: b for b in product.bands}
        plan = {}
        for measure in measures:
            if measure in band_names:
                plan[measure] = [(None, band_names[measure])]
            elif measure in INDEX_ROLES:
                plan[measure] = [
                    (role, self._resolve_role(product, role))
                    for role in INDEX_ROLES[measure]
                ]
            else:
                raise UnknownMeasure(
                    f"{measure!r} is neither a band of {product.name!r} nor an "
                    f"index ({', '.join(INDEX_MEASURES)})"
                )
        return plan

    # --- queries -------------------------------------------------------------

    def load(self, q: LoadQuery) -> ObservationTable:
        """Evaluate a query; polygons that touch nothing yield zero rows."""
        polygons = [
            p if isinstance(p, GeoPolygon) else self.store.get_polygon(p)
            for p in q.polygon_ids
        ]
        table = ObservationTable(mode=q.aggregate, rows=[])

        for product_name in q.products:
            product = self.store.get_product(product_name)
            plan = self._bands_for_measures(product, q.measures)
            datasets = self.store.query_datasets(
                product=product_name, start=q.start, end=q.end
            )
            if not datasets:
                continue
            local = [self._polygon_in(p, product) for p in polygons]
            bounds = []
            for p in local:
                xs = [x for ring in p.rings() for x, _ in ring]
                ys = [y for ring in p.rings() for _, y in ring]
                bounds.append((min(xs), min(ys), max(xs), max(ys)))

            for rec in datasets:
                first_uri = next(iter(rec.files.values()))
                meta = self._metadata(first_uri)
                fx = [x for x, _ in rec.footprint.exterior]
                fy = [y for _, y in rec.footprint.exterior]
                fbox = (min(fx), min(fy), max(fx), max(fy))

                for poly, pbox in zip(local, bounds):
                    if (pbox[2] < fbox[0] or pbox[0] > fbox[2]
                            or pbox[3] < fbox[1] or pbox[1] > fbox[3]):
                        continue
                    region = self._region_for(poly, rec, meta)
                    if region is None:
                        continue
                    window = Window(
                        region.origin[0], region.origin[1],
                        region.width, region.height,
                    )
                    patch_cache: dict = {}

                    def band_patch(band: BandDef) -> PixelPatch:
                        if band.name not in patch_cache:
                            patch_cache[band.name] = self._read_band(rec, band, window)
                        return patch_cache[band.name]

                    for measure in q.measures:
                        needed = plan[measure]
                        if needed[0][0] is None:
                            patch = band_patch(needed[0][1])
                        else:
                            patch = compute_index(
                                measure,
                                {role: band_patch(b) for role, b in needed},
                            )
                        self._emit(table, q, poly.id, rec, measure, patch, region)

        table.sort()
        return table

    def _emit(self, table, q, polygon_id, rec, measure, patch, region):
        if q.aggregate == "zonal":
            table.rows.append(
                (polygon_id, rec.product, rec.timestamp, measure,
                 zonal_stats(patch, region))
            )
            return
        mask = region.mask & patch.valid_mask
        rr, cc = np.nonzero(mask)
        vals = patch.values[rr, cc]
        gt = rec.geotransform
        c_abs = cc + region.origin[0]
        r_abs = rr + region.origin[1]
        xs = gt.c0 + (c_abs + 0.5) * gt.c1 + (r_abs + 0.5) * gt.c2
        ys = gt.c3 + (c_abs + 0.5) * gt.c4 + (r_abs + 0.5) * gt.c5
        for i in range(len(rr)):
            table.rows.append(
                (polygon_id, rec.product, rec.timestamp, measure,
                 int(c_abs[i]), int(r_abs[i]), float(xs[i]), float(ys[i]),
                 float(vals[i]))
            )

    def timeseries(self, polygon_id: str, product: str, measure: str,
                   start: datetime, end: datetime) -> list:
        """Zonal stats per dataset timestamp, ascending."""
        q = LoadQuery(
            polygon_ids=(polygon_id,), products=(product,), measures=(measure,),
            start=start, end=end, aggregate="zonal",
        )
        table = self.load(q)
        return [(row[2], row[4]) for row in table.rows]

    def measure_patch(self, polygon, product_name: str, measure: str,
                      timestamp: datetime):
        """One polygon's windowed measure values on the dataset at timestamp.

        Returns (patch, region) aligned to the same window; the drawing path
        uses them for cell coloring. polygon may be an id or a GeoPolygon.
        """
        product = self.store.get_product(product_name)
        plan = self._bands_for_measures(product, (measure,))
        recs = [r for r in self.store.query_datasets(product=product_name)
                if r.timestamp == timestamp]
        if not recs:
            raise ValueError(
                f"product {product_name!r} has no dataset at "
                f"{timestamp.isoformat()}")
        rec = recs[0]
        poly = polygon if isinstance(polygon, GeoPolygon) else \
            self.store.get_polygon(polygon)
        local = self._polygon_in(poly, product)
        meta = self._metadata(next(iter(rec.files.values())))
        region = self._region_for(local, rec, meta)
        if region is None:
            raise EmptyRegion(
                f"polygon {poly.id!r} covers no pixel of that dataset")
        window = Window(region.origin[0], region.origin[1],
                        region.width, region.height)
        needed = plan[measure]
        if needed[0][0] is None:
            patch = self._read_band(rec, needed[0][1], window)
        else:
            patch = compute_index(
                measure,
                {role: self._read_band(rec, b, window) for role, b in needed},
            )
        return patch, region
