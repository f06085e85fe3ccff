"""Table serialization (CSV, GeoJSON), incremental merge, SVG/PNG rendering.

CSV files carry a sidecar "<file>.manifest" (JSON) recording which
(polygon_id, product, timestamp, measure) keys the file holds, so later
results can be folded in without recomputing or duplicating rows. Merging
never rewrites a row that is already present: first write wins.

Reals are written with repr(), the shortest digit string that parses back
to the identical float, so export -> read is value identity.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from minicube.engine import ObservationTable, ZonalStats, PIXEL_COLUMNS, ZONAL_COLUMNS
from minicube.errors import CorruptManifest, FingerprintMismatch, IoFailure
from minicube.geo import GeoPolygon, PixelRegion
from minicube.timeutil import format_utc, now_utc, parse_utc

MANIFEST_VERSION = 1

# Two-stop linear color ramp (dark violet -> bright yellow). A value v in
# [lo, hi] maps to t = (v - lo) / (hi - lo), each RGB channel interpolated
# independently and rounded half-up. The web client reimplements this exact
# function; keep the constants in sync.
RAMP_LOW = (68, 1, 84)
RAMP_HIGH = (253, 231, 37)


def ramp_color(t: float) -> str:
    """#rrggbb at position t in [0, 1] (clamped) along the documented ramp.

    Rounding is half-up, matching Math.round in the web client.
    """
    t = 0.0 if t != t else min(1.0, max(0.0, t))
    parts = (
        int(lo + (hi - lo) * t + 0.5) for lo, hi in zip(RAMP_LOW, RAMP_HIGH)
    )
    return "#{:02x}{:02x}{:02x}".format(*parts)


@dataclass
class ExportManifest:
    version: int
    fingerprint: str
    covered: frozenset  # of (polygon_id, product, timestamp text, measure)
    created_at: str
    updated_at: str
    format: str = "csv"
    mode: str = "zonal"


# --- row <-> text ----------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _zonal_fields(row) -> list:
    pid, product, ts, measure, s = row
    return [pid, product, format_utc(ts), measure,
            str(s.count), str(s.valid_count),
            _cell(s.mean), _cell(s.std), _cell(s.min), _cell(s.max),
            _cell(s.median)]


def _pixel_fields(row) -> list:
    pid, product, ts, measure, col, r, x, y, value = row
    return [pid, product, format_utc(ts), measure,
            str(col), str(r), repr(x), repr(y), repr(value)]


def _row_key(fields) -> tuple:
    return (fields[0], fields[1], fields[2], fields[3])


def _sort_key(fields, mode):
    # file order: polygon, time, measure, product, then row-major pixels.
    # timestamps sort as instants, not text: "…31.5Z" would order before
    # "…31Z" lexically
    k = (fields[0], parse_utc(fields[2]), fields[3], fields[1])
    if mode == "per_pixel":
        k += (int(fields[5]), int(fields[4]))
    return k


def _csv_line(fields) -> str:
    buf = io.StringIO()
    csv.writer(buf).writerow(fields)
    return buf.getvalue()


def _table_lines(t: ObservationTable):
    to_fields = _zonal_fields if t.mode == "zonal" else _pixel_fields
    for row in t.rows:
        yield to_fields(row)


# --- manifests ---------------------------------------------------------------

def _manifest_path(destination: str) -> str:
    return destination + ".manifest"


def _write_manifest(destination: str, m: ExportManifest):
    doc = {
        "version": m.version,
        "fingerprint": m.fingerprint,
        "format": m.format,
        "mode": m.mode,
        "created_at": m.created_at,
        "updated_at": m.updated_at,
        "covered": sorted(list(k) for k in m.covered),
    }
    _atomic_write(_manifest_path(destination),
                  json.dumps(doc, indent=1).encode() + b"\n")


def read_manifest(destination: str) -> ExportManifest:
    path = _manifest_path(destination)
    try:
        with open(path, "rb") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise CorruptManifest(f"no manifest at {path}")
    except (OSError, ValueError) as e:
        raise CorruptManifest(f"unreadable manifest {path}: {e}")
    try:
        if doc["version"] != MANIFEST_VERSION:
            raise CorruptManifest(
                f"manifest version {doc['version']} not supported")
        covered = frozenset(tuple(k) for k in doc["covered"])
        for k in covered:
            if len(k) != 4:
                raise CorruptManifest(f"bad covered key {k!r}")
        return ExportManifest(
            version=doc["version"], fingerprint=doc["fingerprint"],
            covered=covered, created_at=doc["created_at"],
            updated_at=doc["updated_at"], format=doc.get("format", "csv"),
            mode=doc.get("mode", "zonal"),
        )
    except (KeyError, TypeError) as e:
        raise CorruptManifest(f"manifest {path} missing field: {e}")


def _atomic_write(path: str, data: bytes):
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}")
    finally:
        if os.path.exists(tmp):
            try:
                os.unlink(tmp)
            except OSError:
                pass


# --- export ------------------------------------------------------------------

def export_table(t: ObservationTable, destination: str, format: str = "csv",
                 fingerprint: str = "", polygons: dict | None = None) -> ExportManifest:
    """Write a table plus its manifest; returns the manifest.

    polygons (id -> GeoPolygon) is only consulted for GeoJSON geometry;
    features without a known polygon get a null geometry.
    """
    if format not in ("csv", "geojson"):
        raise ValueError(f"unknown export format {format!r}")
    covered = set()
    for fields in _table_lines(t):
        covered.add(_row_key(fields))

    if format == "csv":
        data = csv_bytes(t)
    else:
        data = _geojson_bytes(t, polygons or {})

    now = format_utc(now_utc())
    manifest = ExportManifest(
        version=MANIFEST_VERSION, fingerprint=fingerprint,
        covered=frozenset(covered), created_at=now, updated_at=now,
        format=format, mode=t.mode,
    )
    _atomic_write(destination, data)
    _write_manifest(destination, manifest)
    return manifest


def csv_bytes(t: ObservationTable) -> bytes:
    """RFC 4180 bytes of a table, header first; the csv half of export_table."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(t.columns)
    for fields in _table_lines(t):
        w.writerow(fields)
    return buf.getvalue().encode()


def _geojson_bytes(t: ObservationTable, polygons: dict) -> bytes:
    """One feature per polygon; stats keyed "<measure>@<timestamp>".

    Only zonal tables serialize to GeoJSON (a per-pixel table has no
    polygon-level geometry to attach rows to). Keys gain a "<product>/"
    prefix when the table spans several products.
    """
    if t.mode != "zonal":
        raise ValueError("geojson export is defined for zonal tables only")
    products = {r[1] for r in t.rows}
    multi = len(products) > 1
    per_poly: dict = {}
    for pid, product, ts, measure, s in t.rows:
        key = f"{measure}@{format_utc(ts)}"
        if multi:
            key = f"{product}/{key}"
        per_poly.setdefault(pid, {})[key] = {
            "product": product,
            "count": s.count, "valid_count": s.valid_count,
            "mean": s.mean, "std": s.std, "min": s.min, "max": s.max,
            "median": s.median,
        }
    features = []
    for pid in sorted(per_poly):
        poly = polygons.get(pid)
        geometry = None
        if poly is not None:
            rings = [[list(v) for v in poly.exterior] + [list(poly.exterior[0])]]
            for hole in poly.holes:
                rings.append([list(v) for v in hole] + [list(hole[0])])
            geometry = {"type": "Polygon", "coordinates": rings}
        features.append({
            "type": "Feature",
            "id": pid,
            "geometry": geometry,
            "properties": {"polygon_id": pid, **per_poly[pid]},
        })
    doc = {"type": "FeatureCollection", "features": features}
    return json.dumps(doc, indent=1, allow_nan=False).encode() + b"\n"


def read_table_csv(path: str) -> ObservationTable:
    """Parse a file written by export_table(format="csv") back into a table."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            try:
                header = tuple(next(reader))
            except StopIteration:
                raise CorruptManifest(f"{path}: empty file, no header")
            if header == ZONAL_COLUMNS:
                mode = "zonal"
            elif header == PIXEL_COLUMNS:
                mode = "per_pixel"
            else:
                raise CorruptManifest(f"{path}: unrecognized header {header!r}")
            rows = []
            for rec in reader:
                if not rec:
                    continue
                if mode == "zonal":
                    rows.append((
                        rec[0], rec[1], parse_utc(rec[2]), rec[3],
                        ZonalStats(
                            count=int(rec[4]), valid_count=int(rec[5]),
                            mean=float(rec[6]) if rec[6] else None,
                            std=float(rec[7]) if rec[7] else None,
                            min=float(rec[8]) if rec[8] else None,
                            max=float(rec[9]) if rec[9] else None,
                            median=float(rec[10]) if rec[10] else None,
                        ),
                    ))
                else:
                    rows.append((
                        rec[0], rec[1], parse_utc(rec[2]), rec[3],
                        int(rec[4]), int(rec[5]),
                        float(rec[6]), float(rec[7]), float(rec[8]),
                    ))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}")
    return ObservationTable(mode=mode, rows=rows)


# --- incremental merge ---------------------------------------------------------

class _MergeLock:
    """Advisory lock: one merge per destination at a time."""

    def __init__(self, destination):
        self.path = destination + ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(self.fd, str(os.getpid()).encode())
        except FileExistsError:
            raise IoFailure(
                f"another merge holds {self.path}; remove it if stale")
        except OSError as e:
            raise IoFailure(f"cannot lock {self.path}: {e}")
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)


def merge_incremental(destination: str, t_new: ObservationTable,
                      fingerprint: str | None = None) -> ExportManifest:
    """Fold new rows into an exported CSV, skipping already-covered keys.

    Existing rows are kept byte-for-byte; the result is re-sorted globally
    and swapped in atomically, so a crash mid-merge leaves the old file.
    A missing destination (no file, no manifest) starts a fresh export.
    """
    with _MergeLock(destination):
        has_file = os.path.exists(destination)
        has_manifest = os.path.exists(_manifest_path(destination))
        if not has_file and not has_manifest:
            t_new.sort()
            return export_table(t_new, destination, "csv", fingerprint or "")
        if not has_file or not has_manifest:
            missing = destination if not has_file else _manifest_path(destination)
            raise CorruptManifest(f"{missing} is missing; cannot merge")

        manifest = read_manifest(destination)
        if manifest.format != "csv":
            raise ValueError("merge_incremental only merges csv exports")
        if fingerprint is not None and manifest.fingerprint != fingerprint:
            raise FingerprintMismatch(
                f"destination was exported for query {manifest.fingerprint}, "
                f"new table is for {fingerprint}")
        if manifest.mode != t_new.mode:
            raise FingerprintMismatch(
                f"destination holds {manifest.mode} rows, new table is {t_new.mode}")

        expected_header = ",".join(
            ZONAL_COLUMNS if t_new.mode == "zonal" else PIXEL_COLUMNS)
        try:
            with open(destination, "r", encoding="utf-8", newline="") as f:
                header_line = f.readline()
                old_lines = f.readlines()
        except OSError as e:
            raise IoFailure(f"cannot read {destination}: {e}")
        if header_line.strip("\r\n") != expected_header:
            raise CorruptManifest(
                f"{destination} header does not match its manifest mode")

        covered = set(manifest.covered)
        keyed = []
        for line in old_lines:
            if not line.strip():
                continue
            fields = next(csv.reader([line]))
            keyed.append((_sort_key(fields, t_new.mode), line))

        for fields in _table_lines(t_new):
            if _row_key(fields) in covered:
                continue
            keyed.append((_sort_key(fields, t_new.mode), _csv_line(fields)))
            covered.add(_row_key(fields))
        keyed.sort(key=lambda kl: kl[0])

        body = header_line if header_line.endswith("\n") else header_line + "\r\n"
        data = body.encode() + "".join(line for _, line in keyed).encode()
        _atomic_write(destination, data)
        merged = replace(
            manifest,
            covered=frozenset(covered),
            updated_at=format_utc(now_utc()),
        )
        _write_manifest(destination, merged)
        return merged


# --- SVG rendering --------------------------------------------------------------

_SVG_W = 512.0


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


def _ring_path(ring, to_svg) -> str:
    parts = []
    for i, (x, y) in enumerate(ring):
        sx, sy = to_svg(x, y)
        parts.append(f"{'M' if i == 0 else 'L'} {_fmt(sx)} {_fmt(sy)}")
    parts.append("Z")
    return " ".join(parts)


def render_polygon_svg(p: GeoPolygon, region: PixelRegion | None = None,
                       patch=None, value_range: tuple | None = None) -> bytes:
    """Deterministic SVG of a polygon outline, optionally with cell coloring.

    With region+patch given, every in-region valid cell is drawn as a filled
    quad under the outline, colored by ramp_color over value_range (defaults
    to the min/max of the drawn cells). The viewport fits the polygon's
    bounding box with a 5% margin on each side.
    """
    xs = [x for ring in p.rings() for x, _ in ring]
    ys = [y for ring in p.rings() for _, y in ring]
    minx, maxx, miny, maxy = min(xs), max(xs), min(ys), max(ys)
    spanx = maxx - minx or 1.0
    spany = maxy - miny or 1.0
    mx, my = 0.05 * spanx, 0.05 * spany
    scale = _SVG_W / (spanx + 2 * mx)
    height = (spany + 2 * my) * scale

    def to_svg(x, y):
        return (x - minx + mx) * scale, (maxy + my - y) * scale

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(_SVG_W)}" '
        f'height="{_fmt(height)}" viewBox="0 0 {_fmt(_SVG_W)} {_fmt(height)}">\n',
    ]

    if region is not None and patch is not None:
        if patch.values.shape != region.mask.shape:
            raise ValueError("patch and region windows disagree")
        gt = patch.geotransform
        draw = region.mask & patch.valid_mask
        rr, cc = np.nonzero(draw)
        if rr.size:
            vals = patch.values[rr, cc]
            lo, hi = value_range if value_range else (float(vals.min()),
                                                      float(vals.max()))
            span = hi - lo
            out.append('<g stroke="none">\n')
            for r, c, v in zip(rr.tolist(), cc.tolist(), vals.tolist()):
                corners = [(c, r), (c + 1, r), (c + 1, r + 1), (c, r + 1)]
                pts = []
                for pc, pr in corners:
                    wx = gt.c0 + pc * gt.c1 + pr * gt.c2
                    wy = gt.c3 + pc * gt.c4 + pr * gt.c5
                    sx, sy = to_svg(wx, wy)
                    pts.append(f"{_fmt(sx)},{_fmt(sy)}")
                t = 0.5 if span == 0 else (v - lo) / span
                out.append(
                    f'<polygon points="{" ".join(pts)}" fill="{ramp_color(t)}"/>\n')
            out.append("</g>\n")

    path = " ".join(_ring_path(ring, to_svg) for ring in p.rings())
    out.append(
        f'<path d="{path}" fill="none" fill-rule="evenodd" stroke="#1a1a1a" '
        'stroke-width="1.5"/>\n')
    out.append("</svg>\n")
    return "".join(out).encode()


_TS_W, _TS_H = 640.0, 320.0
_TS_ML, _TS_MR, _TS_MT, _TS_MB = 64.0, 16.0, 16.0, 40.0


def render_timeseries_svg(series) -> bytes:
    """Deterministic polyline chart of (timestamp, value) pairs.

    y range is the data range padded 5% each side; a single point renders
    as one marker without a polyline. Timestamps label the x axis as ISO
    dates.
    """
    points = [(ts, float(v)) for ts, v in series]
    if not points:
        raise ValueError("timeseries needs at least one point")
    points.sort(key=lambda p: p[0])
    t0 = points[0][0]
    t1 = points[-1][0]
    tspan = (t1 - t0).total_seconds() or 1.0
    vmin = min(v for _, v in points)
    vmax = max(v for _, v in points)
    vspan = vmax - vmin
    pad = 0.05 * vspan if vspan else max(abs(vmin) * 0.05, 0.5)
    lo, hi = vmin - pad, vmax + pad

    px_w = _TS_W - _TS_ML - _TS_MR
    px_h = _TS_H - _TS_MT - _TS_MB

    def to_svg(ts, v):
        fx = ((ts - t0).total_seconds() / tspan) if len(points) > 1 else 0.5
        fy = (v - lo) / (hi - lo)
        return _TS_ML + fx * px_w, _TS_MT + (1.0 - fy) * px_h

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(_TS_W)}" '
        f'height="{_fmt(_TS_H)}" viewBox="0 0 {_fmt(_TS_W)} {_fmt(_TS_H)}" '
        'font-family="sans-serif" font-size="11">\n',
        f'<rect x="{_fmt(_TS_ML)}" y="{_fmt(_TS_MT)}" width="{_fmt(px_w)}" '
        f'height="{_fmt(px_h)}" fill="#fafafa" stroke="#cccccc"/>\n',
    ]

    for i in range(5):
        v = lo + (hi - lo) * i / 4.0
        _, sy = to_svg(t0, v)
        out.append(
            f'<line x1="{_fmt(_TS_ML)}" y1="{_fmt(sy)}" x2="{_fmt(_TS_W - _TS_MR)}" '
            f'y2="{_fmt(sy)}" stroke="#e3e3e3"/>\n')
        out.append(
            f'<text x="{_fmt(_TS_ML - 6)}" y="{_fmt(sy + 3.5)}" '
            f'text-anchor="end">{v:.4g}</text>\n')

    label_at = {0, len(points) - 1, len(points) // 2} if len(points) > 2 else set(
        range(len(points)))
    for i in sorted(label_at):
        ts, _ = points[i]
        sx, _ = to_svg(ts, lo)
        out.append(
            f'<text x="{_fmt(sx)}" y="{_fmt(_TS_H - _TS_MB + 16)}" '
            f'text-anchor="middle">{ts.strftime("%Y-%m-%d")}</text>\n')

    if len(points) > 1:
        coords = " ".join(
            "{},{}".format(_fmt(sx), _fmt(sy))
            for sx, sy in (to_svg(ts, v) for ts, v in points))
        out.append(
            f'<polyline points="{coords}" fill="none" stroke="#2c7b2c" '
            'stroke-width="1.5"/>\n')
    for ts, v in points:
        sx, sy = to_svg(ts, v)
        out.append(f'<circle cx="{_fmt(sx)}" cy="{_fmt(sy)}" r="2.5" '
                   'fill="#2c7b2c"/>\n')
    out.append("</svg>\n")
    return "".join(out).encode()


def render_timeseries_png(series, path: str, title: str = ""):
    """Figure-file twin of render_timeseries_svg for report output."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.dates as mdates
    import matplotlib.pyplot as plt

    points = sorted(((ts, float(v)) for ts, v in series), key=lambda p: p[0])
    if not points:
        raise ValueError("timeseries needs at least one point")
    xs = [ts for ts, _ in points]
    ys = [v for _, v in points]
    fig, ax = plt.subplots(figsize=(8, 4), dpi=100)
    if len(points) > 1:
        ax.plot(xs, ys, "-", color="#2c7b2c", linewidth=1.5)
    ax.plot(xs, ys, "o", color="#2c7b2c", markersize=4)
    ax.set_title(title)
    ax.grid(True, color="#e3e3e3")
    ax.xaxis.set_major_formatter(mdates.DateFormatter("%Y-%m-%d"))
    fig.autofmt_xdate()
    fig.tight_layout()
    try:
        fig.savefig(path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}")
    finally:
        plt.close(fig)
