"""Polygon model, WGS84 geographic <-> UTM transforms, pixel/world mapping
and polygon rasterization.

Coordinate systems are deliberately narrow: geographic WGS84 (EPSG 4326) and
the WGS84 UTM zones (EPSG 32601-32660 north, 32701-32760 south). The UTM
mapping is the Krueger series in the third flattening, carried to order 6,
good to well under a millimetre within a zone plus 3 degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from minicube.errors import (
    EmptyRegion,
    OutOfDomain,
    SingularTransform,
    UnsupportedCrs,
)
from minicube.raster_io import GeoTransform

# WGS84 ellipsoid and the transverse-mercator constants shared by every zone.
_A = 6378137.0
_F = 1.0 / 298.257223563
_K0 = 0.9996
_FALSE_EASTING = 500_000.0
_FALSE_NORTHING_SOUTH = 10_000_000.0

_E2 = _F * (2.0 - _F)
_E = math.sqrt(_E2)
_N = _F / (2.0 - _F)

# Rectifying radius and the order-6 series coefficients (Krueger/Karney).
_A1 = _A / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0 + _N**6 / 256.0)
_ALPHA = (
    _N / 2 - 2 * _N**2 / 3 + 5 * _N**3 / 16 + 41 * _N**4 / 180
    - 127 * _N**5 / 288 + 7891 * _N**6 / 37800,
    13 * _N**2 / 48 - 3 * _N**3 / 5 + 557 * _N**4 / 1440 + 281 * _N**5 / 630
    - 1983433 * _N**6 / 1935360,
    61 * _N**3 / 240 - 103 * _N**4 / 140 + 15061 * _N**5 / 26880
    + 167603 * _N**6 / 181440,
    49561 * _N**4 / 161280 - 179 * _N**5 / 168 + 6601661 * _N**6 / 7257600,
    34729 * _N**5 / 80640 - 3418889 * _N**6 / 1995840,
    212378941 * _N**6 / 319334400,
)
_BETA = (
    _N / 2 - 2 * _N**2 / 3 + 37 * _N**3 / 96 - _N**4 / 360
    - 81 * _N**5 / 512 + 96199 * _N**6 / 604800,
    _N**2 / 48 + _N**3 / 15 - 437 * _N**4 / 1440 + 46 * _N**5 / 105
    - 1118711 * _N**6 / 3870720,
    17 * _N**3 / 480 - 37 * _N**4 / 840 - 209 * _N**5 / 4480
    + 5569 * _N**6 / 90720,
    4397 * _N**4 / 161280 - 11 * _N**5 / 504 - 830251 * _N**6 / 7257600,
    4583 * _N**5 / 161280 - 108847 * _N**6 / 3991680,
    20648693 * _N**6 / 638668800,
)


@dataclass(frozen=True)
class CrsId:
    """EPSG code restricted to geographic WGS84 and the WGS84 UTM zones."""

    epsg: int

    def __post_init__(self):
        if self.epsg == 4326:
            return
        if 32601 <= self.epsg <= 32660 or 32701 <= self.epsg <= 32760:
            return
        raise UnsupportedCrs(f"EPSG {self.epsg} is outside the supported set")

    @property
    def is_geographic(self) -> bool:
        return self.epsg == 4326

    @property
    def zone(self) -> int:
        if self.is_geographic:
            raise UnsupportedCrs("geographic CRS has no UTM zone")
        return self.epsg % 100

    @property
    def hemisphere(self) -> str:
        if self.is_geographic:
            raise UnsupportedCrs("geographic CRS has no hemisphere")
        return "N" if self.epsg < 32700 else "S"


GEOGRAPHIC = CrsId(4326)


def utm_crs(zone: int, hemisphere: str) -> CrsId:
    if not 1 <= zone <= 60:
        raise UnsupportedCrs(f"UTM zone {zone} outside 1..60")
    if hemisphere not in ("N", "S"):
        raise UnsupportedCrs(f"hemisphere {hemisphere!r} must be N or S")
    return CrsId((32600 if hemisphere == "N" else 32700) + zone)


def utm_zone_for(lon: float, lat: float) -> CrsId:
    """UTM zone containing a geographic point (no polar special cases)."""
    zone = min(60, max(1, int((lon + 180.0) // 6.0) + 1))
    return utm_crs(zone, "N" if lat >= 0 else "S")


def _distinct(ring) -> int:
    return len({(float(x), float(y)) for x, y in ring})


@dataclass(frozen=True)
class GeoPolygon:
    """Polygon with an exterior ring and optional holes, implicitly closed."""

    id: str
    exterior: tuple
    holes: tuple = ()
    crs: CrsId = GEOGRAPHIC
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "exterior", tuple((float(x), float(y)) for x, y in self.exterior)
        )
        object.__setattr__(
            self,
            "holes",
            tuple(tuple((float(x), float(y)) for x, y in h) for h in self.holes),
        )
        if _distinct(self.exterior) < 3:
            raise ValueError(f"polygon {self.id!r}: exterior needs 3 distinct vertices")
        xs = [x for x, _ in self.exterior]
        ys = [y for _, y in self.exterior]
        bbox = (min(xs), min(ys), max(xs), max(ys))
        for hole in self.holes:
            if _distinct(hole) < 3:
                raise ValueError(f"polygon {self.id!r}: hole needs 3 distinct vertices")
            for x, y in hole:
                if not (bbox[0] <= x <= bbox[2] and bbox[1] <= y <= bbox[3]):
                    raise ValueError(
                        f"polygon {self.id!r}: hole vertex outside exterior bbox"
                    )

    def rings(self):
        yield self.exterior
        yield from self.holes

    def exterior_centroid(self) -> tuple:
        """Area centroid of the exterior ring (vertex mean when degenerate)."""
        pts = self.exterior
        a = cx = cy = 0.0
        for i in range(len(pts)):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % len(pts)]
            cross = x1 * y2 - x2 * y1
            a += cross
            cx += (x1 + x2) * cross
            cy += (y1 + y2) * cross
        if abs(a) < 1e-300:
            return (sum(x for x, _ in pts) / len(pts),
                    sum(y for _, y in pts) / len(pts))
        return cx / (3.0 * a), cy / (3.0 * a)


@dataclass(frozen=True)
class PixelRegion:
    """Tight boolean mask over the pixels whose centers fall in a polygon."""

    origin: tuple
    width: int
    height: int
    mask: np.ndarray

    def __post_init__(self):
        if self.mask.shape != (self.height, self.width):
            raise ValueError("mask shape does not match region dims")


def pixel_to_world(gt: GeoTransform, col: float, row: float):
    return (
        gt.c0 + col * gt.c1 + row * gt.c2,
        gt.c3 + col * gt.c4 + row * gt.c5,
    )


def world_to_pixel(gt: GeoTransform, x: float, y: float):
    """Invert the affine map; returns fractional (col, row)."""
    det = gt.det
    if det == 0.0:
        raise SingularTransform("geotransform has zero determinant")
    dx, dy = x - gt.c0, y - gt.c3
    return (
        (dx * gt.c5 - dy * gt.c2) / det,
        (dy * gt.c1 - dx * gt.c4) / det,
    )


def _taupf(tau: float) -> float:
    sigma = math.sinh(_E * math.atanh(_E * tau / math.hypot(1.0, tau)))
    return tau * math.hypot(1.0, sigma) - sigma * math.hypot(1.0, tau)


def utm_forward(zone: int, hemisphere: str, lon: float, lat: float):
    """Geographic WGS84 to UTM easting/northing.

    Series accuracy is far below a millimetre within the zone plus 3 degrees;
    points further out still compute but degrade gracefully.
    """
    crs = utm_crs(zone, hemisphere)  # validates zone/hemisphere
    if abs(lat) > 84.0:
        raise OutOfDomain(f"latitude {lat} outside +-84")
    lon0 = zone * 6.0 - 183.0
    dlon = math.remainder(lon - lon0, 360.0)
    lam = math.radians(dlon)
    phi = math.radians(lat)

    taup = _taupf(math.tan(phi))
    xi_p = math.atan2(taup, math.cos(lam))
    eta_p = math.asinh(math.sin(lam) / math.hypot(taup, math.cos(lam)))
    xi, eta = xi_p, eta_p
    for j, alpha in enumerate(_ALPHA, start=1):
        xi += alpha * math.sin(2 * j * xi_p) * math.cosh(2 * j * eta_p)
        eta += alpha * math.cos(2 * j * xi_p) * math.sinh(2 * j * eta_p)

    easting = _FALSE_EASTING + _K0 * _A1 * eta
    northing = _K0 * _A1 * xi
    if crs.hemisphere == "S":
        northing += _FALSE_NORTHING_SOUTH
    return easting, northing


def utm_inverse(zone: int, hemisphere: str, easting: float, northing: float):
    """UTM easting/northing back to geographic WGS84 (lon, lat)."""
    crs = utm_crs(zone, hemisphere)
    if not 100_000.0 <= easting <= 900_000.0:
        raise OutOfDomain(f"easting {easting} outside 100000..900000")
    if not 0.0 <= northing <= 10_000_000.0:
        raise OutOfDomain(f"northing {northing} outside 0..10000000")
    y = northing - (_FALSE_NORTHING_SOUTH if crs.hemisphere == "S" else 0.0)
    xi = y / (_K0 * _A1)
    eta = (easting - _FALSE_EASTING) / (_K0 * _A1)

    xi_p, eta_p = xi, eta
    for j, beta in enumerate(_BETA, start=1):
        xi_p -= beta * math.sin(2 * j * xi) * math.cosh(2 * j * eta)
        eta_p -= beta * math.cos(2 * j * xi) * math.sinh(2 * j * eta)

    s = math.sinh(eta_p)
    taup = math.sin(xi_p) / math.hypot(s, math.cos(xi_p))
    lam = math.atan2(s, math.cos(xi_p))

    # Newton inversion of the conformal-latitude map.
    e2m = 1.0 - _E2
    tau = taup / e2m
    stol = 1e-15 * max(1.0, abs(taup))
    for _ in range(8):
        taup_i = _taupf(tau)
        dtau = ((taup - taup_i) * (1.0 + e2m * tau * tau)
                / (e2m * math.hypot(1.0, tau) * math.hypot(1.0, taup_i)))
        tau += dtau
        if abs(dtau) < stol:
            break

    lon0 = zone * 6.0 - 183.0
    return lon0 + math.degrees(lam), math.degrees(math.atan(tau))


def _map_vertex(x: float, y: float, src: CrsId, dst: CrsId):
    if src.epsg == dst.epsg:
        return x, y
    if src.is_geographic:
        return utm_forward(dst.zone, dst.hemisphere, x, y)
    lon, lat = utm_inverse(src.zone, src.hemisphere, x, y)
    if dst.is_geographic:
        return lon, lat
    return utm_forward(dst.zone, dst.hemisphere, lon, lat)


def transform_polygon(p: GeoPolygon, target: CrsId) -> GeoPolygon:
    """Transform every vertex to the target CRS; id and attributes survive.

    UTM to UTM goes through geographic coordinates. A geographic polygon that
    straddles zones should be sent to the zone of its exterior centroid, which
    polygon_utm_crs picks.
    """
    if p.crs.epsg == target.epsg:
        return replace(p)
    exterior = tuple(_map_vertex(x, y, p.crs, target) for x, y in p.exterior)
    holes = tuple(
        tuple(_map_vertex(x, y, p.crs, target) for x, y in h) for h in p.holes
    )
    return GeoPolygon(
        id=p.id, exterior=exterior, holes=holes, crs=target,
        attributes=dict(p.attributes),
    )


def polygon_utm_crs(p: GeoPolygon) -> CrsId:
    """UTM zone of a geographic polygon, decided by its exterior centroid."""
    if not p.crs.is_geographic:
        return p.crs
    cx, cy = p.exterior_centroid()
    return utm_zone_for(cx, cy)


def rasterize_polygon(
    p: GeoPolygon, gt: GeoTransform, raster_width: int, raster_height: int
) -> PixelRegion:
    """Even-odd rasterization of a polygon to the raster's pixel grid.

    A pixel belongs to the region iff its center lies inside the polygon
    (holes subtracted) under the even-odd rule. Ties on edges are broken by
    shifting the test ordinate up by 1e-9 of a pixel height, which keeps a
    shared edge between two adjacent polygons from landing in both. Raises
    EmptyRegion when no center qualifies; the result is trimmed tight.
    """
    cols, rows = [], []
    for ring in p.rings():
        for x, y in ring:
            c, r = world_to_pixel(gt, x, y)
            cols.append(c)
            rows.append(r)
    c_lo = max(0, math.floor(min(cols)))
    c_hi = min(raster_width, math.ceil(max(cols)) + 1)
    r_lo = max(0, math.floor(min(rows)))
    r_hi = min(raster_height, math.ceil(max(rows)) + 1)
    if c_lo >= c_hi or r_lo >= r_hi:
        raise EmptyRegion(f"polygon {p.id!r} misses the raster extent")

    cc = np.arange(c_lo, c_hi, dtype=np.float64) + 0.5
    rr = np.arange(r_lo, r_hi, dtype=np.float64) + 0.5
    cgrid, rgrid = np.meshgrid(cc, rr)
    px = gt.c0 + cgrid * gt.c1 + rgrid * gt.c2
    py = gt.c3 + cgrid * gt.c4 + rgrid * gt.c5
    eps = 1e-9 * math.hypot(gt.c2, gt.c5)
    py = py + eps

    inside = np.zeros(px.shape, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for ring in p.rings():
            n = len(ring)
            for i in range(n):
                x1, y1 = ring[i]
                x2, y2 = ring[(i + 1) % n]
                if y1 == y2:
                    continue
                crosses = (y1 > py) != (y2 > py)
                xi = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                inside ^= crosses & (px < xi)

    row_any = inside.any(axis=1)
    col_any = inside.any(axis=0)
    if not row_any.any():
        raise EmptyRegion(f"polygon {p.id!r} covers no pixel center")
    r_first, r_last = np.flatnonzero(row_any)[[0, -1]]
    c_first, c_last = np.flatnonzero(col_any)[[0, -1]]
    mask = inside[r_first:r_last + 1, c_first:c_last + 1]
    return PixelRegion(
        origin=(int(c_lo + c_first), int(r_lo + r_first)),
        width=int(c_last - c_first + 1),
        height=int(r_last - r_first + 1),
        mask=mask,
    )
