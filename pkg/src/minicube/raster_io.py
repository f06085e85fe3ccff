"""Constrained TIFF/GeoTIFF reading: metadata parsing and windowed pixel access.

Supported subset: classic TIFF (magic 42), either byte order, chunky planar
layout, stripped or tiled organization, compression none (1) or deflate (8),
sample types uint8/uint16/int16/uint32/int32/float32/float64. Georeferencing
comes from ModelPixelScaleTag + one ModelTiepointTag (north-up, no rotation)
and the GeoKey directory; nodata from the GDAL ASCII tag 42113.

Everything outside the subset is rejected with UnsupportedFormat. Only the
first IFD is read.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from minicube.errors import (
    DecodeError,
    MalformedGeoKeys,
    MissingTag,
    OutOfBounds,
    UnsupportedFormat,
)

# TIFF tag numbers used by the subset.
TAG_IMAGE_WIDTH = 256
TAG_IMAGE_LENGTH = 257
TAG_BITS_PER_SAMPLE = 258
TAG_COMPRESSION = 259
TAG_STRIP_OFFSETS = 273
TAG_SAMPLES_PER_PIXEL = 277
TAG_ROWS_PER_STRIP = 278
TAG_STRIP_BYTE_COUNTS = 279
TAG_PLANAR_CONFIG = 284
TAG_TILE_WIDTH = 322
TAG_TILE_LENGTH = 323
TAG_TILE_OFFSETS = 324
TAG_TILE_BYTE_COUNTS = 325
TAG_SAMPLE_FORMAT = 339
TAG_MODEL_PIXEL_SCALE = 33550
TAG_MODEL_TIEPOINT = 33922
TAG_GEO_KEY_DIRECTORY = 34735
TAG_GDAL_NODATA = 42113

GEOKEY_GEOGRAPHIC_TYPE = 2048
GEOKEY_PROJECTED_CS_TYPE = 3072

_TAG_NAMES = {
    TAG_IMAGE_WIDTH: "ImageWidth",
    TAG_IMAGE_LENGTH: "ImageLength",
    TAG_BITS_PER_SAMPLE: "BitsPerSample",
    TAG_COMPRESSION: "Compression",
    TAG_STRIP_OFFSETS: "StripOffsets",
    TAG_SAMPLES_PER_PIXEL: "SamplesPerPixel",
    TAG_ROWS_PER_STRIP: "RowsPerStrip",
    TAG_STRIP_BYTE_COUNTS: "StripByteCounts",
    TAG_TILE_WIDTH: "TileWidth",
    TAG_TILE_LENGTH: "TileLength",
    TAG_TILE_OFFSETS: "TileOffsets",
    TAG_TILE_BYTE_COUNTS: "TileByteCounts",
    TAG_MODEL_PIXEL_SCALE: "ModelPixelScaleTag",
    TAG_MODEL_TIEPOINT: "ModelTiepointTag",
    TAG_GEO_KEY_DIRECTORY: "GeoKeyDirectoryTag",
}

# TIFF field type -> (struct char, byte size). Only the types the subset emits.
_FIELD_TYPES = {
    1: ("B", 1),   # BYTE
    2: ("c", 1),   # ASCII
    3: ("H", 2),   # SHORT
    4: ("I", 4),   # LONG
    5: ("II", 8),  # RATIONAL
    11: ("f", 4),  # FLOAT
    12: ("d", 8),  # DOUBLE
}

# (bits, sample format) -> canonical sample type name.
_SAMPLE_TYPES = {
    (8, 1): "uint8",
    (16, 1): "uint16",
    (16, 2): "int16",
    (32, 1): "uint32",
    (32, 2): "int32",
    (32, 3): "float32",
    (64, 3): "float64",
}

_NUMPY_KIND = {
    "uint8": "u1",
    "uint16": "u2",
    "int16": "i2",
    "uint32": "u4",
    "int32": "i4",
    "float32": "f4",
    "float64": "f8",
}


@dataclass(frozen=True)
class GeoTransform:
    """Affine map from pixel (col, row) to world (x, y).

    x = c0 + col*c1 + row*c2
    y = c3 + col*c4 + row*c5
    """

    c0: float
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float

    @property
    def det(self) -> float:
        return self.c1 * self.c5 - self.c2 * self.c4

    def translated(self, col: float, row: float) -> "GeoTransform":
        """Same grid with the origin moved to pixel (col, row)."""
        return GeoTransform(
            self.c0 + col * self.c1 + row * self.c2,
            self.c1,
            self.c2,
            self.c3 + col * self.c4 + row * self.c5,
            self.c4,
            self.c5,
        )

    def as_tuple(self):
        return (self.c0, self.c1, self.c2, self.c3, self.c4, self.c5)


@dataclass(frozen=True)
class Window:
    """Rectangle in pixel coordinates (may extend past the raster edge)."""

    col_off: int
    row_off: int
    width: int
    height: int


@dataclass(frozen=True)
class RasterMetadata:
    width: int
    height: int
    band_count: int
    sample_type: str
    bits_per_sample: int
    nodata: float | None
    geotransform: GeoTransform
    crs: int
    layout: str                      # "stripped" | "tiled"
    tile_or_strip_dims: tuple[int, int]
    compression: str                 # "none" | "deflate"
    byte_order: str                  # "little" | "big"
    # Read plumbing: per-chunk file locations in strip/tile order.
    chunk_offsets: tuple[int, ...]
    chunk_byte_counts: tuple[int, ...]


@dataclass
class PixelPatch:
    """A 2-D window of one band, converted to float64, with a validity mask."""

    width: int
    height: int
    values: np.ndarray
    valid_mask: np.ndarray
    geotransform: GeoTransform
    band_name: str

    def __post_init__(self):
        if self.values.shape != (self.height, self.width):
            raise ValueError("values shape does not match patch dims")
        if self.valid_mask.shape != self.values.shape:
            raise ValueError("valid_mask shape does not match values")

    def renamed(self, band_name: str) -> "PixelPatch":
        return replace(self, band_name=band_name)


class _BytesSource:
    """read_at view over an in-memory byte sequence."""

    def __init__(self, data):
        self._data = bytes(data)

    def read_at(self, offset: int, size: int) -> bytes:
        return self._data[offset:offset + size]


class _FileSource:
    """read_at view over an open binary file (pread when possible)."""

    def __init__(self, fileobj):
        self._f = fileobj
        try:
            self._fd = fileobj.fileno()
        except (AttributeError, OSError):
            self._fd = None

    def read_at(self, offset: int, size: int) -> bytes:
        if self._fd is not None:
            return os.pread(self._fd, size, offset)
        self._f.seek(offset)
        return self._f.read(size)


def as_byte_source(source):
    """Normalize bytes / file-like / read_at objects to a read_at object."""
    if hasattr(source, "read_at"):
        return source
    if isinstance(source, (bytes, bytearray, memoryview)):
        return _BytesSource(source)
    if hasattr(source, "read") and hasattr(source, "seek"):
        return _FileSource(source)
    raise TypeError(f"not a readable byte source: {type(source)!r}")


def _read_ifd(src) -> tuple[dict, str]:
    """Read the first IFD. Returns ({tag: tuple(values)}, endian_char)."""
    head = src.read_at(0, 8)
    if len(head) < 8:
        raise UnsupportedFormat("truncated TIFF header")
    if head[:2] == b"II":
        endian = "<"
    elif head[:2] == b"MM":
        endian = ">"
    else:
        raise UnsupportedFormat(f"not a TIFF: byte-order mark {head[:2]!r}")
    magic = struct.unpack(endian + "H", head[2:4])[0]
    if magic == 43:
        raise UnsupportedFormat("BigTIFF is not supported")
    if magic != 42:
        raise UnsupportedFormat(f"bad TIFF magic {magic}")
    ifd_offset = struct.unpack(endian + "I", head[4:8])[0]

    count_raw = src.read_at(ifd_offset, 2)
    if len(count_raw) < 2:
        raise UnsupportedFormat("truncated IFD")
    n_entries = struct.unpack(endian + "H", count_raw)[0]
    raw = src.read_at(ifd_offset + 2, n_entries * 12)
    if len(raw) < n_entries * 12:
        raise UnsupportedFormat("truncated IFD")

    tags = {}
    for i in range(n_entries):
        entry = raw[i * 12:(i + 1) * 12]
        tag, ftype, count = struct.unpack(endian + "HHI", entry[:8])
        if ftype not in _FIELD_TYPES:
            continue  # tags with exotic types are not part of the subset
        ch, size = _FIELD_TYPES[ftype]
        total = size * count
        if total <= 4:
            data = entry[8:8 + total]
        else:
            off = struct.unpack(endian + "I", entry[8:12])[0]
            data = src.read_at(off, total)
            if len(data) < total:
                raise UnsupportedFormat(f"tag {tag} value truncated")
        if ftype == 2:
            text = data.split(b"\x00", 1)[0].decode("ascii", "replace")
            tags[tag] = (text,)
        elif ftype == 5:
            vals = struct.unpack(endian + "I" * (2 * count), data)
            tags[tag] = tuple(
                (vals[2 * i] / vals[2 * i + 1]) if vals[2 * i + 1] else 0.0
                for i in range(count)
            )
        else:
            tags[tag] = struct.unpack(endian + ch * count, data)
    return tags, endian


def _require(tags: dict, tag: int):
    if tag not in tags:
        raise MissingTag(f"required tag {_TAG_NAMES.get(tag, tag)} ({tag}) absent")
    return tags[tag]


def _parse_geokeys(directory: tuple) -> int:
    """Extract the EPSG code from a GeoKeyDirectory SHORT array."""
    if len(directory) < 4:
        raise MalformedGeoKeys("GeoKey directory shorter than its header")
    n_keys = directory[3]
    if len(directory) < 4 + 4 * n_keys:
        raise MalformedGeoKeys(
            f"GeoKey directory announces {n_keys} keys but holds "
            f"{(len(directory) - 4) // 4}"
        )
    keys = {}
    for k in range(n_keys):
        key_id, location, count, value = directory[4 + 4 * k:8 + 4 * k]
        if location == 0 and count == 1:
            keys[key_id] = value
    if GEOKEY_PROJECTED_CS_TYPE in keys:
        return keys[GEOKEY_PROJECTED_CS_TYPE]
    if GEOKEY_GEOGRAPHIC_TYPE in keys:
        return keys[GEOKEY_GEOGRAPHIC_TYPE]
    raise MissingTag(
        "GeoKey directory carries neither ProjectedCSTypeGeoKey (3072) "
        "nor GeographicTypeGeoKey (2048)"
    )


def parse_metadata(source_bytes) -> RasterMetadata:
    """Parse the first IFD of a classic GeoTIFF into RasterMetadata.

    Accepts bytes or any readable byte source. Raises UnsupportedFormat for
    anything outside the documented subset, MissingTag when a required tag is
    absent and MalformedGeoKeys when the GeoKey directory is inconsistent.
    """
    src = as_byte_source(source_bytes)
    tags, endian = _read_ifd(src)

    width = _require(tags, TAG_IMAGE_WIDTH)[0]
    height = _require(tags, TAG_IMAGE_LENGTH)[0]
    if width <= 0 or height <= 0:
        raise UnsupportedFormat(f"degenerate raster {width}x{height}")

    compression_code = _require(tags, TAG_COMPRESSION)[0]
    if compression_code == 1:
        compression = "none"
    elif compression_code == 8:
        compression = "deflate"
    else:
        raise UnsupportedFormat(f"compression {compression_code} not supported")

    planar = tags.get(TAG_PLANAR_CONFIG, (1,))[0]
    if planar != 1:
        raise UnsupportedFormat(f"planar configuration {planar} not supported")

    samples = _require(tags, TAG_SAMPLES_PER_PIXEL)[0]
    bits_list = _require(tags, TAG_BITS_PER_SAMPLE)
    if len(set(bits_list)) != 1:
        raise UnsupportedFormat("bands with differing bit depths")
    bits = bits_list[0]
    formats = tags.get(TAG_SAMPLE_FORMAT, (1,) * samples)
    if len(set(formats)) != 1:
        raise UnsupportedFormat("bands with differing sample formats")
    sample_type = _SAMPLE_TYPES.get((bits, formats[0]))
    if sample_type is None:
        raise UnsupportedFormat(
            f"sample type (bits={bits}, format={formats[0]}) not supported"
        )

    if TAG_TILE_WIDTH in tags or TAG_TILE_OFFSETS in tags:
        tile_w = _require(tags, TAG_TILE_WIDTH)[0]
        tile_h = _require(tags, TAG_TILE_LENGTH)[0]
        if tile_w % 16 or tile_h % 16:
            raise UnsupportedFormat(
                f"tile dims {tile_w}x{tile_h} are not multiples of 16"
            )
        offsets = _require(tags, TAG_TILE_OFFSETS)
        byte_counts = _require(tags, TAG_TILE_BYTE_COUNTS)
        layout = "tiled"
        dims = (tile_w, tile_h)
    else:
        offsets = _require(tags, TAG_STRIP_OFFSETS)
        rows_per_strip = _require(tags, TAG_ROWS_PER_STRIP)[0]
        byte_counts = _require(tags, TAG_STRIP_BYTE_COUNTS)
        layout = "stripped"
        dims = (width, rows_per_strip)

    scale = _require(tags, TAG_MODEL_PIXEL_SCALE)
    tiepoint = _require(tags, TAG_MODEL_TIEPOINT)
    if len(scale) < 2 or len(tiepoint) < 6:
        raise UnsupportedFormat("pixel scale / tiepoint of unexpected length")
    # Tiepoint anchors pixel (i, j) at world (x, y); north-up convention.
    i, j, _, x, y, _ = tiepoint[:6]
    gt = GeoTransform(x - i * scale[0], scale[0], 0.0, y + j * scale[1], 0.0, -scale[1])

    crs = _parse_geokeys(_require(tags, TAG_GEO_KEY_DIRECTORY))

    nodata = None
    if TAG_GDAL_NODATA in tags:
        text = tags[TAG_GDAL_NODATA][0].strip()
        if text:
            try:
                nodata = float(text)
            except ValueError:
                raise UnsupportedFormat(f"unparseable nodata value {text!r}")

    return RasterMetadata(
        width=width,
        height=height,
        band_count=samples,
        sample_type=sample_type,
        bits_per_sample=bits,
        nodata=nodata,
        geotransform=gt,
        crs=crs,
        layout=layout,
        tile_or_strip_dims=dims,
        compression=compression,
        byte_order="little" if endian == "<" else "big",
        chunk_offsets=tuple(offsets),
        chunk_byte_counts=tuple(byte_counts),
    )


def _chunk_data(src, meta: RasterMetadata, index: int, expected: int) -> bytes:
    """Raw bytes of one strip/tile, decompressed and length-checked."""
    raw = src.read_at(meta.chunk_offsets[index], meta.chunk_byte_counts[index])
    if len(raw) != meta.chunk_byte_counts[index]:
        raise DecodeError(f"chunk {index}: file shorter than its byte count")
    if meta.compression == "deflate":
        try:
            data = zlib.decompress(raw)
        except zlib.error as exc:
            raise DecodeError(f"chunk {index}: deflate failure: {exc}")
    else:
        data = raw
    if len(data) != expected:
        raise DecodeError(
            f"chunk {index}: got {len(data)} bytes, expected {expected}"
        )
    return data


def read_window(source, meta: RasterMetadata, band_index: int, window: Window) -> PixelPatch:
    """Read one band over ``window`` clipped to the raster extent.

    Values are converted to float64; the valid mask is False where the stored
    value equals the nodata sentinel. For uncompressed stripped files only the
    row slices covering the window are read; compressed or tiled files read
    whole intersecting chunks.
    """
    if not 0 <= band_index < meta.band_count:
        raise ValueError(f"band index {band_index} out of range")
    src = as_byte_source(source)

    c0 = max(0, window.col_off)
    r0 = max(0, window.row_off)
    c1 = min(meta.width, window.col_off + window.width)
    r1 = min(meta.height, window.row_off + window.height)
    if c0 >= c1 or r0 >= r1:
        raise OutOfBounds("window does not intersect the raster extent")
    out_w, out_h = c1 - c0, r1 - r0

    endian = "<" if meta.byte_order == "little" else ">"
    dtype = np.dtype(endian + _NUMPY_KIND[meta.sample_type])
    bps = meta.bits_per_sample // 8
    spp = meta.band_count
    out = np.empty((out_h, out_w), dtype=np.float64)

    if meta.layout == "stripped":
        rps = meta.tile_or_strip_dims[1]
        row_bytes = meta.width * spp * bps
        for s in range(r0 // rps, (r1 - 1) // rps + 1):
            if s >= len(meta.chunk_offsets):
                raise DecodeError(f"strip {s} beyond strip table")
            strip_row0 = s * rps
            strip_rows = min(rps, meta.height - strip_row0)
            a = max(r0, strip_row0)
            b = min(r1, strip_row0 + strip_rows)
            if meta.compression == "none":
                if meta.chunk_byte_counts[s] != strip_rows * row_bytes:
                    raise DecodeError(f"strip {s}: byte count mismatch")
                for r in range(a, b):
                    off = (meta.chunk_offsets[s]
                           + (r - strip_row0) * row_bytes
                           + c0 * spp * bps)
                    raw = src.read_at(off, out_w * spp * bps)
                    if len(raw) != out_w * spp * bps:
                        raise DecodeError(f"strip {s}: short row read")
                    out[r - r0] = np.frombuffer(raw, dtype)[band_index::spp]
            else:
                data = _chunk_data(src, meta, s, strip_rows * row_bytes)
                arr = np.frombuffer(data, dtype).reshape(strip_rows, meta.width, spp)
                out[a - r0:b - r0] = arr[a - strip_row0:b - strip_row0, c0:c1, band_index]
    else:
        tile_w, tile_h = meta.tile_or_strip_dims
        tiles_across = -(-meta.width // tile_w)
        tile_bytes = tile_w * tile_h * spp * bps
        for ti in range(r0 // tile_h, (r1 - 1) // tile_h + 1):
            for tj in range(c0 // tile_w, (c1 - 1) // tile_w + 1):
                idx = ti * tiles_across + tj
                if idx >= len(meta.chunk_offsets):
                    raise DecodeError(f"tile {idx} beyond tile table")
                data = _chunk_data(src, meta, idx, tile_bytes)
                arr = np.frombuffer(data, dtype).reshape(tile_h, tile_w, spp)
                ra, rb = max(r0, ti * tile_h), min(r1, (ti + 1) * tile_h)
                ca, cb = max(c0, tj * tile_w), min(c1, (tj + 1) * tile_w)
                out[ra - r0:rb - r0, ca - c0:cb - c0] = arr[
                    ra - ti * tile_h:rb - ti * tile_h,
                    ca - tj * tile_w:cb - tj * tile_w,
                    band_index,
                ]

    if meta.nodata is None:
        valid = np.ones_like(out, dtype=bool)
    elif math.isnan(meta.nodata):
        valid = ~np.isnan(out)
    else:
        valid = out != meta.nodata

    return PixelPatch(
        width=out_w,
        height=out_h,
        values=out,
        valid_mask=valid,
        geotransform=meta.geotransform.translated(c0, r0),
        band_name=f"band_{band_index}",
    )
