"""Exception hierarchy shared by all minicube modules.

Every error carries a stable machine-readable ``code`` so the HTTP layer
can map failures to structured bodies without string matching.
"""


class MinicubeError(Exception):
    """Base class for all library errors."""

    code = "internal_error"
    http_status = 400

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def to_dict(self):
        return {"code": self.code, "message": self.message, "detail": self.detail}


# --- raster_io ---

class UnsupportedFormat(MinicubeError):
    code = "unsupported_format"


class MissingTag(MinicubeError):
    code = "missing_tag"


class MalformedGeoKeys(MinicubeError):
    code = "malformed_geokeys"


class OutOfBounds(MinicubeError):
    code = "out_of_bounds"


class DecodeError(MinicubeError):
    code = "decode_error"


# --- geo ---

class SingularTransform(MinicubeError):
    code = "singular_transform"


class OutOfDomain(MinicubeError):
    code = "out_of_domain"


class UnsupportedCrs(MinicubeError):
    code = "unsupported_crs"


class EmptyRegion(MinicubeError):
    """No pixel center falls inside the polygon. A signal, not a failure."""

    code = "empty_region"


# --- catalog ---

class InvalidPattern(MinicubeError):
    code = "invalid_pattern"


class ConflictingDefinition(MinicubeError):
    code = "conflicting_definition"
    http_status = 409


class PatternMismatch(MinicubeError):
    code = "pattern_mismatch"


class InconsistentScene(MinicubeError):
    code = "inconsistent_scene"


class UnknownProduct(MinicubeError):
    code = "unknown_product"
    http_status = 404


class SourceUnavailable(MinicubeError):
    code = "source_unavailable"


class MalformedGeoJson(MinicubeError):
    code = "malformed_geojson"


# --- engine ---

class UnknownPolygon(MinicubeError):
    code = "unknown_polygon"
    http_status = 404


class UnknownMeasure(MinicubeError):
    code = "unknown_measure"


class MissingBandRole(MinicubeError):
    code = "missing_band_role"


class ShapeMismatch(MinicubeError):
    code = "shape_mismatch"


# --- export ---

class FingerprintMismatch(MinicubeError):
    code = "fingerprint_mismatch"
    http_status = 409


class CorruptManifest(MinicubeError):
    code = "corrupt_manifest"


class IoFailure(MinicubeError):
    code = "io_failure"
