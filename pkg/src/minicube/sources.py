"""URI access for scene files and scan roots.

Understands plain filesystem paths, file:// URIs and http(s):// URLs. Local
files are served through positioned reads; remote files are fetched whole on
first open (scene fixtures are single-digit megabytes, and generic range
support cannot be assumed of a plain listing server).
"""

from __future__ import annotations

import os
import urllib.error
import urllib.parse
import urllib.request

from minicube.errors import IoFailure, SourceUnavailable
from minicube.raster_io import as_byte_source


def _is_http(uri: str) -> bool:
    return uri.startswith("http://") or uri.startswith("https://")


def _local_path(uri: str) -> str:
    if uri.startswith("file://"):
        return urllib.parse.unquote(urllib.parse.urlparse(uri).path)
    return uri


class SourceHandle:
    """Byte source for one URI; close() releases any file descriptor."""

    def __init__(self, uri: str):
        self.uri = uri
        self._file = None
        if _is_http(uri):
            try:
                with urllib.request.urlopen(uri, timeout=30) as resp:
                    self._src = as_byte_source(resp.read())
            except (urllib.error.URLError, OSError, TimeoutError) as exc:
                raise SourceUnavailable(f"cannot fetch {uri}: {exc}")
        else:
            path = _local_path(uri)
            try:
                self._file = open(path, "rb")
            except OSError as exc:
                raise IoFailure(f"cannot open {path}: {exc}")
            self._src = as_byte_source(self._file)

    def read_at(self, offset: int, size: int) -> bytes:
        return self._src.read_at(offset, size)

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def list_source(kind: str, root: str) -> list[str]:
    """Enumerate candidate scene URIs under a scan root, sorted."""
    if kind == "local_dir":
        try:
            names = [e.name for e in os.scandir(root) if e.is_file()]
        except OSError as exc:
            raise SourceUnavailable(f"cannot list {root}: {exc}")
        return [os.path.join(root, n) for n in sorted(names)]
    if kind == "http_listing":
        try:
            with urllib.request.urlopen(root, timeout=30) as resp:
                text = resp.read().decode("utf-8", "replace")
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise SourceUnavailable(f"cannot fetch listing {root}: {exc}")
        uris = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            uris.append(urllib.parse.urljoin(root, line))
        return sorted(uris)
    raise SourceUnavailable(f"unknown source kind {kind!r}")
