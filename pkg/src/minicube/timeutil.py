"""UTC instant parsing and formatting shared across modules.

Instants are timezone-aware datetimes pinned to UTC; the wire format is
ISO-8601 with a trailing 'Z', seconds precision unless sub-second detail
exists.
"""

from datetime import datetime, timezone


def parse_utc(text: str) -> datetime:
    """'2020-06-21T10:50:31Z' (or offset form) -> aware UTC datetime."""
    s = text.strip()
    if s.endswith("Z") or s.endswith("z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_utc(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    dt = dt.astimezone(timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f").rstrip("0") + "Z"
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def now_utc() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)
