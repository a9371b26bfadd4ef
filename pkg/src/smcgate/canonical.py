"""Canonical JSON encoding used as the signing input for every protocol message.

The byte format is fixed: UTF-8, object keys sorted, no insignificant
whitespace, integers in base 10, binary values as lower-case hex. Floats are
refused outright; numeric payloads travel as integers or fixed-point strings
so that two processes never disagree on a rendering.
"""

from __future__ import annotations

import json
from typing import Any


class SerializationError(ValueError):
    """Raised when a value has no canonical representation."""


def _normalize(value: Any, path: str) -> Any:
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        raise SerializationError(f"float at {path or '$'} has no canonical form; use int or decimal string")
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if hasattr(value, "to_dict"):
        return _normalize(value.to_dict(), path)
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise SerializationError(f"non-string key {k!r} at {path or '$'}")
            out[k] = _normalize(v, f"{path}.{k}")
        return out
    if isinstance(value, (list, tuple)):
        return [_normalize(v, f"{path}[{i}]") for i, v in enumerate(value)]
    raise SerializationError(f"cannot serialize {type(value).__name__} at {path or '$'}")


def canonical_serialize(message: Any) -> bytes:
    """Return the canonical bytes of ``message``.

    ``message`` may be a plain JSON-like structure or any object exposing
    ``to_dict()``. Sets are not accepted; callers put collections into
    their canonical member order before serializing.
    """
    normalized = _normalize(message, "")
    text = json.dumps(normalized, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise SerializationError(f"string is not valid UTF-8: {exc.reason}") from exc


def loads(data: bytes | str) -> Any:
    """Parse JSON received from the wire, reporting errors as byte offsets."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid UTF-8 at byte {exc.start}", exc.start) from exc
    else:
        text = data
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ProtocolError(f"malformed JSON at byte {offset}: {exc.msg}", offset) from exc


class ProtocolError(ValueError):
    """A wire message could not be parsed or is missing required fields."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset
