"""
On-disk formats.

Binary container (datasets and checkpoints)::

    magic      8 bytes  (b"DTMEDATA" or b"DTMECKPT")
    hlen       uint64 little-endian, byte length of the header
    header     UTF-8 JSON, keys sorted; contains "arrays": [{name, shape}, ...]
    body       every array in header order, float64 little-endian, row-major

Nothing time- or host-dependent is written, so equal content gives equal bytes.

Key-value text (run configs, dataset specs, plans)::

    # comment
    key = value

Values are parsed according to a schema; errors name the line and the field.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ValidationError

ENV_PREFIX = "DTME_"


def write_container(path, magic: bytes, header: dict, arrays: Mapping[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    if raw[:8] != magic:
        raise ValidationError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise ValidationError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt header ({exc})") from None
    arrays: Dict[str, np.ndarray] = {}
    off = 16 + hlen
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise ValidationError(f"{path}: body shorter than header declares ({entry['name']})")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8,
                                              offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise ValidationError(f"{path}: {len(raw) - off} trailing bytes after body")
    return header, arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# key = value files
# ---------------------------------------------------------------------------

def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int(s: str) -> int:
    return int(s, 10)


def _float(s: str) -> float:
    v = float(s)
    if not np.isfinite(v):
        raise ValueError("must be finite")
    return v


def _str(s: str) -> str:
    return s


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


def _list_of(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        return tuple(item(x.strip()) for x in s.split(",") if x.strip())
    return parse


PARSERS = {"bool": _bool, "int": _int, "float": _float, "str": _str}


@dataclass(frozen=True)
class Field:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


def parse_kv(text: str, schema: Iterable[Field], source: str = "<text>",
             env: Optional[Mapping[str, str]] = None, allow_unknown: bool = False
             ) -> Dict[str, Any]:
    """Parse ``key = value`` text against a schema.

    Missing keys take their default (a default of ``None`` marks the key as
    required). Environment variables ``DTME_<KEY>`` override file values.
    """
    fields = {f.name: f for f in schema}
    raw: Dict[str, Tuple[str, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in fields:
            if allow_unknown:
                continue
            raise ValidationError(f"{source}:{lineno}: unknown field {key!r}")
        if key in raw:
            raise ValidationError(f"{source}:{lineno}: field {key!r} given twice")
        raw[key] = (value, f"{source}:{lineno}")
    for key, val in (env or {}).items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in fields:
                raw[name] = (val, f"environment {key}")
    out: Dict[str, Any] = {}
    for name, f in fields.items():
        if name in raw:
            value, where = raw[name]
            try:
                out[name] = f.parse(value)
            except (ValueError, TypeError) as exc:
                raise ValidationError(f"{where}: field {name!r}: {exc}") from None
        elif f.default is None:
            raise ValidationError(f"{source}: required field {name!r} is missing")
        else:
            out[name] = f.default
    return out


def format_kv(values: Mapping[str, Any], header: str = "") -> str:
    lines = [f"# {line}" for line in header.splitlines()] if header else []
    for k, v in values.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


choice = _choice
list_of = _list_of
