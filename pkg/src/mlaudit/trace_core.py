"""Trace data model, the line-delimited trace log format and the shorty codec.

A trace log holds one JSON object per line, each describing a single logged
function invocation (quick code, JNI trampoline or native callback). Raw
argument and return bytes are interpreted with the function's shorty string.

Wire layout of ``raw_args``: an optional 4-byte receiver handle (non-static
calls), then each argument packed little-endian with no padding. Every kind
takes 4 bytes except Long/Double (8). A Pointer argument is a 4-byte handle,
unless it is the last argument, in which case it holds up to 500 captured
bytes of the pointee.
"""

from __future__ import annotations

import binascii
import enum
import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator

BLOB_CAP = 500
RECEIVER_BYTES = 4
SCHEMA_VERSION = 1


class TraceError(ValueError):
    """Base class for trace decoding errors."""


class UnknownShortyChar(TraceError):
    pass


class VoidArgument(TraceError):
    pass


class LengthMismatch(TraceError):
    pass


class BlobTooLarge(TraceError):
    pass


class ExcessiveCorruption(TraceError):
    pass


class TypeKind(enum.Enum):
    # char, wire size, struct code (low-order bytes carry narrow values)
    VOID = ("V", 0, "")
    BOOL = ("Z", 4, "?3x")
    BYTE = ("B", 4, "b3x")
    SHORT = ("S", 4, "h2x")
    CHAR = ("C", 4, "H2x")
    INT = ("I", 4, "i")
    LONG = ("J", 8, "q")
    FLOAT = ("F", 4, "f")
    DOUBLE = ("D", 8, "d")
    POINTER = ("L", 4, "4s")

    def __init__(self, char: str, size: int, code: str):
        self.char = char
        self.size = size
        self.code = code

    @classmethod
    def from_char(cls, c: str) -> "TypeKind":
        try:
            return _BY_CHAR[c]
        except KeyError:
            raise UnknownShortyChar(f"unknown shorty character {c!r}") from None


_BY_CHAR = {k.char: k for k in TypeKind}


class RecordKind(enum.Enum):
    QUICK = "quick"
    JNI = "jni"
    CALLBACK = "cb"


@dataclass(frozen=True)
class ShortySignature:
    shorty: str
    return_kind: TypeKind
    arg_kinds: tuple[TypeKind, ...]

    @property
    def arg_sizes(self) -> tuple[int, ...]:
        return tuple(k.size for k in self.arg_kinds)


@dataclass(frozen=True, slots=True)
class TypedValue:
    kind: TypeKind
    value: object = None


@lru_cache(maxsize=4096)
def parse_shorty(s: str) -> ShortySignature:
    if not s:
        raise UnknownShortyChar("empty shorty")
    kinds = [TypeKind.from_char(c) for c in s]
    for pos, k in enumerate(kinds[1:], start=1):
        if k is TypeKind.VOID:
            raise VoidArgument(f"void argument at position {pos} in {s!r}")
    return ShortySignature(s, kinds[0], tuple(kinds[1:]))


@dataclass(frozen=True)
class _Layout:
    packer: struct.Struct
    fixed_kinds: tuple[TypeKind, ...]
    tail_blob: bool


@lru_cache(maxsize=4096)
def _layout(arg_kinds: tuple[TypeKind, ...]) -> _Layout:
    tail_blob = bool(arg_kinds) and arg_kinds[-1] is TypeKind.POINTER
    fixed = arg_kinds[:-1] if tail_blob else arg_kinds
    fmt = "<" + "".join(k.code for k in fixed)
    return _Layout(struct.Struct(fmt), fixed, tail_blob)


def _wrap(kind: TypeKind, v) -> TypedValue:
    if kind is TypeKind.POINTER:
        return TypedValue(kind, bytes(v))
    return TypedValue(kind, v)


def decode_args(sig: ShortySignature, raw: bytes, is_static: bool) -> list[TypedValue]:
    """Decode a raw argument array into typed values.

    Non-static calls carry the receiver handle in the first four bytes, which
    is skipped. A trailing Pointer argument consumes ``min(500, remaining)``
    bytes; anything after the cap is ignored.
    """
    layout = _layout(sig.arg_kinds)
    start = 0 if is_static else RECEIVER_BYTES
    need = start + layout.packer.size
    if len(raw) < need or (not layout.tail_blob and len(raw) != need):
        raise LengthMismatch(
            f"{sig.shorty}: expected {'>=' if layout.tail_blob else ''}{need} bytes, got {len(raw)}"
        )
    values = layout.packer.unpack_from(raw, start)
    out = [_wrap(k, v) for k, v in zip(layout.fixed_kinds, values)]
    if layout.tail_blob:
        out.append(TypedValue(TypeKind.POINTER, bytes(raw[need:need + BLOB_CAP])))
    return out


def decode_return(sig: ShortySignature, raw: bytes) -> TypedValue:
    kind = sig.return_kind
    if len(raw) != kind.size:
        raise LengthMismatch(f"{sig.shorty}: return needs {kind.size} bytes, got {len(raw)}")
    if kind is TypeKind.VOID:
        return TypedValue(kind, None)
    (v,) = struct.unpack("<" + kind.code, raw)
    return _wrap(kind, v)


def _check_value(tv: TypedValue, last: bool) -> None:
    if tv.kind is TypeKind.VOID:
        raise VoidArgument("void value cannot be an argument")
    if tv.kind is TypeKind.POINTER:
        blob = tv.value
        if not isinstance(blob, (bytes, bytearray)):
            raise TypeError("pointer value must be bytes")
        if len(blob) > BLOB_CAP:
            raise BlobTooLarge(f"blob of {len(blob)} bytes exceeds {BLOB_CAP}")
        if not last and len(blob) != TypeKind.POINTER.size:
            raise LengthMismatch("non-trailing pointer must be a 4-byte handle")


def encode_args(values: list[TypedValue], is_static: bool) -> bytes:
    """Inverse of :func:`decode_args`; non-static calls get a zero receiver handle."""
    for i, tv in enumerate(values):
        _check_value(tv, i == len(values) - 1)
    kinds = tuple(tv.kind for tv in values)
    layout = _layout(kinds)
    n_fixed = len(layout.fixed_kinds)
    head = b"" if is_static else bytes(RECEIVER_BYTES)
    body = layout.packer.pack(*(tv.value for tv in values[:n_fixed]))
    tail = bytes(values[-1].value) if layout.tail_blob else b""
    return head + body + tail


def encode_return(value: TypedValue) -> bytes:
    if value.kind is TypeKind.VOID:
        return b""
    if value.kind is TypeKind.POINTER and len(value.value) != TypeKind.POINTER.size:
        raise LengthMismatch("pointer return must be a 4-byte handle")
    return struct.pack("<" + value.kind.code, value.value)


@dataclass(frozen=True, slots=True)
class TraceRecord:
    timestamp_ns: int
    pid: int
    tid: int
    kind: RecordKind
    function_name: str
    library: str | None = None
    offset: int | None = None
    is_static: bool = True
    shorty: str | None = None
    raw_args: bytes = b""
    raw_return: bytes = b""
    payload: str | None = None
    stack: tuple[str, ...] | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def signature(self) -> ShortySignature | None:
        return parse_shorty(self.shorty) if self.shorty else None

    def decoded_args(self) -> list[TypedValue]:
        if not self.shorty:
            return []
        return decode_args(parse_shorty(self.shorty), self.raw_args, self.is_static)

    def decoded_return(self) -> TypedValue | None:
        if not self.shorty:
            return None
        return decode_return(parse_shorty(self.shorty), self.raw_return)


@dataclass
class TraceCounters:
    read: int = 0
    accepted: int = 0
    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)

    def reject(self, reason: str) -> None:
        self.rejected += 1
        self.reasons[reason] += 1


@dataclass
class TraceLog:
    records: list[TraceRecord]
    counters: TraceCounters

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> TraceRecord:
        return self.records[i]


class _Reject(Exception):
    pass


_KINDS = {k.value: k for k in RecordKind}
_loads = json.loads
_a2b = binascii.a2b_base64
_B64_CHARS = re.compile(r"[A-Za-z0-9+/]*={0,2}")


def _req(obj: dict, key: str, typ):
    try:
        v = obj[key]
    except KeyError:
        raise _Reject(f"missing:{key}") from None
    if type(v) is not typ:
        raise _Reject(f"type:{key}")
    return v


def _opt(obj: dict, key: str, typ):
    v = obj.get(key)
    if v is not None and type(v) is not typ:
        raise _Reject(f"type:{key}")
    return v


def _b64(obj: dict, key: str) -> bytes:
    s = obj.get(key)
    if s is None:
        return b""
    if type(s) is not str:
        raise _Reject(f"type:{key}")
    if not _B64_CHARS.fullmatch(s):
        raise _Reject(f"base64:{key}")
    try:
        return _a2b(s)
    except (binascii.Error, ValueError):
        raise _Reject(f"base64:{key}") from None


def parse_record(line: str) -> TraceRecord:
    """Parse one trace line; raises ``_Reject`` with a reason code."""
    try:
        obj = _loads(line)
    except ValueError:
        raise _Reject("json") from None
    if type(obj) is not dict:
        raise _Reject("not_object")
    if obj.get("v") != SCHEMA_VERSION or type(obj.get("v")) is not int:
        raise _Reject("version")
    ts = _req(obj, "ts", int)
    if ts < 0 or ts >= 1 << 64:
        raise _Reject("range:ts")
    pid = _req(obj, "pid", int)
    tid = _req(obj, "tid", int)
    kind = _KINDS.get(_req(obj, "kind", str))
    if kind is None:
        raise _Reject("kind")
    fn = _req(obj, "fn", str)
    off = _opt(obj, "off", str)
    if off is not None:
        try:
            if not off.startswith("0x"):
                raise ValueError
            off = int(off, 16)
        except ValueError:
            raise _Reject("off") from None
    is_static = obj.get("static", True)
    if type(is_static) is not bool:
        raise _Reject("type:static")
    shorty = _opt(obj, "shorty", str)
    if kind is not RecordKind.CALLBACK:
        if shorty is None:
            raise _Reject("missing:shorty")
    if shorty is not None:
        try:
            parse_shorty(shorty)
        except TraceError:
            raise _Reject("shorty") from None
    payload = _opt(obj, "payload", str)
    if kind is RecordKind.CALLBACK and payload is None:
        raise _Reject("missing:payload")
    stack = obj.get("stack")
    if stack is not None:
        if type(stack) is not list or not all(type(f) is str for f in stack):
            raise _Reject("type:stack")
        stack = tuple(stack)
    return TraceRecord(
        ts, pid, tid, kind, fn, _opt(obj, "lib", str), off, is_static, shorty,
        _b64(obj, "args"), _b64(obj, "ret"), payload, stack,
    )


def iter_trace(
    lines: Iterable[str],
    counters: TraceCounters | None = None,
    *,
    max_reject_ratio: float = 0.5,
    min_lines: int = 1000,
) -> Iterator[TraceRecord]:
    """Stream accepted records from trace lines, counting rejects.

    Blank lines are ignored. Memory use is constant apart from one timestamp
    per (pid, tid). Raises :class:`ExcessiveCorruption` once at least
    ``min_lines`` have been read and the reject ratio exceeds the threshold,
    and again at the end of input for shorter logs.
    """
    c = counters if counters is not None else TraceCounters()
    last_ts: dict[tuple[int, int], int] = {}
    for line in lines:
        if not line.strip():
            continue
        c.read += 1
        try:
            rec = parse_record(line)
            key = (rec.pid, rec.tid)
            if last_ts.get(key, 0) > rec.timestamp_ns:
                raise _Reject("non_monotonic_ts")
            last_ts[key] = rec.timestamp_ns
        except _Reject as e:
            c.reject(str(e))
            if c.read >= min_lines and c.rejected > max_reject_ratio * c.read:
                raise ExcessiveCorruption(_corruption_msg(c))
            continue
        c.accepted += 1
        yield rec
    if c.read and c.rejected > max_reject_ratio * c.read:
        raise ExcessiveCorruption(_corruption_msg(c))


def _corruption_msg(c: TraceCounters) -> str:
    top = ", ".join(f"{r}={n}" for r, n in c.reasons.most_common(3))
    return f"{c.rejected}/{c.read} lines rejected ({top})"


def parse_trace(lines: Iterable[str], **kw) -> TraceLog:
    counters = TraceCounters()
    records = list(iter_trace(lines, counters, **kw))
    return TraceLog(records, counters)


def read_trace(path, **kw) -> TraceLog:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_trace(fh, **kw)


def record_to_dict(rec: TraceRecord) -> dict:
    d: dict = {
        "v": rec.schema_version,
        "ts": rec.timestamp_ns,
        "pid": rec.pid,
        "tid": rec.tid,
        "kind": rec.kind.value,
        "fn": rec.function_name,
    }
    if rec.library is not None:
        d["lib"] = rec.library
    if rec.offset is not None:
        d["off"] = hex(rec.offset)
    d["static"] = rec.is_static
    if rec.shorty is not None:
        d["shorty"] = rec.shorty
    if rec.raw_args:
        d["args"] = binascii.b2a_base64(rec.raw_args, newline=False).decode("ascii")
    if rec.raw_return:
        d["ret"] = binascii.b2a_base64(rec.raw_return, newline=False).decode("ascii")
    if rec.payload is not None:
        d["payload"] = rec.payload
    if rec.stack is not None:
        d["stack"] = list(rec.stack)
    return d


def serialize_record(rec: TraceRecord) -> str:
    return json.dumps(record_to_dict(rec), separators=(",", ":"))
