"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    """Malformed or truncated netpbm data; the message carries a byte offset."""


_WS = b" \t\n\r\v\f"


def _read_token(buf: bytes, pos: int, what: str):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetpbmError(f"unexpected end of header at byte {start}: missing {what}")
    return buf[start:pos], pos


def _read_int(buf: bytes, pos: int, what: str):
    tok, end = _read_token(buf, pos, what)
    if not tok.isdigit():
        raise NetpbmError(f"invalid {what} {tok[:16]!r} at byte {end - len(tok)}")
    return int(tok), end


def parse(buf: bytes, expect: str | None = None) -> np.ndarray:
    """Decode a P5/P6 payload into ``H x W`` or ``H x W x 3`` uint8."""
    if len(buf) < 2:
        raise NetpbmError(f"file too short ({len(buf)} bytes) for a magic number at byte 0")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"bad magic {magic!r} at byte 0 (expected P5 or P6)")
    if expect is not None and magic.decode() != expect:
        raise NetpbmError(f"expected {expect} but found {magic.decode()} at byte 0")
    if len(buf) > 2 and buf[2:3] not in _WS:
        raise NetpbmError(f"missing whitespace after magic at byte 2")
    w, pos = _read_int(buf, 2, "width")
    h, pos = _read_int(buf, pos, "height")
    maxval, pos = _read_int(buf, pos, "maxval")
    if w <= 0 or h <= 0:
        raise NetpbmError(f"non-positive image size {w}x{h} before byte {pos}")
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} before byte {pos} (only 255)")
    if pos >= len(buf) or buf[pos:pos + 1] not in _WS:
        raise NetpbmError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    have = len(buf) - pos
    if have < need:
        raise NetpbmError(
            f"truncated payload: need {need} bytes from byte {pos}, have {have} "
            f"(missing {need - have} bytes)")
    if have > need:
        raise NetpbmError(f"{have - need} trailing bytes after payload end at byte {pos + need}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).copy()
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError("netpbm encoding needs uint8 data")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def read(path, expect: str | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return parse(buf, expect)
    except NetpbmError as exc:
        raise NetpbmError(f"{path}: {exc}") from None


def write(path, arr: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(encode(arr))
