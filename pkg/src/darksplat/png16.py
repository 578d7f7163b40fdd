"""Minimal 16-bit RGB PNG codec.

Frames are stored as 16-bit truecolor PNGs (value = intensity * 65535) and
none of the installed imaging libraries writes that pixel format, so this
module implements the small slice of the PNG spec we need: bit depth 16,
color type 2, no interlacing. The writer always emits filter type 0; the
reader understands all five standard scanline filters so files from other
encoders load too.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CorruptFileError, ParseError

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag, payload):
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png16(path, img):
    """Write a (H, W, 3) uint16 array as a 16-bit truecolor PNG."""
    img = np.asarray(img)
    if img.dtype != np.uint16 or img.ndim != 3 or img.shape[2] != 3:
        raise ParseError("write_png16 expects an (H, W, 3) uint16 array")
    h, w = img.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 2, 0, 0, 0)
    raw = img.astype(">u2").tobytes()
    stride = w * 6
    scanlines = bytearray()
    for row in range(h):
        scanlines.append(0)
        scanlines += raw[row * stride:(row + 1) * stride]
    with open(path, "wb") as fh:
        fh.write(_SIGNATURE)
        fh.write(_chunk(b"IHDR", ihdr))
        fh.write(_chunk(b"IDAT", zlib.compress(bytes(scanlines), 6)))
        fh.write(_chunk(b"IEND", b""))


def _paeth(a, b, c):
    p = a.astype(np.int32) + b.astype(np.int32) - c.astype(np.int32)
    pa = np.abs(p - a)
    pb = np.abs(p - b)
    pc = np.abs(p - c)
    out = np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))
    return out.astype(np.uint8)


def _unfilter(scanlines, h, w, bpp):
    stride = w * bpp
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for row in range(h):
        ftype = scanlines[pos]
        pos += 1
        cur = np.frombuffer(scanlines, dtype=np.uint8, count=stride,
                            offset=pos).copy()
        pos += stride
        prev = out[row - 1] if row else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            pass
        elif ftype == 1:
            for i in range(bpp, stride):
                cur[i] = (cur[i] + cur[i - bpp]) & 0xFF
        elif ftype == 2:
            cur = (cur.astype(np.int32) + prev).astype(np.uint8)
        elif ftype == 3:
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + ((int(left) + int(prev[i])) >> 1)) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else np.uint8(0)
                ul = prev[i - bpp] if i >= bpp else np.uint8(0)
                cur[i] = (cur[i] + _paeth(np.uint8(left), prev[i],
                                          np.uint8(ul))) & 0xFF
        else:
            raise CorruptFileError(f"unknown PNG filter type {ftype}")
        out[row] = cur
    return out


def read_png16(path):
    """Read a 16-bit truecolor PNG into an (H, W, 3) uint16 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _SIGNATURE:
        raise CorruptFileError("not a PNG file", path=str(path), offset=0)
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos + 8 <= len(blob):
        length, tag = struct.unpack(">I4s", blob[pos:pos + 8])
        payload = blob[pos + 8:pos + 8 + length]
        if len(payload) != length:
            raise CorruptFileError("truncated chunk", path=str(path), offset=pos)
        crc = struct.unpack(">I", blob[pos + 8 + length:pos + 12 + length])[0]
        if crc != (zlib.crc32(tag + payload) & 0xFFFFFFFF):
            raise CorruptFileError("chunk CRC mismatch", path=str(path),
                                   offset=pos)
        if tag == b"IHDR":
            ihdr = payload
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
        pos += 12 + length
    if ihdr is None:
        raise CorruptFileError("missing IHDR", path=str(path))
    w, h, depth, ctype, comp, filt, interlace = struct.unpack(">IIBBBBB", ihdr)
    if depth != 16 or ctype != 2 or comp != 0 or filt != 0 or interlace != 0:
        raise CorruptFileError(
            f"unsupported PNG flavor (depth={depth}, color={ctype})",
            path=str(path))
    try:
        scan = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise CorruptFileError(f"corrupt image data: {exc}", path=str(path))
    bpp = 6
    if len(scan) != h * (w * bpp + 1):
        raise CorruptFileError("scanline data has the wrong size",
                               path=str(path))
    rows = _unfilter(scan, h, w, bpp)
    return rows.reshape(h, w * bpp).view(">u2").astype(np.uint16).reshape(h, w, 3)


def to_uint16(img):
    """Quantize a [0, 1] float image to uint16 levels."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
                    * 65535.0).astype(np.uint16)


def from_uint16(arr):
    """Dequantize uint16 levels back to float64 in [0, 1]."""
    return np.asarray(arr, dtype=np.float64) / 65535.0
