"""Grayscale image values and file formats.

An image is a 2-D float64 array with every pixel in [0, 1] and both extents
at least 8 (the feature network's minimum receptive field). 8-bit values map
linearly: stored v corresponds to v / 255.

Supported formats: binary PGM (P5) read/write, 8-bit PNG (grayscale and RGB,
non-interlaced) read/write, binary PPM (P6) write for color renderings.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MIN_SIZE = 8

__all__ = [
    "check_image",
    "to_unit",
    "to_bytes",
    "read_pgm",
    "write_pgm",
    "read_png",
    "write_png",
    "write_ppm",
    "read_image",
    "write_image",
]


def check_image(img: np.ndarray, name: str = "image", min_size: int = MIN_SIZE) -> np.ndarray:
    """Validate the image contract; returns the array as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"{name}: expected 2-D grayscale, got shape {img.shape}")
    h, w = img.shape
    if h < min_size or w < min_size:
        raise ValueError(f"{name}: size {(h, w)} below minimum {min_size}x{min_size}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name}: contains non-finite pixels")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(
            f"{name}: pixels outside [0,1] (min {img.min():.6g}, max {img.max():.6g})"
        )
    return img


def to_unit(raw: np.ndarray, maxval: int = 255) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / float(maxval)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize [0,1] intensities to uint8 with round-half-away behaviour of
    np.rint; values are clipped first so callers may pass slight overshoots."""
    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0)
    return q.astype(np.uint8)


# ---------------------------------------------------------------- PGM (P5)

def _read_pnm_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    # header tokens may be separated by whitespace and '#' comments
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into a [0,1] float image."""
    with open(path, "rb") as f:
        data = f.read()
    width, height, maxval, offset = _read_pnm_header(data, b"P5")
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported (maxval {maxval})")
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset)
    return to_unit(raw.reshape(height, width), maxval)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(to_bytes(img).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 or [0,1] float array as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = to_bytes(rgb)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


# ---------------------------------------------------------------- PNG

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png(path, array: np.ndarray) -> None:
    """Write an 8-bit PNG. (H, W) arrays become grayscale, (H, W, 3) RGB.
    Float input in [0,1] is quantized; uint8 passes through."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        a = to_bytes(a)
    if a.ndim == 2:
        color_type, h, w = 0, a.shape[0], a.shape[1]
        rows = a.reshape(h, w)
    elif a.ndim == 3 and a.shape[2] == 3:
        color_type, h, w = 2, a.shape[0], a.shape[1]
        rows = a.reshape(h, w * 3)
    else:
        raise ValueError(f"write_png: expected (H,W) or (H,W,3), got shape {a.shape}")
    raw = b"".join(b"\x00" + rows[y].tobytes() for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(_PNG_SIG)
        f.write(_chunk(b"IHDR", ihdr))
        f.write(_chunk(b"IDAT", zlib.compress(raw, 9)))
        f.write(_chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, w: int, nch: int) -> np.ndarray:
    stride = w * nch
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(h):
        ftype = raw[pos]
        line = bytearray(raw[pos + 1:pos + 1 + stride])
        pos += 1 + stride
        if ftype == 1:  # Sub
            for i in range(nch, stride):
                line[i] = (line[i] + line[i - nch]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                left = line[i - nch] if i >= nch else 0
                line[i] = (line[i] + ((left + int(prev[i])) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                left = line[i - nch] if i >= nch else 0
                ul = int(prev[i - nch]) if i >= nch else 0
                line[i] = (line[i] + _paeth(left, int(prev[i]), ul)) & 0xFF
        elif ftype != 0:
            raise ValueError(f"PNG: unsupported filter type {ftype}")
        out[y] = np.frombuffer(bytes(line), dtype=np.uint8)
        prev = out[y]
    return out


def read_png(path) -> np.ndarray:
    """Read an 8-bit non-interlaced PNG; grayscale returns a [0,1] 2-D float
    image, RGB returns (H, W, 3) uint8."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(_PNG_SIG):
        raise ValueError(f"{path}: not a PNG file")
    pos = len(_PNG_SIG)
    idat = b""
    w = h = depth = color = interlace = None
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            w, h, depth, color, _, _, interlace = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if depth != 8 or color not in (0, 2) or interlace:
        raise ValueError(
            f"{path}: only 8-bit non-interlaced grayscale/RGB PNG supported "
            f"(depth {depth}, color type {color})"
        )
    nch = 1 if color == 0 else 3
    rows = _unfilter(zlib.decompress(idat), h, w, nch)
    if nch == 1:
        return to_unit(rows.reshape(h, w))
    return rows.reshape(h, w, 3)


# ------------------------------------------------------------- dispatch

def read_image(path) -> np.ndarray:
    p = str(path)
    if p.endswith(".png"):
        img = read_png(p)
        if img.ndim != 2:
            raise ValueError(f"{path}: color PNG is not a grayscale image")
        return img
    return read_pgm(p)


def write_image(path, img: np.ndarray) -> None:
    p = str(path)
    if p.endswith(".png"):
        write_png(p, img)
    else:
        write_pgm(p, img)
