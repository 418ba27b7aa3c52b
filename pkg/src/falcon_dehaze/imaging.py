"""Image I/O (8-bit PNG, binary PPM) and synthetic haze generation.

Images are float32 arrays shaped (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
TRANSMISSION_RANGE = (0.05, 0.95)


class DecodeError(ValueError):
    """Malformed or unsupported image file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class HazeParams:
    airlight: float
    transmission: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.airlight <= 1.0:
            raise ValueError(f"airlight must lie in (0, 1], got {self.airlight}")
        t = np.asarray(self.transmission)
        if t.size and (t.min() <= 0.0 or t.max() >= 1.0):
            raise ValueError("transmission values must lie strictly inside (0, 1)")


# -- synthesis -------------------------------------------------------------


def synthesize_haze(clear: np.ndarray, params: HazeParams) -> np.ndarray:
    """Hazy observation ``J*t + A*(1 - t)`` per pixel and channel, clamped to [0, 1]."""
    clear = np.asarray(clear, dtype=np.float32)
    t = np.asarray(params.transmission, dtype=np.float32)
    if t.shape != clear.shape[:2]:
        raise ValueError(f"transmission shape {t.shape} does not match image {clear.shape[:2]}")
    t = t[..., None]
    hazy = clear * t + np.float32(params.airlight) * (1 - t)
    return np.clip(hazy, 0.0, 1.0)


def generate_t_field(width: int, height: int, seed: int, smoothness: int = 0) -> np.ndarray:
    """Seeded transmission map with values in [0.05, 0.95].

    ``smoothness`` is the Gaussian low-pass sigma (pixels) applied to the
    seeded noise. Smoothed fields are rank-equalised so their histogram stays
    uniform over the output range.
    """
    if smoothness < 0:
        raise ValueError("smoothness must be >= 0")
    lo, hi = TRANSMISSION_RANGE
    rng = np.random.default_rng(seed)
    noise = rng.random((height, width))
    if smoothness == 0:
        return (lo + (hi - lo) * noise).astype(np.float32)
    field = gaussian_filter(noise, sigma=smoothness, mode="reflect")
    ranks = np.empty(field.size)
    ranks[np.argsort(field, axis=None, kind="stable")] = np.arange(field.size)
    ranks /= max(field.size - 1, 1)
    return (lo + (hi - lo) * ranks.reshape(height, width)).astype(np.float32)


def generate_clear_scene(width: int, height: int, seed: int) -> np.ndarray:
    """Procedural haze-free scene: smooth colour fields plus dark-edged blocks and shadows."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((height, width, 3))
    for c in range(3):
        coarse = gaussian_filter(rng.random((height, width)), sigma=max(width, height) / 8, mode="wrap")
        coarse = (coarse - coarse.min()) / max(np.ptp(coarse), 1e-6)
        ramp = rng.uniform(-0.5, 0.5) * xx + rng.uniform(-0.5, 0.5) * yy
        img[..., c] = 0.15 + 0.6 * coarse + 0.2 * ramp
    for _ in range(rng.integers(4, 9)):
        h = int(rng.integers(height // 8, height // 2))
        w = int(rng.integers(width // 8, width // 2))
        y0 = int(rng.integers(0, height - h))
        x0 = int(rng.integers(0, width - w))
        colour = rng.random(3) * rng.uniform(0.3, 1.0)
        colour[rng.integers(0, 3)] *= 0.2
        img[y0 : y0 + h, x0 : x0 + w] = colour
        img[y0 : y0 + h, x0 : x0 + max(1, w // 10)] *= 0.3
    texture = gaussian_filter(rng.standard_normal((height, width, 3)), sigma=(1, 1, 0))
    img += 0.04 * texture
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_pair(seed: int, size: int = 64, smoothness: int = 8) -> tuple[np.ndarray, np.ndarray, HazeParams]:
    """Canonical (hazy, clear, params) triple for one corpus seed."""
    clear = quantize(generate_clear_scene(size, size, seed))
    t = generate_t_field(size, size, seed, smoothness)
    airlight = float(np.random.default_rng([seed, 1]).uniform(0.8, 1.0))
    params = HazeParams(airlight, t)
    hazy = quantize(synthesize_haze(clear, params))
    return hazy, clear, params


def write_corpus(out_dir, seed: int = 0, n_train: int = 16, n_val: int = 4, size: int = 64, fmt: str = "ppm") -> Path:
    """Write ``train/{hazy,clear}`` and ``val/{hazy,clear}`` with matching file stems.

    Pair ``i`` (counting train then val) is generated from seed ``seed + i``.
    """
    out = Path(out_dir)
    for i in range(n_train + n_val):
        split = "train" if i < n_train else "val"
        hazy, clear, _ = make_pair(seed + i, size)
        for kind, img in (("hazy", hazy), ("clear", clear)):
            d = out / split / kind
            d.mkdir(parents=True, exist_ok=True)
            encode_image(img, d / f"{i:04d}.{fmt}")
    return out


# -- quantisation --------------------------------------------------------------


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid (round half to even) and back to float32."""
    return to_uint8(img).astype(np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


# -- codecs --------------------------------------------------------------------


def decode_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM (P6) into an (H, W, 3) float32 array."""
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(PNG_SIGNATURE):
        pixels = _decode_png(raw)
    elif raw.startswith(b"P6"):
        pixels = _decode_ppm(raw)
    else:
        raise DecodeError(f"unsupported image format in {path}", 0)
    return pixels.astype(np.float32) / 255.0


def encode_image(img: np.ndarray, path) -> None:
    """Write (H, W, 3) or (H, W) data in [0, 1]; the suffix selects PNG or PPM."""
    path = Path(path)
    data = to_uint8(img)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        if data.ndim == 2:
            data = np.repeat(data[..., None], 3, axis=2)
        path.write_bytes(_encode_ppm(data))
    elif suffix == ".png":
        path.write_bytes(_encode_png(data))
    else:
        raise ValueError(f"unsupported output format {suffix!r}")


def _encode_ppm(data: np.ndarray) -> bytes:
    h, w, _ = data.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def _decode_ppm(raw: bytes) -> np.ndarray:
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DecodeError("malformed PPM header", pos)
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise DecodeError("malformed PPM header", pos)
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DecodeError(f"unsupported PPM maxval {maxval}", pos)
    need = w * h * 3
    if len(raw) - pos < need:
        raise DecodeError(f"truncated PPM payload: expected {need} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)


def _png_chunk(kind: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", zlib.crc32(kind + body) & 0xFFFFFFFF)


def _encode_png(data: np.ndarray) -> bytes:
    if data.ndim == 2:
        h, w = data.shape
        colour_type, channels = 0, 1
    else:
        h, w, channels = data.shape
        colour_type = 2
    rows = np.ascontiguousarray(data).reshape(h, w * channels)
    scan = np.concatenate([np.zeros((h, 1), dtype=np.uint8), rows], axis=1).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, 8, colour_type, 0, 0, 0)
    return (
        PNG_SIGNATURE
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(scan, 9))
        + _png_chunk(b"IEND", b"")
    )


_PNG_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


def _decode_png(raw: bytes) -> np.ndarray:
    pos = len(PNG_SIGNATURE)
    header = None
    idat = []
    while True:
        if pos + 8 > len(raw):
            raise DecodeError("truncated PNG: missing chunk header", pos)
        (length,) = struct.unpack_from(">I", raw, pos)
        kind = raw[pos + 4 : pos + 8]
        body_at = pos + 8
        if body_at + length + 4 > len(raw):
            raise DecodeError(f"truncated PNG chunk {kind!r}", pos)
        body = raw[body_at : body_at + length]
        (crc,) = struct.unpack_from(">I", raw, body_at + length)
        if zlib.crc32(kind + body) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch in chunk {kind!r}", body_at + length)
        if kind == b"IHDR":
            w, h, depth, colour_type, _, _, interlace = struct.unpack(">IIBBBBB", body)
            if depth != 8:
                raise DecodeError(f"unsupported PNG bit depth {depth}", body_at + 8)
            if colour_type not in _PNG_CHANNELS:
                raise DecodeError(f"unsupported PNG colour type {colour_type}", body_at + 9)
            if interlace != 0:
                raise DecodeError("unsupported PNG feature: interlacing", body_at + 12)
            header = (w, h, _PNG_CHANNELS[colour_type])
        elif kind == b"IDAT":
            idat.append(body)
        elif kind == b"IEND":
            break
        elif kind == b"PLTE" or not kind[0:1].islower():
            raise DecodeError(f"unsupported critical chunk {kind!r}", pos)
        pos = body_at + length + 4
    if header is None:
        raise DecodeError("PNG has no IHDR chunk", len(PNG_SIGNATURE))
    w, h, ch = header
    try:
        scan = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise DecodeError(f"corrupt PNG image data: {exc}", pos) from None
    stride = w * ch
    if len(scan) < h * (stride + 1):
        raise DecodeError("truncated PNG image data", pos)
    out = _unfilter(scan, h, stride, ch)
    img = out.reshape(h, w, ch)
    if ch == 1:
        img = np.repeat(img, 3, axis=2)
    elif ch == 2:
        img = np.repeat(img[..., :1], 3, axis=2)
    elif ch == 4:
        img = img[..., :3]
    return img


def _unfilter(scan: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    buf = np.frombuffer(scan, dtype=np.uint8)
    for y in range(h):
        row_at = y * (stride + 1)
        ftype = buf[row_at]
        line = buf[row_at + 1 : row_at + 1 + stride].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for x in range(bpp, stride):
                cur[x] = (cur[x] + cur[x - bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                cur[x] = (cur[x] + ((left + prev[x]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                b = prev[x]
                c = prev[x - bpp] if x >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                cur[x] = (cur[x] + pred) & 0xFF
        else:
            raise DecodeError(f"invalid PNG filter type {ftype} on row {y}", row_at)
        out[y] = cur
        prev = cur
    return out
