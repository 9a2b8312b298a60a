"""Pixel-domain helpers: resampling, enhancement blends and PNG mask I/O."""

import struct
import zlib

import numpy as np
from scipy import ndimage


def resize(img, size):
    """Resize (H, W[, C]) to ``size`` = (height, width).

    Integer downscales use block averaging; everything else is bilinear
    with pixel-centre alignment.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()
    if h % oh == 0 and w % ow == 0:
        fy, fx = h // oh, w // ow
        shape = (oh, fy, ow, fx) + img.shape[2:]
        return img.reshape(shape).mean(axis=(1, 3))
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _sample(img, yy, xx, mode="nearest")


def _sample(img, yy, xx, mode="constant"):
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode=mode)
    return np.stack([ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode=mode)
                     for c in range(img.shape[2])], axis=-1)


def scale_rotate(img, scale=1.0, angle_deg=0.0):
    """Bilinear scale + counter-clockwise rotation onto an expanded canvas.

    The output canvas is just large enough to hold the whole transformed
    input; samples from outside the input are 0.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if scale == 1.0 and angle_deg % 360 == 0:
        return img.copy()
    th = np.deg2rad(angle_deg)
    cos, sin = np.cos(th), np.sin(th)
    sh, sw = h * scale, w * scale
    oh = int(np.ceil(abs(sh * cos) + abs(sw * sin) - 1e-9))
    ow = int(np.ceil(abs(sw * cos) + abs(sh * sin) - 1e-9))
    oh, ow = max(oh, 1), max(ow, 1)
    yy, xx = np.meshgrid(np.arange(oh) + 0.5 - oh / 2, np.arange(ow) + 0.5 - ow / 2,
                         indexing="ij")
    # inverse map: rotate back by -angle, then unscale
    src_x = (cos * xx - sin * yy) / scale + w / 2 - 0.5
    src_y = (sin * xx + cos * yy) / scale + h / 2 - 0.5
    return _sample(img, src_y, src_x)


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13


def smooth3(img):
    """Centre-weighted 3x3 smoothing; the one-pixel border is left as is."""
    img = np.asarray(img, dtype=np.float64)
    kernel = _SMOOTH.reshape((3, 3) + (1,) * (img.ndim - 2))
    out = img.copy()
    if img.shape[0] > 2 and img.shape[1] > 2:
        out[1:-1, 1:-1] = ndimage.correlate(img, kernel, mode="nearest")[1:-1, 1:-1]
    return out


def blend(a, b, factor):
    """a + factor * (b - a): factor 0 gives a, 1 gives b."""
    return a + factor * (b - a)


def luminance(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def _png_chunk(tag, payload):
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png_gray(path, img):
    """Write a uint8 (H, W) array as an 8-bit grayscale PNG."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))
    data = (b"\x89PNG\r\n\x1a\n"
            + _png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
            + _png_chunk(b"IDAT", zlib.compress(raw, 9))
            + _png_chunk(b"IEND", b""))
    with open(path, "wb") as fh:
        fh.write(data)


def read_png_gray(path):
    """Read an 8-bit grayscale, non-interlaced PNG (as written by write_png_gray)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError(f"{path}: not a PNG file")
    pos = 8
    idat = b""
    w = h = None
    while pos < len(data):
        (n,) = struct.unpack_from(">I", data, pos)
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + n]
        pos += 12 + n
        if tag == b"IHDR":
            w, h, depth, ctype, _, _, interlace = struct.unpack(">IIBBBBB", payload)
            if depth != 8 or ctype != 0 or interlace:
                raise ValueError(f"{path}: only 8-bit grayscale PNG is supported")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    raw = np.frombuffer(zlib.decompress(idat), dtype=np.uint8).reshape(h, w + 1)
    out = np.zeros((h, w), dtype=np.int32)
    prev = np.zeros(w, dtype=np.int32)
    for r in range(h):
        ftype, line = raw[r, 0], raw[r, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 1:
            cur = np.zeros(w, dtype=np.int32)
            for x in range(w):
                cur[x] = (line[x] + (cur[x - 1] if x else 0)) & 0xFF
        else:
            raise ValueError(f"{path}: unsupported PNG filter {ftype}")
        out[r] = cur
        prev = cur
    return out.astype(np.uint8)
