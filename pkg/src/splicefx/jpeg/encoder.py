"""Baseline JPEG encoding with IJG quality scaling and the Annex K Huffman tables."""

import struct

import numpy as np

from . import tables as T
from .decoder import decode_pixels, parse_coefficients
from .model import ComponentSpec, RangeError, empty_like_layout

SUBSAMPLING_MODES = ("4:4:4", "4:2:0")


def quality_to_tables(qf):
    """IJG quality scaling of the Annex K tables; returns (luma, chroma) 8x8 arrays."""
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= qf <= 100:
        raise RangeError(f"quality factor must be an integer in [1, 100], got {qf!r}")
    qf = int(qf)
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    out = []
    for base in (T.LUMA_QUANT_BASE, T.CHROMA_QUANT_BASE):
        q = (base * scale + 50) // 100
        out.append(np.clip(q, 1, 255).astype(np.int32))
    return out[0], out[1]


def rgb_to_ycc(rgb):
    rgb = rgb.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168735892 * r - 0.331264108 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418687589 * g - 0.081312411 * b + 128.0
    return y, cb, cr


def _as_pixels(img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        if np.issubdtype(img.dtype, np.floating):
            img = np.rint(img)
        img = np.clip(img, 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) pixels, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1 or max(img.shape[:2]) > 65535:
        raise ValueError(f"unsupported image size {img.shape[:2]}")
    return img


def _fdct_quantize(plane, qtable):
    rows, cols = plane.shape[0] // 8, plane.shape[1] // 8
    blocks = (plane - 128.0).reshape(rows, 8, cols, 8).transpose(0, 2, 1, 3)
    coef = np.einsum("ij,rcjk,lk->rcil", T.DCT, blocks, T.DCT, optimize=True)
    q = coef / qtable
    return (np.sign(q) * np.floor(np.abs(q) + 0.5)).astype(np.int32)


def forward_transform(img, qf=75, subsampling="4:2:0"):
    """Colour convert, subsample, pad, FDCT and quantize a pixel image.

    Returns the :class:`CoefficientImage` that :func:`encode` entropy-codes.
    """
    if subsampling not in SUBSAMPLING_MODES:
        raise ValueError(f"subsampling must be one of {SUBSAMPLING_MODES}")
    luma_q, chroma_q = quality_to_tables(qf)
    img = _as_pixels(img)
    h, w = img.shape[:2]
    if img.ndim == 2:
        comps = [ComponentSpec(1, 1, 1, 0)]
        planes = [img.astype(np.float64)]
        quant = {0: luma_q}
    else:
        f = 2 if subsampling == "4:2:0" else 1
        comps = [ComponentSpec(1, f, f, 0), ComponentSpec(2, 1, 1, 1),
                 ComponentSpec(3, 1, 1, 1)]
        planes = list(rgb_to_ycc(img))
        quant = {0: luma_q, 1: chroma_q}
    coef = empty_like_layout(w, h, comps, quant)
    mcu_w, mcu_h = 8 * coef.h_max, 8 * coef.v_max
    pad_h, pad_w = -(-h // mcu_h) * mcu_h, -(-w // mcu_w) * mcu_w
    for i, plane in enumerate(planes):
        plane = np.pad(plane, ((0, pad_h - h), (0, pad_w - w)), mode="edge")
        fx = coef.h_max // comps[i].h_sampling
        fy = coef.v_max // comps[i].v_sampling
        if fx > 1 or fy > 1:
            plane = plane.reshape(pad_h // fy, fy, pad_w // fx, fx).mean(axis=(1, 3))
        coef.blocks[i] = _fdct_quantize(plane, quant[comps[i].quant_table_id])
    return coef


class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.n = 0

    def write(self, bits, length):
        self.acc = (self.acc << length) | bits
        self.n += length
        if self.n >= 48:
            self._drain()

    def _drain(self):
        k = self.n >> 3
        rem = self.n - 8 * k
        self.out += (self.acc >> rem).to_bytes(k, "big")
        self.acc &= (1 << rem) - 1
        self.n = rem

    def finish(self):
        pad = (-self.n) % 8
        if pad:
            self.write((1 << pad) - 1, pad)
        self._drain()
        return bytes(self.out).replace(b"\xff", b"\xff\x00")


def _entropy_code(coef, huff):
    """Huffman-code every block of an interleaved single scan."""
    zz = []
    for b in coef.blocks:
        rows, cols = b.shape[:2]
        zz.append(b.reshape(rows * cols, 64)[:, T.ZIGZAG].tolist())
    order = []
    if len(coef.components) == 1:
        order = [(0, i) for i in range(len(zz[0]))]
    else:
        mcu_rows = coef.blocks[0].shape[0] // coef.components[0].v_sampling
        mcu_cols = coef.blocks[0].shape[1] // coef.components[0].h_sampling
        for my in range(mcu_rows):
            for mx in range(mcu_cols):
                for ci, comp in enumerate(coef.components):
                    cols = coef.blocks[ci].shape[1]
                    for v in range(comp.v_sampling):
                        for h in range(comp.h_sampling):
                            order.append((ci, (my * comp.v_sampling + v) * cols
                                          + mx * comp.h_sampling + h))
    bw = _BitWriter()
    write = bw.write
    pred = [0] * len(zz)
    for ci, bi in order:
        dc_codes, ac_codes = huff[ci]
        block = zz[ci][bi]
        diff = block[0] - pred[ci]
        pred[ci] = block[0]
        s = abs(diff).bit_length()
        code, length = dc_codes[s]
        if s:
            write((code << s) | (diff if diff > 0 else diff + (1 << s) - 1), length + s)
        else:
            write(code, length)
        run = 0
        for k in range(1, 64):
            v = block[k]
            if not v:
                run += 1
                continue
            while run > 15:
                code, length = ac_codes[0xF0]
                write(code, length)
                run -= 16
            s = abs(v).bit_length()
            code, length = ac_codes[(run << 4) | s]
            write((code << s) | (v if v > 0 else v + (1 << s) - 1), length + s)
            run = 0
        if run:
            code, length = ac_codes[0x00]
            write(code, length)
    return bw.finish()


def _segment(marker, payload):
    return struct.pack(">BBH", 0xFF, marker, len(payload) + 2) + payload


def write_jpeg(coef):
    """Serialize a :class:`CoefficientImage` as a baseline JFIF stream.

    Uses the Annex K Huffman tables: luma tables for component 0, chroma
    tables for the others.
    """
    parts = [b"\xff\xd8",
             _segment(0xE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00")]
    for tid in sorted(coef.quant_tables):
        q = np.asarray(coef.quant_tables[tid]).reshape(64)[T.ZIGZAG]
        if q.min() < 1 or q.max() > 255:
            raise RangeError("quantization entries must be in [1, 255]")
        parts.append(_segment(0xDB, bytes([tid]) + bytes(q.astype(np.uint8))))
    sof = struct.pack(">BHHB", 8, coef.height, coef.width, len(coef.components))
    for c in coef.components:
        sof += bytes([c.component_id, (c.h_sampling << 4) | c.v_sampling, c.quant_table_id])
    parts.append(_segment(0xC0, sof))
    specs = [(0x00, T.DC_LUMA_BITS, T.DC_LUMA_VALUES),
             (0x10, T.AC_LUMA_BITS, T.AC_LUMA_VALUES)]
    if len(coef.components) > 1:
        specs += [(0x01, T.DC_CHROMA_BITS, T.DC_CHROMA_VALUES),
                  (0x11, T.AC_CHROMA_BITS, T.AC_CHROMA_VALUES)]
    for tcth, bits, values in specs:
        parts.append(_segment(0xC4, bytes([tcth]) + bytes(bits) + bytes(values)))
    sos = bytes([len(coef.components)])
    for i, c in enumerate(coef.components):
        sos += bytes([c.component_id, 0x00 if i == 0 else 0x11])
    parts.append(_segment(0xDA, sos + b"\x00\x3f\x00"))
    luma = (T.huffman_codes(T.DC_LUMA_BITS, T.DC_LUMA_VALUES),
            T.huffman_codes(T.AC_LUMA_BITS, T.AC_LUMA_VALUES))
    chroma = (T.huffman_codes(T.DC_CHROMA_BITS, T.DC_CHROMA_VALUES),
              T.huffman_codes(T.AC_CHROMA_BITS, T.AC_CHROMA_VALUES))
    huff = [luma] + [chroma] * (len(coef.components) - 1)
    parts.append(_entropy_code(coef, huff))
    parts.append(b"\xff\xd9")
    return b"".join(parts)


def encode(img, qf=75, subsampling="4:2:0"):
    """Encode pixels (uint8 (H, W) or (H, W, 3)) as baseline JPEG bytes."""
    return write_jpeg(forward_transform(img, qf, subsampling))


def recompress(data, qf2):
    """Decode a JPEG stream and encode the pixels again at ``qf2``.

    Colour streams keep 4:4:4 if they were coded that way and are otherwise
    written as 4:2:0.
    """
    quality_to_tables(qf2)
    coef = parse_coefficients(data)
    mode = "4:4:4" if coef.subsampling == "4:4:4" else "4:2:0"
    return encode(decode_pixels(coef), qf2, mode)
