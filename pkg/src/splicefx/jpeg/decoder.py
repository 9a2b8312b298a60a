"""Baseline JPEG parsing down to quantized DCT coefficients, plus pixel decoding.

The parser stops at the quantized coefficients: no dequantization and no
IDCT happen in :func:`parse_coefficients`. :func:`decode_pixels` then
reconstructs RGB / grayscale samples in the same way libjpeg does by
default (integer-rounded IDCT output, "fancy" triangular chroma
upsampling, fixed-point BT.601 colour conversion), which keeps it within a
couple of levels of the usual reference decoders.
"""

import re
import struct

import numpy as np

from .model import (CoefficientImage, ComponentSpec, CorruptStream,
                    UnsupportedFormat, empty_like_layout)
from .tables import DCT, NATURAL_TO_ZIGZAG, ZIGZAG

_UNSUPPORTED_SOF = {
    0xC2: "progressive DCT (SOF2)",
    0xC3: "lossless (SOF3)",
    0xC5: "differential sequential (SOF5)",
    0xC6: "differential progressive (SOF6)",
    0xC7: "differential lossless (SOF7)",
    0xC9: "arithmetic coding (SOF9)",
    0xCA: "arithmetic progressive (SOF10)",
    0xCB: "arithmetic lossless (SOF11)",
    0xCD: "arithmetic differential (SOF13)",
    0xCE: "arithmetic differential progressive (SOF14)",
    0xCF: "arithmetic differential lossless (SOF15)",
}

_MARKER_RE = re.compile(rb"\xff[^\x00\xd0-\xd7\xff]")
_RST_RE = re.compile(rb"\xff+[\xd0-\xd7]")


def _build_lookup(bits, values):
    """65536-entry prefix table: entry = (code_length << 8) | symbol, 0 = invalid."""
    lut = np.zeros(1 << 16, dtype=np.int32)
    code = 0
    k = 0
    for length in range(1, 17):
        for _ in range(bits[length - 1]):
            if code >= (1 << length):
                raise CorruptStream("over-subscribed Huffman table")
            start = code << (16 - length)
            lut[start:start + (1 << (16 - length))] = (length << 8) | values[k]
            code += 1
            k += 1
        code <<= 1
    return lut.tolist()


def _read_segment(data, pos):
    if pos + 2 > len(data):
        raise CorruptStream("truncated marker segment")
    (length,) = struct.unpack_from(">H", data, pos)
    if length < 2 or pos + length > len(data):
        raise CorruptStream("truncated marker segment")
    return data[pos + 2:pos + length], pos + length


def _parse_dqt(seg, tables):
    i = 0
    while i < len(seg):
        pq, tq = seg[i] >> 4, seg[i] & 15
        i += 1
        if tq > 3 or pq > 1:
            raise CorruptStream("bad DQT header")
        n = 128 if pq else 64
        if i + n > len(seg):
            raise CorruptStream("truncated DQT")
        if pq:
            zz = np.frombuffer(seg[i:i + n], dtype=">u2").astype(np.int32)
        else:
            zz = np.frombuffer(seg[i:i + n], dtype=np.uint8).astype(np.int32)
        i += n
        natural = np.empty(64, dtype=np.int32)
        natural[ZIGZAG] = zz
        tables[tq] = natural.reshape(8, 8)


def _parse_dht(seg, huff):
    i = 0
    while i < len(seg):
        if i + 17 > len(seg):
            raise CorruptStream("truncated DHT")
        tc, th = seg[i] >> 4, seg[i] & 15
        if tc > 1 or th > 3:
            raise CorruptStream("bad DHT header")
        bits = tuple(seg[i + 1:i + 17])
        total = sum(bits)
        i += 17
        if total > 256 or i + total > len(seg):
            raise CorruptStream("truncated DHT")
        values = tuple(seg[i:i + total])
        i += total
        huff[(tc, th)] = _build_lookup(bits, values)


def _parse_sof(seg, marker):
    if len(seg) < 6:
        raise CorruptStream("truncated SOF")
    precision, height, width, ncomp = struct.unpack_from(">BHHB", seg, 0)
    if precision != 8:
        raise UnsupportedFormat(f"{precision}-bit sample precision")
    if ncomp == 0 or ncomp > 4:
        raise UnsupportedFormat(f"{ncomp} components")
    if ncomp == 2:
        raise UnsupportedFormat("two-component frames")
    if width == 0 or height == 0:
        raise UnsupportedFormat("zero image dimension (DNL not supported)")
    if len(seg) < 6 + 3 * ncomp:
        raise CorruptStream("truncated SOF")
    comps = []
    for k in range(ncomp):
        cid, hv, tq = seg[6 + 3 * k:9 + 3 * k]
        h, v = hv >> 4, hv & 15
        if not (1 <= h <= 4 and 1 <= v <= 4) or tq > 3:
            raise CorruptStream("bad component specification")
        comps.append(ComponentSpec(cid, h, v, tq))
    return width, height, comps


def _scan_end(data, pos):
    """Offset of the first non-RST marker after entropy data starting at ``pos``."""
    m = _MARKER_RE.search(data, pos)
    if m is None:
        raise CorruptStream("entropy-coded data not terminated by a marker")
    return m.start()


def _scan_order(img, scan_comps):
    """(component index, flat block index) for every block, in coding order,
    grouped by MCU."""
    if len(scan_comps) == 1:
        ci = scan_comps[0]
        w, h = img.component_size(ci)
        rows, cols = -(-h // 8), -(-w // 8)
        grid_cols = img.blocks[ci].shape[1]
        r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        flat = (r * grid_cols + c).ravel()
        return [[(ci, int(b))] for b in flat]
    mcu_rows = -(-img.height // (8 * img.v_max))
    mcu_cols = -(-img.width // (8 * img.h_max))
    mcus = []
    for my in range(mcu_rows):
        for mx in range(mcu_cols):
            mcu = []
            for ci in scan_comps:
                comp = img.components[ci]
                cols = img.blocks[ci].shape[1]
                for v in range(comp.v_sampling):
                    for h in range(comp.h_sampling):
                        mcu.append((ci, (my * comp.v_sampling + v) * cols
                                    + mx * comp.h_sampling + h))
            mcus.append(mcu)
    return mcus


def _decode_interval(buf, nbits, mcus, tables, zz_store):
    """Huffman-decode one restart interval into ``zz_store`` (flat zig-zag lists)."""
    pred = {}
    p = 0
    from_bytes = int.from_bytes
    for mcu in mcus:
        for ci, b in mcu:
            dc_lut, ac_lut = tables[ci]
            out = zz_store[ci]
            base = b * 64
            q = p >> 3
            word = from_bytes(buf[q:q + 4], "big")
            e = dc_lut[(word >> (16 - (p & 7))) & 0xFFFF]
            if not e:
                raise CorruptStream("invalid Huffman code")
            p += e >> 8
            s = e & 0xFF
            if s:
                if s > 11:
                    raise CorruptStream("DC category out of range")
                q = p >> 3
                word = from_bytes(buf[q:q + 4], "big")
                v = (word >> (32 - (p & 7) - s)) & ((1 << s) - 1)
                if v < (1 << (s - 1)):
                    v -= (1 << s) - 1
                p += s
            else:
                v = 0
            dc = pred.get(ci, 0) + v
            pred[ci] = dc
            out[base] = dc
            k = 1
            while k < 64:
                q = p >> 3
                word = from_bytes(buf[q:q + 4], "big")
                e = ac_lut[(word >> (16 - (p & 7))) & 0xFFFF]
                if not e:
                    raise CorruptStream("invalid Huffman code")
                p += e >> 8
                rs = e & 0xFF
                s = rs & 15
                if s:
                    k += rs >> 4
                    if k > 63:
                        raise CorruptStream("AC run past end of block")
                    q = p >> 3
                    word = from_bytes(buf[q:q + 4], "big")
                    v = (word >> (32 - (p & 7) - s)) & ((1 << s) - 1)
                    if v < (1 << (s - 1)):
                        v -= (1 << s) - 1
                    p += s
                    out[base + k] = v
                    k += 1
                elif rs == 0xF0:
                    k += 16
                    if k > 64:
                        raise CorruptStream("AC run past end of block")
                else:
                    break
    if p > nbits:
        raise CorruptStream("truncated entropy-coded data")


def _decode_scan(data, pos, img, seg, huff, zz_store):
    ns = seg[0]
    if ns < 1 or ns > 4 or len(seg) < 4 + 2 * ns:
        raise CorruptStream("bad SOS header")
    ids = {c.component_id: i for i, c in enumerate(img.components)}
    scan_comps = []
    tables = {}
    for k in range(ns):
        cid, tdta = seg[1 + 2 * k], seg[2 + 2 * k]
        if cid not in ids:
            raise CorruptStream(f"scan references unknown component {cid}")
        ci = ids[cid]
        td, ta = tdta >> 4, tdta & 15
        if (0, td) not in huff or (1, ta) not in huff:
            raise CorruptStream("scan references undefined Huffman table")
        scan_comps.append(ci)
        tables[ci] = (huff[(0, td)], huff[(1, ta)])
    ss, se, ahal = seg[1 + 2 * ns:4 + 2 * ns]
    if ss != 0 or se != 63 or ahal != 0:
        raise UnsupportedFormat("spectral selection / successive approximation")
    if len(scan_comps) > 1:
        units = sum(img.components[ci].h_sampling * img.components[ci].v_sampling
                    for ci in scan_comps)
        if units > 10:
            raise CorruptStream("too many blocks per MCU")

    end = _scan_end(data, pos)
    entropy = data[pos:end]
    mcus = _scan_order(img, scan_comps)
    ri = img.restart_interval
    chunks = _RST_RE.split(entropy) if ri else [entropy]
    step = ri if ri else len(mcus)
    expected = -(-len(mcus) // step) if mcus else 0
    if len(chunks) < expected:
        raise CorruptStream("truncated entropy-coded data (missing restart intervals)")
    for n in range(expected):
        raw = chunks[n].replace(b"\xff\x00", b"\xff")
        _decode_interval(raw + b"\x00\x00\x00\x00\x00", len(raw) * 8,
                         mcus[n * step:(n + 1) * step], tables, zz_store)
    return end


def parse_coefficients(data):
    """Entropy-decode a baseline JPEG stream into a :class:`CoefficientImage`.

    Raises :class:`UnsupportedFormat` for progressive, arithmetic-coded,
    lossless or non-8-bit streams and :class:`CorruptStream` for malformed
    marker sequences, truncated data or invalid Huffman codes.
    """
    data = bytes(data)
    if data[:2] != b"\xff\xd8":
        raise CorruptStream("missing SOI marker")
    pos = 2
    quant = {}
    huff = {}
    restart_interval = 0
    img = None
    zz_store = None
    seen_scan = False
    while True:
        if pos >= len(data):
            raise CorruptStream("missing EOI marker")
        if data[pos] != 0xFF:
            raise CorruptStream(f"expected marker at offset {pos}")
        while pos < len(data) and data[pos] == 0xFF:
            pos += 1
        if pos >= len(data):
            raise CorruptStream("missing EOI marker")
        marker = data[pos]
        pos += 1
        if marker == 0xD9:
            break
        if marker == 0x01 or 0xD0 <= marker <= 0xD7:
            continue
        if marker in _UNSUPPORTED_SOF:
            raise UnsupportedFormat(_UNSUPPORTED_SOF[marker])
        if marker == 0xCC:
            raise UnsupportedFormat("arithmetic coding (DAC)")
        seg, pos = _read_segment(data, pos)
        if marker == 0xDB:
            _parse_dqt(seg, quant)
        elif marker == 0xC4:
            _parse_dht(seg, huff)
        elif marker == 0xDD:
            if len(seg) != 2:
                raise CorruptStream("bad DRI segment")
            (restart_interval,) = struct.unpack(">H", seg)
            if img is not None:
                img.restart_interval = restart_interval
        elif marker in (0xC0, 0xC1):
            if img is not None:
                raise CorruptStream("multiple frames")
            width, height, comps = _parse_sof(seg, marker)
            img = empty_like_layout(width, height, comps, {})
            img.restart_interval = restart_interval
            zz_store = [[0] * (b.shape[0] * b.shape[1] * 64) for b in img.blocks]
        elif marker == 0xDA:
            if img is None:
                raise CorruptStream("SOS before SOF")
            pos = _decode_scan(data, pos, img, seg, huff, zz_store)
            seen_scan = True
        elif 0xC0 <= marker <= 0xCF or marker in (0xDC, 0xDE, 0xDF):
            raise UnsupportedFormat(f"marker 0x{marker:02X}")
        # APPn, COM and other segments are skipped.
    if img is None or not seen_scan:
        raise CorruptStream("no frame / scan data")
    for i, comp in enumerate(img.components):
        if comp.quant_table_id not in quant:
            raise CorruptStream(f"undefined quantization table {comp.quant_table_id}")
        img.quant_tables[comp.quant_table_id] = quant[comp.quant_table_id]
        rows, cols = img.blocks[i].shape[:2]
        zz = np.asarray(zz_store[i], dtype=np.int32).reshape(rows, cols, 64)
        img.blocks[i] = zz[..., NATURAL_TO_ZIGZAG].reshape(rows, cols, 8, 8)
    return img


def _idct_plane(blocks, qtable):
    rows, cols = blocks.shape[:2]
    coef = blocks.astype(np.float64) * qtable
    pix = np.einsum("ji,rcjk,kl->rcil", DCT, coef, DCT, optimize=True)
    pix = np.clip(np.rint(pix + 128.0), 0, 255).astype(np.int32)
    return pix.transpose(0, 2, 1, 3).reshape(rows * 8, cols * 8)


def _fancy_h2(plane):
    """libjpeg h2v1 triangular upsampling along columns."""
    left = np.concatenate([plane[:, :1], plane[:, :-1]], axis=1)
    right = np.concatenate([plane[:, 1:], plane[:, -1:]], axis=1)
    out = np.empty((plane.shape[0], plane.shape[1] * 2), dtype=np.int32)
    out[:, 0::2] = (3 * plane + left + 1) >> 2
    out[:, 1::2] = (3 * plane + right + 2) >> 2
    return out


def _fancy_h2v2(plane):
    """libjpeg h2v2 triangular upsampling (vertical 3:1 then horizontal 3:1)."""
    above = np.concatenate([plane[:1], plane[:-1]], axis=0)
    below = np.concatenate([plane[1:], plane[-1:]], axis=0)
    out = np.empty((plane.shape[0] * 2, plane.shape[1] * 2), dtype=np.int32)
    for dst, nb in ((0, above), (1, below)):
        cs = 3 * plane + nb
        if cs.shape[1] == 1:
            out[dst::2, 0::2] = (4 * cs + 8) >> 4
            out[dst::2, 1::2] = (4 * cs + 7) >> 4
            continue
        left = np.concatenate([cs[:, :1], cs[:, :-1]], axis=1)
        right = np.concatenate([cs[:, 1:], cs[:, -1:]], axis=1)
        out[dst::2, 0::2] = (3 * cs + left + 8) >> 4
        out[dst::2, 1::2] = (3 * cs + right + 7) >> 4
    return out


def _upsample(plane, fx, fy):
    if (fx, fy) == (1, 1):
        return plane
    if (fx, fy) == (2, 2) and plane.shape[1] > 1:
        return _fancy_h2v2(plane)
    if (fx, fy) == (2, 1) and plane.shape[1] > 1:
        return _fancy_h2(plane)
    return np.repeat(np.repeat(plane, fy, axis=0), fx, axis=1)


def _fix(x):
    return int(x * 65536 + 0.5)


_ONE_HALF = 1 << 15
_CR_R = _fix(1.40200)
_CB_B = _fix(1.77200)
_CB_G = _fix(0.34414)
_CR_G = _fix(0.71414)


def ycc_to_rgb(y, cb, cr):
    """Fixed-point BT.601 (JFIF) YCbCr -> RGB, as in libjpeg's jdcolor."""
    cb = cb - 128
    cr = cr - 128
    r = y + ((_CR_R * cr + _ONE_HALF) >> 16)
    g = y + ((-_CB_G * cb - _CR_G * cr + _ONE_HALF) >> 16)
    b = y + ((_CB_B * cb + _ONE_HALF) >> 16)
    return np.clip(np.stack([r, g, b], axis=-1), 0, 255).astype(np.uint8)


def decode_pixels(coef):
    """Reconstruct pixels from a :class:`CoefficientImage`.

    Returns a uint8 array of shape (H, W, 3) for colour streams or (H, W)
    for single-component streams.
    """
    planes = []
    for i in range(len(coef.components)):
        plane = _idct_plane(coef.blocks[i], coef.quant_table(i))
        w, h = coef.component_size(i)
        plane = plane[:h, :w]
        comp = coef.components[i]
        plane = _upsample(plane, coef.h_max // comp.h_sampling,
                          coef.v_max // comp.v_sampling)
        planes.append(plane[:coef.height, :coef.width])
    if len(planes) == 1:
        return planes[0].astype(np.uint8)
    if len(planes) == 4:
        raise UnsupportedFormat("CMYK/YCCK colour conversion")
    return ycc_to_rgb(*planes[:3])
