"""Compression-branch input: AC-coefficient histograms of the luma channel.

Rows are zig-zag positions 1..16 (the first sixteen AC terms), columns are
coefficient values -63..64. Values outside that range land in the edge
bins so every row still sums to the number of coded luma blocks.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .jpeg import parse_coefficients
from .jpeg.tables import ZIGZAG

N_COEFFS = 16
VALUE_MIN = -63
VALUE_MAX = 64
N_BINS = VALUE_MAX - VALUE_MIN + 1
FEATURE_SHAPE = (N_COEFFS, N_BINS)
STD_FLOOR = 1e-8

CACHE_MAGIC = b"DCTF"
CACHE_VERSION = 1


class EmptyImage(ValueError):
    pass


@dataclass
class CoefHistogram:
    counts: np.ndarray  # (16, 128) int64
    block_count: int

    def nonzero_bins(self):
        """Number of populated bins per row (a double-compression signature)."""
        return (self.counts > 0).sum(axis=1)


def ac_histograms(coef):
    """Histogram the first 16 AC coefficients (zig-zag order) of all luma blocks."""
    luma = coef.blocks[0]
    n = luma.shape[0] * luma.shape[1]
    if n == 0:
        raise EmptyImage("image has no luma blocks")
    flat = luma.reshape(n, 64)[:, ZIGZAG[1:N_COEFFS + 1]]
    bins = np.clip(flat, VALUE_MIN, VALUE_MAX) - VALUE_MIN
    counts = np.zeros(FEATURE_SHAPE, dtype=np.int64)
    rows = np.broadcast_to(np.arange(N_COEFFS), bins.shape)
    np.add.at(counts, (rows.ravel(), bins.ravel()), 1)
    return CoefHistogram(counts, n)


def standardize(hist):
    """Per-sample zero-mean / unit-std scaling over all 2048 entries (float32)."""
    x = np.asarray(hist.counts if isinstance(hist, CoefHistogram) else hist,
                   dtype=np.float64)
    std = max(x.std(), STD_FLOOR)
    return ((x - x.mean()) / std).astype(np.float32)


def extract_features(data):
    """JPEG bytes -> standardized 16x128 feature tensor. Never touches pixels."""
    return standardize(ac_histograms(parse_coefficients(data)))


def write_cache(path, features, labels, paths):
    """Write the binary feature cache.

    Layout (little-endian): magic ``DCTF``, uint32 version, uint32 count,
    then per sample a label byte (0 original / 1 spliced), 2048 float32
    values and a uint32-length-prefixed UTF-8 source path.
    """
    features = list(features)
    if not (len(features) == len(labels) == len(paths)):
        raise ValueError("features, labels and paths must have equal length")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, len(features)))
        for f, lab, p in zip(features, labels, paths):
            f = np.asarray(f, dtype="<f4")
            if f.shape != FEATURE_SHAPE:
                raise ValueError(f"feature shape {f.shape} != {FEATURE_SHAPE}")
            raw = str(p).encode("utf-8")
            fh.write(struct.pack("<B", int(lab)))
            fh.write(f.tobytes())
            fh.write(struct.pack("<I", len(raw)) + raw)


def read_cache(path):
    """Read a feature cache; returns (features (N,16,128) float32, labels, paths)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a DCTF feature cache")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    pos = 12
    feats = np.empty((count,) + FEATURE_SHAPE, dtype=np.float32)
    labels, paths = [], []
    nbytes = 4 * N_COEFFS * N_BINS
    try:
        for i in range(count):
            labels.append(data[pos])
            pos += 1
            feats[i] = np.frombuffer(data, "<f4", N_COEFFS * N_BINS, pos).reshape(FEATURE_SHAPE)
            pos += nbytes
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise ValueError("path runs past end of file")
            paths.append(data[pos:pos + n].decode("utf-8"))
            pos += n
    except (IndexError, struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated feature cache") from exc
    return feats, np.array(labels, dtype=np.int64), paths
