"""Dual-branch splice detector: compression branch + spatial adapter + fusion head."""

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import dctfeat, nncore as nn
from .imageops import resize
from .jpeg import decode_pixels, parse_coefficients

CHANNELS = (8, 16, 32, 32)
BRANCH_FEATURES = 16
FUSION_HIDDEN = 64
SPATIAL_SIZE = 64
PARAM_LIMIT = 100_000

CKPT_MAGIC = b"SPLC"
CKPT_VERSION = 1
EMBED_MAGIC = b"EMBD"

FEATURE_SPEC = (f"luma-ac-zigzag-1..{dctfeat.N_COEFFS}:"
                f"bins[{dctfeat.VALUE_MIN},{dctfeat.VALUE_MAX}]:clamp:zscore-per-sample")
FEATURE_SPEC_HASH = hashlib.sha256(FEATURE_SPEC.encode()).hexdigest()[:16]


class ConfigError(ValueError):
    pass


class LoadError(ValueError):
    pass


class MissingEmbedding(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    branch: str = "cnn"       # cnn | inn
    spatial: str = "none"     # none | tiny | embed
    embed_dim: int = 0

    def validate(self):
        if self.branch not in ("cnn", "inn"):
            raise ConfigError(f"unknown compression branch {self.branch!r}")
        if self.spatial not in ("none", "tiny", "embed"):
            raise ConfigError(f"unknown spatial adapter {self.spatial!r}")
        if self.spatial == "embed" and self.embed_dim < 1:
            raise ConfigError("embedding adapter needs embed_dim >= 1")
        if self.spatial != "embed" and self.embed_dim:
            raise ConfigError("embed_dim is only meaningful for the embedding adapter")


def compression_branch(variant, rng):
    """Four conv/involution stages (each BN, ReLU, 2x2 max pool) then linear -> 16.

    The 1x16x128 input is pooled down to 32x1x8 before the final linear.
    """
    layers = []
    c_in = 1
    for c_out in CHANNELS:
        if variant == "cnn":
            layers.append(nn.Conv2d(c_in, c_out, 3, 1, rng=rng))
        else:
            layers.append(nn.Conv2d(c_in, c_out, 1, 0, rng=rng))
            layers.append(nn.Involution2d(c_out, 3, 4, rng=rng))
        layers += [nn.BatchNorm(c_out), nn.ReLU(), nn.MaxPool2()]
        c_in = c_out
    h, w = dctfeat.FEATURE_SHAPE
    flat = CHANNELS[-1] * (h >> len(CHANNELS)) * (w >> len(CHANNELS))
    layers += [nn.Flatten(), nn.Linear(flat, BRANCH_FEATURES, rng=rng)]
    return nn.Sequential(layers)


def tiny_spatial_net(rng):
    """Three conv blocks on 3x64x64, global average pool, linear 16 -> 16."""
    layers = []
    c_in = 3
    for c_out in (8, 16, 16):
        layers += [nn.Conv2d(c_in, c_out, 3, 1, rng=rng), nn.BatchNorm(c_out),
                   nn.ReLU(), nn.MaxPool2()]
        c_in = c_out
    layers += [nn.GlobalAvgPool(), nn.Linear(c_in, BRANCH_FEATURES, rng=rng)]
    return nn.Sequential(layers)


def fusion_head(rng):
    return nn.Sequential([
        nn.Linear(2 * BRANCH_FEATURES, FUSION_HIDDEN, rng=rng),
        nn.BatchNorm(FUSION_HIDDEN), nn.ReLU(),
        nn.Linear(FUSION_HIDDEN, 2, rng=rng),
    ])


class SpliceModel:
    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.compression = compression_branch(config.branch, rng)
        if config.spatial == "tiny":
            self.spatial = tiny_spatial_net(rng)
        elif config.spatial == "embed":
            self.spatial = nn.Sequential([nn.Linear(config.embed_dim, BRANCH_FEATURES, rng=rng)])
        else:
            self.spatial = None
        self.head = fusion_head(rng)
        self.net = nn.Sequential([self.compression,
                                  self.spatial if self.spatial is not None else nn.Sequential([]),
                                  self.head])
        total = self.param_count()
        if total >= PARAM_LIMIT:
            raise ConfigError(f"{total} trainable parameters exceeds the {PARAM_LIMIT} budget")

    def named_tensors(self, kind="params"):
        return self.net.named_tensors(kind)

    def param_count(self):
        return self.net.param_count()

    def branch_param_counts(self):
        return {
            "compression": self.compression.param_count(),
            "spatial": self.spatial.param_count() if self.spatial is not None else 0,
            "fusion": self.head.param_count(),
        }

    def _check_features(self, features):
        f = np.asarray(features)
        if f.shape[-2:] != dctfeat.FEATURE_SHAPE:
            raise nn.ShapeMismatch(f"feature tensor must end in {dctfeat.FEATURE_SHAPE}, got {f.shape}")
        if f.ndim == 2:
            f = f[None, None]
        elif f.ndim == 3:
            f = f[:, None]
        elif f.ndim != 4 or f.shape[1] != 1:
            raise nn.ShapeMismatch(f"bad feature tensor shape {f.shape}")
        return f

    def forward(self, spatial_input, features, train=False):
        """Logits (N, 2); column 1 is the spliced class."""
        f = self._check_features(features).astype(self.dtype, copy=False)
        comp = self.compression.forward(f, train)
        n = comp.shape[0]
        if self.spatial is None:
            spat = np.zeros((n, BRANCH_FEATURES), dtype=comp.dtype)
        else:
            if spatial_input is None:
                raise nn.ShapeMismatch("this model needs a spatial input")
            s = np.asarray(spatial_input, dtype=self.dtype)
            if self.config.spatial == "embed" and s.ndim == 1:
                s = s[None]
            if self.config.spatial == "tiny" and s.ndim == 3:
                s = s[None]
            expected = ((self.config.embed_dim,) if self.config.spatial == "embed"
                        else (3, SPATIAL_SIZE, SPATIAL_SIZE))
            if s.shape[1:] != expected or s.shape[0] != n:
                raise nn.ShapeMismatch(f"spatial input must be (N,)+{expected}, got {s.shape}")
            spat = self.spatial.forward(s, train)
        return self.head.forward(np.concatenate([spat, comp], axis=1), train)

    def backward(self, dlogits):
        d = self.head.backward(dlogits)
        if self.spatial is not None:
            self.spatial.backward(np.ascontiguousarray(d[:, :BRANCH_FEATURES]))
        self.compression.backward(np.ascontiguousarray(d[:, BRANCH_FEATURES:]))

    @property
    def dtype(self):
        return self.head.layers[0].params["weight"].dtype

    def astype(self, dtype):
        self.net.astype(dtype)
        return self

    def params_and_grads(self):
        ps, gs = [], []
        for _, layer, key in self.named_tensors("params"):
            ps.append(layer.params[key])
            gs.append(layer.grads[key])
        return ps, gs


def build(config, seed=0):
    return SpliceModel(config, seed)


def param_count(model):
    return model.param_count()


def spatial_tensor(pixels):
    """Decoded pixels -> channel-wise standardized float32 (3, 64, 64)."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = np.repeat(px[..., None], 3, axis=2)
    small = resize(px, (SPATIAL_SIZE, SPATIAL_SIZE)).transpose(2, 0, 1)
    mean = small.mean(axis=(1, 2), keepdims=True)
    std = np.maximum(small.std(axis=(1, 2), keepdims=True), 1e-8)
    return ((small - mean) / std).astype(np.float32)


def predict(model, jpeg_bytes, embedding=None):
    """Classify one JPEG; returns {"label": "original"|"spliced", "p_spliced": float}."""
    coef = parse_coefficients(jpeg_bytes)
    feats = dctfeat.standardize(dctfeat.ac_histograms(coef))
    spatial = None
    if model.config.spatial == "tiny":
        spatial = spatial_tensor(decode_pixels(coef))[None]
    elif model.config.spatial == "embed":
        if embedding is None:
            raise MissingEmbedding("embedding adapter needs a sidecar embedding for this file")
        spatial = np.asarray(embedding, dtype=np.float32)[None]
    logits = model.forward(spatial, feats[None], train=False)
    p = float(nn.softmax(logits.astype(np.float64))[0, 1])
    return {"label": "spliced" if p > 0.5 else "original", "p_spliced": p}


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save(model, path, metadata=None):
    """Write a checkpoint.

    Layout (little-endian): ``SPLC``, uint32 version, length-prefixed JSON
    config, length-prefixed JSON training metadata, uint32 tensor count,
    then per tensor: kind byte (0 parameter, 1 BN running statistic),
    length-prefixed name, ndim byte, uint32 dims, float32 data.
    """
    config = dict(asdict(model.config), channels=list(CHANNELS),
                  feature_spec=FEATURE_SPEC, feature_spec_hash=FEATURE_SPEC_HASH,
                  init_seed=model.seed)
    tensors = ([(0, n, l.params[k]) for n, l, k in model.named_tensors("params")]
               + [(1, n, l.buffers[k]) for n, l, k in model.named_tensors("buffers")])
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             _pack_str(json.dumps(config, sort_keys=True)),
             _pack_str(json.dumps(metadata or {}, sort_keys=True)),
             struct.pack("<I", len(tensors))]
    for kind, name, arr in tensors:
        arr = np.asarray(arr, dtype="<f4")
        parts += [struct.pack("<B", kind), _pack_str(name), struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _unpack_str(data, pos):
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + n > len(data):
        raise LoadError("truncated checkpoint")
    return data[pos:pos + n].decode("utf-8"), pos + n


def load(path, with_metadata=False):
    """Read a checkpoint written by :func:`save`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise LoadError(f"{path}: bad checkpoint magic")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != CKPT_VERSION:
            raise LoadError(f"{path}: unsupported checkpoint version {version}")
        cfg_text, pos = _unpack_str(data, 8)
        meta_text, pos = _unpack_str(data, pos)
        cfg = json.loads(cfg_text)
        meta = json.loads(meta_text)
        if cfg.get("feature_spec_hash") != FEATURE_SPEC_HASH:
            raise LoadError(f"{path}: checkpoint was trained on a different feature layout")
        config = ModelConfig(cfg["branch"], cfg["spatial"], cfg["embed_dim"])
        model = SpliceModel(config, cfg.get("init_seed", 0))
        slots = {(0, n): (l.params, k) for n, l, k in model.named_tensors("params")}
        slots.update({(1, n): (l.buffers, k) for n, l, k in model.named_tensors("buffers")})
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if count != len(slots):
            raise LoadError(f"{path}: expected {len(slots)} tensors, found {count}")
        for _ in range(count):
            kind = data[pos]
            name, pos = _unpack_str(data, pos + 1)
            ndim = data[pos]
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(data):
                raise LoadError("truncated checkpoint")
            arr = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
            if (kind, name) not in slots:
                raise LoadError(f"{path}: unexpected tensor {name}")
            store, key = slots[(kind, name)]
            if store[key].shape != arr.shape:
                raise LoadError(f"{path}: shape mismatch for {name}")
            store[key] = arr
    except (struct.error, IndexError, KeyError, UnicodeDecodeError,
            json.JSONDecodeError, ConfigError) as exc:
        raise LoadError(f"{path}: corrupt checkpoint ({exc})") from exc
    return (model, meta) if with_metadata else model


def write_embeddings(path, embeddings):
    """Write an ``EMBD`` sidecar from a {path: vector} mapping."""
    embeddings = dict(embeddings)
    dims = {np.asarray(v).size for v in embeddings.values()}
    if len(dims) != 1:
        raise ValueError("all embeddings must share one dimension")
    (dim,) = dims
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC + struct.pack("<I", dim))
        for key, vec in embeddings.items():
            fh.write(_pack_str(str(key)))
            fh.write(np.asarray(vec, dtype="<f4").reshape(dim).tobytes())


def read_embeddings(path):
    """Read an ``EMBD`` sidecar; returns (dim, {path: float32 vector})."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != EMBED_MAGIC:
        raise ValueError(f"{path}: not an EMBD embedding file")
    (dim,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out = {}
    while pos < len(data):
        key, pos = _unpack_str(data, pos)
        if pos + 4 * dim > len(data):
            raise ValueError(f"{path}: truncated embedding record")
        out[key] = np.frombuffer(data, "<f4", dim, pos).astype(np.float32)
        pos += 4 * dim
    return dim, out


def lookup_embedding(table, path):
    """Find a file's embedding by exact path, then by basename."""
    if path in table:
        return table[path]
    base = os.path.basename(path)
    for key, vec in table.items():
        if os.path.basename(key) == base:
            return vec
    raise MissingEmbedding(f"no embedding for {path}")
