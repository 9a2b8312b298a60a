"""Training, cross-validation and evaluation of splice detectors."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dctfeat, metrics, nncore as nn
from .jpeg import decode_pixels, parse_coefficients
from .model import (ModelConfig, build, lookup_embedding, read_embeddings,
                    spatial_tensor)
from .splicegen import read_manifest, worker_count

log = logging.getLogger(__name__)

# Hyperparameter presets per backbone and branch:
# (epochs, batch size, initial LR, decay factor, decay step in epochs)
PRESETS = {
    "vgg-cnn": (30, 256, 0.001, 0.5, 1),
    "vgg-inn": (30, 256, 0.01, 0.9, 1),
    "resnet-cnn": (30, 256, 0.001, 0.5, 2),
    "resnet-inn": (30, 256, 0.01, 0.9, 1),
    "googlenet-cnn": (30, 256, 0.001, 0.5, 2),
    "googlenet-inn": (30, 256, 0.01, 0.9, 1),
    "densenet-cnn": (30, 256, 0.001, 0.5, 2),
    "densenet-inn": (30, 256, 0.01, 0.5, 2),
    "vit-cnn": (30, 576, 0.001, 0.5, 1),
    "vit-inn": (30, 256, 0.01, 0.9, 1),
}


class TooSmall(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    initial_lr: float = 0.001
    lr_decay_factor: float = 0.5
    lr_step_epochs: int = 2
    seed: int = 0
    folds: int = 5
    branch: str = "cnn"
    spatial: str = "none"
    augment: bool = True
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch norm)")

    @classmethod
    def from_preset(cls, row, **overrides):
        epochs, batch, lr, decay, step = PRESETS[row]
        kw = dict(epochs=epochs, batch_size=batch, initial_lr=lr, lr_decay_factor=decay,
                  lr_step_epochs=step)
        kw.update(overrides)
        return cls(**kw)

    @property
    def schedule(self):
        return nn.StepLrSchedule(self.initial_lr, self.lr_decay_factor, self.lr_step_epochs)


@dataclass
class Dataset:
    features: np.ndarray          # (N, 16, 128) float32
    labels: np.ndarray            # (N,) 0 original / 1 spliced
    paths: list
    spatial: np.ndarray = None    # (N, 3, 64, 64) or (N, D) depending on adapter
    embed_dim: int = 0

    def __len__(self):
        return len(self.labels)


def _load_one(args):
    path, want_pixels = args
    coef = parse_coefficients(Path(path).read_bytes())
    feats = dctfeat.standardize(dctfeat.ac_histograms(coef))
    spatial = spatial_tensor(decode_pixels(coef)) if want_pixels else None
    return feats, spatial


def load_dataset(manifest_path, spatial="none", embeddings=None, workers=None):
    """Read a manifest and compute features (and spatial inputs) for every row.

    Compression features come from the stored file bytes only, once.
    ``embeddings`` is an EMBD sidecar path, needed when ``spatial == "embed"``.
    """
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    root = manifest_path.parent
    paths = [str(root / r["name"]) for r in rows]
    labels = np.array([1 if r["label"] == "spliced" else 0 for r in rows], dtype=np.int64)
    jobs = [(p, spatial == "tiny") for p in paths]
    workers = workers or worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_load_one, jobs, chunksize=8))
    else:
        results = [_load_one(j) for j in jobs]
    feats = np.stack([f for f, _ in results]).astype(np.float32)
    data = Dataset(feats, labels, [r["name"] for r in rows])
    if spatial == "tiny":
        data.spatial = np.stack([s for _, s in results])
    elif spatial == "embed":
        if embeddings is None:
            raise ValueError("the embedding adapter needs an EMBD sidecar file")
        dim, table = read_embeddings(embeddings)
        data.spatial = np.stack([lookup_embedding(table, p) for p in data.paths])
        data.embed_dim = dim
    return data


@dataclass
class SplitSpec:
    test: np.ndarray
    folds: list

    def pool(self):
        return np.sort(np.concatenate(self.folds))

    def fold_split(self, k):
        """(train indices, validation indices) for fold ``k``."""
        val = self.folds[k]
        train = np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != k]))
        return train, val


def split(labels, seed, test_fraction=0.1, folds=5):
    """Stratified test hold-out, then stratified k folds over the remainder."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    test, fold_parts = [], [[] for _ in range(folds)]
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(idx.size * test_fraction))
        if n_test < 2 or (idx.size - n_test) < 2 * folds:
            raise TooSmall(f"class {cls} has {idx.size} samples; too few for a "
                           f"{test_fraction:.0%} test split and {folds} folds")
        test.append(idx[:n_test])
        for j, i in enumerate(idx[n_test:]):
            fold_parts[j % folds].append(i)
    return SplitSpec(np.sort(np.concatenate(test)),
                     [np.sort(np.array(f, dtype=np.int64)) for f in fold_parts])


def augment_with(img, hflip=False, vflip=False, angle=0.0):
    """Apply explicit flips and a rotation (degrees, same canvas, zero fill) to (C, H, W)."""
    out = img
    if hflip:
        out = out[:, :, ::-1]
    if vflip:
        out = out[:, ::-1, :]
    if angle:
        out = ndimage.rotate(out, angle, axes=(2, 1), reshape=False, order=1,
                             mode="constant", cval=0.0)
    return np.ascontiguousarray(out, dtype=img.dtype)


def augment(img, rng, enabled=True):
    """Random horizontal flip, vertical flip and rotation in [0, 180) degrees.

    Only for spatial-branch input; compression features are never touched.
    """
    if not enabled:
        return img
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(0.0, 180.0))
    return augment_with(img, hflip, vflip, angle)


def _spatial_batch(data, idx, rng=None, do_augment=False):
    if data.spatial is None:
        return None
    batch = data.spatial[idx]
    if do_augment and data.spatial.ndim == 4:
        batch = np.stack([augment(s, rng) for s in batch])
    return batch


def predict_proba(model, data, idx, batch_size=256):
    """Eval-mode p(spliced) for the given sample indices."""
    out = []
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        logits = model.forward(_spatial_batch(data, b), data.features[b], train=False)
        out.append(nn.softmax(logits.astype(np.float64))[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def _loss(model, data, idx, batch_size=256):
    total = 0.0
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        logits = model.forward(_spatial_batch(data, b), data.features[b], train=False)
        loss, _ = nn.softmax_cross_entropy(logits.astype(np.float64), data.labels[b])
        total += loss * len(b)
    return total / max(len(idx), 1)


def _snapshot(model):
    return ([l.params[k].copy() for _, l, k in model.named_tensors("params")]
            + [l.buffers[k].copy() for _, l, k in model.named_tensors("buffers")])


def _restore(model, snap):
    slots = ([(l.params, k) for _, l, k in model.named_tensors("params")]
             + [(l.buffers, k) for _, l, k in model.named_tensors("buffers")])
    for (store, key), arr in zip(slots, snap):
        store[key] = arr


@dataclass
class FoldResult:
    fold: int
    model: object
    history: list
    best_epoch: int
    best_val_acc: float
    test_report: metrics.MetricsReport = None


def train_fold(config, data, train_idx, val_idx, fold=0):
    """Train one model; returns a :class:`FoldResult` holding the
    best-validation-accuracy epoch's weights."""
    model = build(ModelConfig(config.branch, config.spatial, data.embed_dim), seed=config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1, fold]))
    state = nn.AdamState()
    bs = min(config.batch_size, len(train_idx))
    do_aug = config.augment and config.spatial == "tiny"
    history = []
    best = (-1.0, -1, None)
    for epoch in range(config.epochs):
        lr = nn.lr_at(config.schedule, epoch)
        perm = train_idx[rng.permutation(len(train_idx))]
        batches = [perm[i:i + bs] for i in range(0, len(perm), bs)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate(batches[-2:])
            batches.pop()
        seen, total = 0, 0.0
        for b in batches:
            logits = model.forward(_spatial_batch(data, b, rng, do_aug), data.features[b],
                                   train=True)
            loss, grad = nn.softmax_cross_entropy(logits, data.labels[b])
            if not np.isfinite(loss):
                raise NonFinite(f"loss became {loss} at epoch {epoch}")
            model.backward(grad)
            params, grads = model.params_and_grads()
            nn.adam_step(params, grads, state, lr)
            total += loss * len(b)
            seen += len(b)
        val_p = predict_proba(model, data, val_idx)
        val_acc = float(np.mean((val_p > 0.5) == (data.labels[val_idx] == 1)))
        val_loss = _loss(model, data, val_idx)
        history.append({"epoch": epoch, "train_loss": total / seen, "val_loss": val_loss,
                        "val_acc": val_acc, "lr": lr})
        log.info("fold %d epoch %d: train %.4f val %.4f acc %.4f lr %.3g",
                 fold, epoch, total / seen, val_loss, val_acc, lr)
        if val_acc > best[0]:
            best = (val_acc, epoch, _snapshot(model))
    _restore(model, best[2])
    return FoldResult(fold, model, history, best[1], best[0])


@dataclass
class TrainResult:
    config: TrainConfig
    split: SplitSpec
    folds: list = field(default_factory=list)

    @property
    def best(self):
        """The fold with the highest validation accuracy (first on ties)."""
        return max(self.folds, key=lambda f: (f.best_val_acc, -f.fold))

    def mean_test(self, name):
        return float(np.mean([getattr(f.test_report, name) for f in self.folds]))

    def metadata(self):
        best = self.best
        c = self.config
        return {
            "seed": c.seed, "epochs": c.epochs, "batch_size": c.batch_size,
            "initial_lr": c.initial_lr, "lr_decay_factor": c.lr_decay_factor,
            "lr_step_epochs": c.lr_step_epochs, "folds": c.folds,
            "test_fraction": c.test_fraction, "augment": c.augment,
            "final_lr": best.history[-1]["lr"], "best_epoch": best.best_epoch,
            "selected_fold": best.fold, "best_val_acc": best.best_val_acc,
        }


def train(config, data, max_folds=None):
    """Cross-validated training on the 90% pool; every fold model is also
    scored on the held-out test split."""
    sp = split(data.labels, config.seed, config.test_fraction, config.folds)
    result = TrainResult(config, sp)
    n = config.folds if max_folds is None else min(max_folds, config.folds)
    for k in range(n):
        tr, va = sp.fold_split(k)
        fr = train_fold(config, data, tr, va, fold=k)
        fr.test_report = evaluate(fr.model, data, sp.test)
        result.folds.append(fr)
    return result


def evaluate(model, data, idx=None):
    """Eval-mode metrics; threshold 0.5 for the confusion matrix."""
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    scores = predict_proba(model, data, idx)
    return metrics.report(scores, data.labels[idx])


def test_indices(data, meta):
    """Recreate the held-out test split recorded in checkpoint metadata."""
    return split(data.labels, meta["seed"], meta.get("test_fraction", 0.1),
                 meta.get("folds", 5)).test
