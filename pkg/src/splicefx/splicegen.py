"""Synthetic splice dataset generation.

Originals are compressed once. Spliced samples are built on a decoded,
already-compressed target: an object cut from a raw donor is scaled,
rotated, flipped and photometrically altered, pasted in, and the composite
is compressed a second time. Every random draw comes from a
``numpy.random.Generator`` seeded by ``(seed, sample index)``.
"""

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageops
from .jpeg import decode_pixels, encode, parse_coefficients, recompress
from .jpeg.model import RangeError

QF_RANGE = (30, 95)
SCALE_RANGE = (0.85, 1.0)
ROTATION_RANGE = (0.0, 180.0)
CONTRAST_RANGE = (1.5, 1.85)
BRIGHTNESS_RANGE = (1.1, 1.4)
SHARPNESS_RANGE = (1.5, 2.0)
MASK_AREA_RANGE = (0.01, 0.40)

MANIFEST_FIELDS = ["name", "first compression", "second compression", "object name",
                   "scale", "rotation", "flip", "contrast", "brightness", "sharpness",
                   "label", "mask_path"]

SUBSAMPLING = "4:2:0"


class EmptyMask(ValueError):
    pass


class PasteOutOfBounds(ValueError):
    pass


class InsufficientCorpus(ValueError):
    pass


@dataclass(frozen=True)
class SpliceRecipe:
    qf1: int
    qf2: int
    object_name: str = ""
    scale: float = 1.0
    rotation_deg: float = 0.0
    flip: int = 0
    contrast: float = 1.0
    brightness: float = 1.0
    sharpness: float = 1.0
    position: tuple = None  # (top, left) of the transformed object; None = draw uniformly

    def validate(self):
        for q in (self.qf1, self.qf2):
            if not QF_RANGE[0] <= q <= QF_RANGE[1]:
                raise RangeError(f"quality factor {q} outside {QF_RANGE}")


# -- procedural source images ---------------------------------------------------

def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _value_noise(rng, size, cells):
    grid = rng.random((cells + 1, cells + 1))
    return imageops.resize(grid, (size, size))


def generate_image(seed, index, size=256):
    """One procedural RGB test image: gradients, multi-octave value noise,
    stripes, filled shapes and sensor-like noise."""
    if size < 64:
        raise RangeError(f"image size must be >= 64, got {size}")
    rng = _rng(seed, 0x5EED, index)
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    c0, c1 = rng.uniform(20, 235, 3), rng.uniform(20, 235, 3)
    img = c0 + ramp[..., None] * (c1 - c0)
    for cells in (3, 7, 15, 31):
        amp = rng.uniform(10, 45) * (3 / cells) ** 0.4
        tint = rng.uniform(0.5, 1.0, 3)
        img += amp * (_value_noise(rng, size, cells)[..., None] - 0.5) * tint
    if rng.random() < 0.6:
        freq = rng.uniform(4, 24)
        phi = rng.uniform(0, 2 * np.pi)
        stripes = np.sin(2 * np.pi * freq * (np.cos(phi) * xx + np.sin(phi) * yy))
        img += rng.uniform(4, 18) * stripes[..., None]
    for _ in range(rng.integers(3, 9)):
        m = random_shape_mask(rng, size, size, rng.uniform(0.08, 0.45))
        colour = rng.uniform(0, 255, 3)
        shade = colour + rng.uniform(5, 30) * (_value_noise(rng, size, 11)[..., None] - 0.5)
        alpha = rng.uniform(0.6, 1.0)
        img[m] = (1 - alpha) * img[m] + alpha * shade[m]
    img += rng.normal(0, rng.uniform(1.5, 6.0), img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def gen_corpus(n, size, seed):
    """``n`` deterministic procedural images of ``size`` x ``size``."""
    if size < 64:
        raise RangeError(f"image size must be >= 64, got {size}")
    return [generate_image(seed, i, size) for i in range(n)]


def random_shape_mask(rng, h, w, rel_size):
    """Boolean mask of a random ellipse or star-ish polygon of roughly
    ``rel_size`` x image dimension, placed anywhere in the frame."""
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry = max(2.0, rel_size * h / 2 * rng.uniform(0.6, 1.4))
    rx = max(2.0, rel_size * w / 2 * rng.uniform(0.6, 1.4))
    if rng.random() < 0.5:
        a = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (np.cos(a) * dx + np.sin(a) * dy) / rx
        v = (-np.sin(a) * dx + np.cos(a) * dy) / ry
        return u * u + v * v <= 1
    return _polygon_mask(rng, yy, xx, cy, cx, ry, rx)


def _polygon_mask(rng, yy, xx, cy, cx, ry, rx):
    k = int(rng.integers(5, 10))
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = rng.uniform(0.55, 1.0, k)
    py = cy + ry * rad * np.sin(ang)
    px = cx + rx * rad * np.cos(ang)
    # even-odd point-in-polygon test
    inside = np.zeros(yy.shape, dtype=bool)
    for i in range(k):
        y0, x0, y1, x1 = py[i], px[i], py[i - 1], px[i - 1]
        cond = (y0 > yy) != (y1 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x1 - x0) * (yy - y0) / (y1 - y0) + x0
        inside ^= cond & (xx < xint)
    return inside


# -- object manipulation ---------------------------------------------------------

def transform_object(patch, mask, recipe):
    """Apply the recipe's geometric and photometric edits to an object.

    ``patch`` is (h, w, 3) pixels, ``mask`` a boolean (h, w) array. Returns
    a float patch in [0, 255] and the re-binarized mask on the expanded
    canvas.
    """
    p = np.asarray(patch, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if recipe.scale != 1.0 or recipe.rotation_deg % 360:
        p = imageops.scale_rotate(p, recipe.scale, recipe.rotation_deg)
        m = imageops.scale_rotate(m, recipe.scale, recipe.rotation_deg)
    m = m >= 0.5
    if recipe.flip:
        p = p[:, ::-1].copy()
        m = m[:, ::-1].copy()
    if not m.any():
        raise EmptyMask("object mask is empty after transformation")
    if recipe.contrast != 1.0:
        mean = imageops.luminance(p)[m].mean()
        p = np.clip(mean + recipe.contrast * (p - mean), 0, 255)
    if recipe.brightness != 1.0:
        p = np.clip(recipe.brightness * p, 0, 255)
    if recipe.sharpness != 1.0:
        p = np.clip(imageops.blend(imageops.smooth3(p), p, recipe.sharpness), 0, 255)
    return p, m


def extract_object(donor, rng, mask=None, rel_size=None):
    """Cut an object out of the donor: (patch, mask) cropped to the mask's bounding box.

    Uses ``mask`` when given (e.g. a user-supplied segmentation), otherwise a
    random procedural shape.
    """
    h, w = donor.shape[:2]
    if mask is None:
        rel = rel_size if rel_size is not None else rng.uniform(0.25, 0.6)
        mask = random_shape_mask(rng, h, w, rel)
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise EmptyMask("donor mask is empty")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    sl = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    return donor[sl].copy(), mask[sl].copy()


def paste(base, obj, obj_mask, position):
    """Overwrite ``base`` with the masked object at (top, left); returns
    (composite uint8, full-frame 0/255 mask)."""
    h, w = base.shape[:2]
    oh, ow = obj_mask.shape
    top, left = position
    if oh > h or ow > w or top < 0 or left < 0 or top + oh > h or left + ow > w:
        raise PasteOutOfBounds(f"object {oh}x{ow} at {position} does not fit {h}x{w}")
    out = base.copy()
    region = out[top:top + oh, left:left + ow]
    region[obj_mask] = np.clip(np.rint(obj[obj_mask]), 0, 255).astype(np.uint8)
    full = np.zeros((h, w), dtype=np.uint8)
    full[top:top + oh, left:left + ow][obj_mask] = 255
    return out, full


def make_original(src, qf1):
    """Single-compressed original."""
    return encode(src, qf1, SUBSAMPLING)


def compose_splice(donor_patch, donor_mask, target, recipe, seed=0):
    """Everything in a splice up to (not including) the final compression.

    Returns (composite, mask, background) where ``background`` is the
    decoded first-compression target the object was pasted onto.
    """
    recipe.validate()
    background = decode_pixels(parse_coefficients(encode(target, recipe.qf1, SUBSAMPLING)))
    obj, obj_mask = transform_object(donor_patch, donor_mask, recipe)
    h, w = background.shape[:2]
    oh, ow = obj_mask.shape
    if oh > h or ow > w:
        raise PasteOutOfBounds(f"transformed object {oh}x{ow} larger than target {h}x{w}")
    position = recipe.position
    if position is None:
        rng = _rng(seed, 0x9A57E)
        position = (int(rng.integers(0, h - oh + 1)), int(rng.integers(0, w - ow + 1)))
    composite, mask = paste(background, obj, obj_mask, position)
    return composite, mask, background


def make_spliced(donor_patch, donor_mask, target, recipe, seed=0):
    """Double-compressed splice: returns (JPEG bytes, 0/255 mask)."""
    composite, mask, _ = compose_splice(donor_patch, donor_mask, target, recipe, seed)
    return encode(composite, recipe.qf2, SUBSAMPLING), mask


def double_compress(src, qf1, qf2):
    """Single-compressed and double-compressed versions of one source."""
    single = make_original(src, qf1)
    return single, recompress(single, qf2)


# -- dataset assembly ------------------------------------------------------------

def _uniform2(rng, lo, hi):
    return round(float(rng.uniform(lo, hi)), 2)


def sample_recipe(rng, object_name=""):
    return SpliceRecipe(
        qf1=int(rng.integers(QF_RANGE[0], QF_RANGE[1] + 1)),
        qf2=int(rng.integers(QF_RANGE[0], QF_RANGE[1] + 1)),
        object_name=object_name,
        scale=_uniform2(rng, *SCALE_RANGE),
        rotation_deg=min(_uniform2(rng, *ROTATION_RANGE), 179.99),
        flip=int(rng.integers(0, 2)),
        contrast=_uniform2(rng, *CONTRAST_RANGE),
        brightness=_uniform2(rng, *BRIGHTNESS_RANGE),
        sharpness=_uniform2(rng, *SHARPNESS_RANGE),
    )


def mask_fraction(mask):
    return float(np.count_nonzero(mask)) / mask.size


class Corpus:
    """Source images, either procedural or loaded from a directory.

    A directory corpus may contain a ``masks/`` subdirectory with
    ``<image stem>.png`` grayscale object masks; those replace the
    procedural object shapes when that image serves as a donor.
    """

    def __init__(self, seed=0, size=256, directory=None):
        self.seed = seed
        self.size = size
        self.directory = Path(directory) if directory else None
        self.files = []
        if self.directory is not None:
            exts = {".jpg", ".jpeg", ".ppm", ".pgm"}
            self.files = sorted(p for p in self.directory.iterdir()
                                if p.suffix.lower() in exts and p.is_file())

    def __len__(self):
        return len(self.files) if self.directory is not None else None

    def image(self, index):
        if self.directory is None:
            return generate_image(self.seed, index, self.size)
        return load_image(self.files[index])

    def object_mask(self, index):
        if self.directory is None:
            return None
        path = self.directory / "masks" / (self.files[index].stem + ".png")
        return imageops.read_png_gray(path) if path.exists() else None

    def name(self, index):
        if self.directory is None:
            return f"p{index:05d}"
        return self.files[index].stem


def load_image(path):
    """Read a baseline JPEG or binary PPM/PGM into uint8 RGB."""
    data = Path(path).read_bytes()
    if data[:2] == b"\xff\xd8":
        img = decode_pixels(parse_coefficients(data))
    elif data[:2] in (b"P5", b"P6"):
        img = _read_netpbm(data)
    else:
        raise ValueError(f"{path}: unsupported image format")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img


def _read_netpbm(data):
    fields = []
    buf = io.BytesIO(data)
    while len(fields) < 4:
        line = buf.readline()
        if not line:
            raise ValueError("truncated netpbm header")
        line = line.split(b"#")[0]
        fields += line.split()
    pos = buf.tell()
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit netpbm images are supported")
    ch = 3 if magic == b"P6" else 1
    arr = np.frombuffer(data, np.uint8, w * h * ch, pos)
    return arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)


def write_ppm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    magic = b"P6" if img.ndim == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def _make_sample(args):
    corpus, n_sources, seed, index = args
    rng = _rng(seed, 0xDA7A, index)
    target = corpus.image(index)
    qf_original = int(rng.integers(QF_RANGE[0], QF_RANGE[1] + 1))
    original = make_original(target, qf_original)
    donor_index = (index + 1 + int(rng.integers(0, n_sources - 1))) % n_sources
    donor = corpus.image(donor_index)
    user_mask = corpus.object_mask(donor_index)
    for attempt in range(50):
        obj_name = f"object{attempt}_{corpus.name(donor_index)}"
        recipe = sample_recipe(rng, obj_name)
        try:
            patch, pmask = extract_object(donor, rng, mask=user_mask)
            composite, mask, _ = compose_splice(patch, pmask, target, recipe,
                                                seed=int(rng.integers(0, 2**31)))
        except (EmptyMask, PasteOutOfBounds):
            continue
        frac = mask_fraction(mask)
        if MASK_AREA_RANGE[0] <= frac <= MASK_AREA_RANGE[1]:
            break
    else:
        raise EmptyMask(f"could not place an object of valid size for sample {index}")
    spliced = encode(composite, recipe.qf2, SUBSAMPLING)
    return qf_original, original, recipe, spliced, mask


def worker_count():
    env = os.environ.get("SPLICE_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _fmt(v):
    return f"{v:g}"


def gen_dataset(count, seed, out_dir, corpus_dir=None, size=256, workers=None):
    """Write originals/, spliced/, masks/ and manifest.csv; returns the manifest rows.

    ``count`` originals and ``count`` spliced images are produced (target
    ``i`` of the corpus is used for both). Output bytes depend only on
    (count, seed, size, corpus).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    corpus = Corpus(seed=seed, size=size, directory=corpus_dir)
    n_sources = len(corpus) if corpus_dir else count
    if corpus_dir and (n_sources < 2 or count > n_sources):
        raise InsufficientCorpus(f"count {count} needs {max(count, 2)} source images, "
                                 f"corpus has {n_sources}")
    if not corpus_dir and n_sources < 2:
        n_sources = 2
    out = Path(out_dir)
    for sub in ("originals", "spliced", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    jobs = [(corpus, n_sources, seed, i) for i in range(count)]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_make_sample, jobs, chunksize=4))
    else:
        results = [_make_sample(j) for j in jobs]
    rows = []
    for i, (qf0, original, recipe, spliced, mask) in enumerate(results):
        stem = f"s{i:05d}"
        orig_name = f"originals/{stem}_original.jpg"
        spl_name = f"spliced/{stem}_spliced.jpg"
        mask_name = f"masks/{stem}_mask.png"
        (out / orig_name).write_bytes(original)
        (out / spl_name).write_bytes(spliced)
        imageops.write_png_gray(out / mask_name, mask)
        rows.append({"name": orig_name, "first compression": str(qf0),
                     "second compression": "", "object name": "", "scale": "",
                     "rotation": "", "flip": "", "contrast": "", "brightness": "",
                     "sharpness": "", "label": "original", "mask_path": ""})
        rows.append({"name": spl_name, "first compression": str(recipe.qf1),
                     "second compression": str(recipe.qf2),
                     "object name": recipe.object_name, "scale": _fmt(recipe.scale),
                     "rotation": _fmt(recipe.rotation_deg), "flip": str(recipe.flip),
                     "contrast": _fmt(recipe.contrast), "brightness": _fmt(recipe.brightness),
                     "sharpness": _fmt(recipe.sharpness), "label": "spliced",
                     "mask_path": mask_name})
    write_manifest(out / "manifest.csv", rows)
    return rows


def write_manifest(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_manifest(path):
    """Rows of a manifest.csv as dicts; paths stay relative to its directory."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"name", "label"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        rows = list(reader)
    for r in rows:
        if r["label"] not in ("original", "spliced"):
            raise ValueError(f"{path}: bad label {r['label']!r}")
    return rows


def validate_mask(mask, shape=None):
    """Check the binary-mask invariants; returns the spliced-area fraction."""
    mask = np.asarray(mask)
    values = set(np.unique(mask).tolist())
    if not values <= {0, 255} or 255 not in values:
        raise ValueError(f"mask must be strictly 0/255 with a non-empty region, got {sorted(values)}")
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} != image shape {tuple(shape)}")
    frac = mask_fraction(mask)
    if not MASK_AREA_RANGE[0] <= frac <= MASK_AREA_RANGE[1]:
        raise ValueError(f"mask area fraction {frac:.4f} outside {MASK_AREA_RANGE}")
    return frac


__all__ = [
    "SpliceRecipe", "EmptyMask", "PasteOutOfBounds", "InsufficientCorpus",
    "gen_corpus", "generate_image", "transform_object", "make_original",
    "make_spliced", "compose_splice", "gen_dataset", "read_manifest",
    "validate_mask", "double_compress", "sample_recipe",
]
