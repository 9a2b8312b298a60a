import io

import numpy as np
import pytest
from PIL import Image

from splicefx.splicegen import generate_image


def pil_jpeg(img, quality=80, subsampling=2, **kw):
    """Encode with the reference (libjpeg) encoder via Pillow."""
    mode = "L" if img.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(img, mode).save(buf, "JPEG", quality=quality, subsampling=subsampling, **kw)
    return buf.getvalue()


def pil_decode(data):
    return np.asarray(Image.open(io.BytesIO(data)))


@pytest.fixture(scope="session")
def sample_rgb():
    return generate_image(11, 0, 96)[:75, :93]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
