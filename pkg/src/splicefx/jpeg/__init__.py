"""Baseline JPEG codec working at the quantized-DCT-coefficient level."""

from .decoder import decode_pixels, parse_coefficients, ycc_to_rgb
from .encoder import (encode, forward_transform, quality_to_tables, recompress,
                      write_jpeg)
from .model import (CoefficientImage, ComponentSpec, CorruptStream, JpegError,
                    RangeError, UnsupportedFormat)
from .tables import ZIGZAG, zigzag_positions

__all__ = [
    "CoefficientImage", "ComponentSpec", "CorruptStream", "JpegError",
    "RangeError", "UnsupportedFormat", "ZIGZAG", "decode_pixels", "encode",
    "forward_transform", "parse_coefficients", "quality_to_tables",
    "recompress", "write_jpeg", "ycc_to_rgb", "zigzag_positions",
]
