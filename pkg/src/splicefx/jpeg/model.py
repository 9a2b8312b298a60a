"""Coefficient-domain JPEG image representation and codec errors."""

from dataclasses import dataclass, field
from math import ceil

import numpy as np


class JpegError(Exception):
    """Base class for codec failures."""


class UnsupportedFormat(JpegError):
    """Valid JPEG, but outside the baseline-sequential Huffman subset."""


class CorruptStream(JpegError):
    """Malformed marker structure or entropy-coded data."""


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class ComponentSpec:
    component_id: int
    h_sampling: int
    v_sampling: int
    quant_table_id: int


@dataclass
class CoefficientImage:
    """Quantized DCT coefficients exactly as coded in a JPEG stream.

    ``blocks[i]`` holds component ``i`` as an int32 array of shape
    ``(block_rows, block_cols, 8, 8)`` in natural order, so
    ``blocks[i][r, c, 0, 0]`` is the DC term of block (r, c). The grid
    includes the MCU padding blocks. ``quant_tables`` maps table id to an
    8x8 int32 array, also in natural order.
    """

    width: int
    height: int
    components: list
    blocks: list
    quant_tables: dict
    restart_interval: int = 0
    is_color: bool = field(init=False)

    def __post_init__(self):
        self.is_color = len(self.components) >= 3

    @property
    def luma(self):
        return self.blocks[0]

    @property
    def h_max(self):
        return max(c.h_sampling for c in self.components)

    @property
    def v_max(self):
        return max(c.v_sampling for c in self.components)

    def quant_table(self, index):
        return self.quant_tables[self.components[index].quant_table_id]

    def component_size(self, index):
        """Downsampled (width, height) of a component before block padding."""
        comp = self.components[index]
        return (ceil(self.width * comp.h_sampling / self.h_max),
                ceil(self.height * comp.v_sampling / self.v_max))

    def block_grid(self, index):
        """(rows, cols) of the coded block grid of a component."""
        if len(self.components) == 1:
            return ceil(self.height / 8), ceil(self.width / 8)
        comp = self.components[index]
        mcu_cols = ceil(self.width / (8 * self.h_max))
        mcu_rows = ceil(self.height / (8 * self.v_max))
        return mcu_rows * comp.v_sampling, mcu_cols * comp.h_sampling

    @property
    def subsampling(self):
        if len(self.components) == 1:
            return "gray"
        ratios = {(self.h_max // c.h_sampling, self.v_max // c.v_sampling)
                  for c in self.components[1:]}
        if ratios == {(1, 1)}:
            return "4:4:4"
        if ratios == {(2, 2)}:
            return "4:2:0"
        if ratios == {(2, 1)}:
            return "4:2:2"
        return "other"


def empty_like_layout(width, height, components, quant_tables):
    """Allocate a zero CoefficientImage for the given frame layout."""
    img = CoefficientImage(width, height, list(components), [], dict(quant_tables))
    for i in range(len(img.components)):
        rows, cols = img.block_grid(i)
        img.blocks.append(np.zeros((rows, cols, 8, 8), dtype=np.int32))
    return img
