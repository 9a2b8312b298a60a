"""JPEG splice forensics: DCT histogram features, a small from-scratch
conv/involution network, a synthetic splice-dataset generator and a
train/eval harness."""

__version__ = "0.1.0"
