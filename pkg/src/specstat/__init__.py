"""Speckle-statistics segmentation toolkit for OCT B-scans.

Patch-wise distribution fitting, goodness-of-fit and variance testing,
random-forest weak labels and a small residual encoder-decoder that refines
them, validated on synthetic speckle phantoms.
"""

__version__ = "0.1.0"
