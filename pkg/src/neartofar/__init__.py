"""Near-to-far self-supervised obstacle / free-space segmentation.

Near-range depth is turned into per-pixel labels via a RANSAC ground plane;
those labels train a small encoder-decoder online so it can segment the far
field where depth is missing.
"""

__version__ = "0.1.0"
