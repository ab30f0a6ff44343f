"""Multimodal temporal fusion for emotion-intensity regression and frame-level
ambivalence/hesitancy detection over precomputed feature packs."""

__version__ = "0.1.0"
