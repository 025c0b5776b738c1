"""Gait foundation-model pipeline: preprocessing, masked pretraining, pooling, evaluation and attribution."""

__version__ = "0.1.0"
