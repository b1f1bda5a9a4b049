"""Multidimensional preference optimization on a synthetic token-sequence task.

The package trains a small decoder-only model with supervised fine-tuning,
builds multidimensional preference sets over sampled candidates, and runs
preference optimization with or without the cross-entropy regularizer,
logging the training dynamics of both regimes.
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1
