"""Respiratory-anomaly detection pipeline: CWT spectrograms, augmentation,
an inception-residual attention classifier, KL training and challenge
scoring."""

__version__ = "0.1.0"
