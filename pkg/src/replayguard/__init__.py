"""Replay-spoofing countermeasures: phase and magnitude features, GMM and ResNet back-ends, metrics."""

__version__ = "0.1.0"
