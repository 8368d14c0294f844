"""Fully attentional network blocks, IB clustering, spectral probes and robustness metrics."""

__version__ = "0.1.0"
