"""Desk-scale data, training, evaluation and robustness metrics."""
