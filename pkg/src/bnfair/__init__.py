"""Selective fine-tuning regimes around BatchNorm statistics and subgroup fairness metrics."""
__version__ = "0.1.0"
