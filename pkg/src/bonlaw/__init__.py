"""Best-of-N selection, scaling-law predictors and reward-model diagnostics."""

__version__ = "0.1.0"
