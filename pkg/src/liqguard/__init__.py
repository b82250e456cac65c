"""Liquidation-risk prediction, intervention search and counterfactual replay."""

__version__ = "0.1.0"
