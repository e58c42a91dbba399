"""Contrastive sleep-stage representation learning with prior-feature positive mining."""

__version__ = "0.1.0"
