"""Desk-scale low-light captioning model: enhancement, region-aware encoding, gated Q-Former, LoRA."""

__version__ = "0.1.0"
