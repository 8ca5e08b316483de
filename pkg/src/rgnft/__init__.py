"""Fine-tuning regularization toolkit: RGN diagnostics, anchored penalties, SE gating, staged recipes."""

__version__ = "0.1.0"
