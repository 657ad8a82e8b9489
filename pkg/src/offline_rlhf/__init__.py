"""Offline alignment (SFT, reward model, FA / RWR / CA fine-tuning) on a tiny numpy transformer."""

__version__ = "0.1.0"
