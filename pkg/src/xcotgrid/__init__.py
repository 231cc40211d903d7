"""Cross-modal chain-of-thought generation with GRPO on a verifiable grid world."""

__version__ = "0.1.0"
