"""IFA: normalized linear cross-attention ranking over full behaviour sequences."""

__version__ = "0.1.0"
