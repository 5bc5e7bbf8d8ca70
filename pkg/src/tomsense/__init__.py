"""Fisher-sensitivity masks, RoPE-aware analyses and evaluations for a small NumPy decoder."""

__version__ = "0.1.0"
