"""Mixed-attention encoder (span-based dynamic convolution + bottlenecked self-attention)."""

__version__ = "0.1.0"
