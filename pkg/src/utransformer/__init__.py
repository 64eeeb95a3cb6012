"""U-Net with multi-head self-attention and cross-attention skip gating."""

__version__ = "0.1.0"
