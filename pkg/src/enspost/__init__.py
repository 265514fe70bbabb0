"""Member-by-member ensemble post-processing with self-attention across members."""

__version__ = "0.1.0"
