"""Caption emendation with fused decoder and masked language model states."""

__version__ = "0.1.0"
