"""Context-aware segmentation of tiled slides: graph context over tiles fused with patch detail."""

__version__ = "0.1.0"
