"""Multi-behavior multi-task recommendation with cascading graph convolution,
gated target feedback, global context enhancement and contrastive alignment."""

__version__ = "0.1.0"
