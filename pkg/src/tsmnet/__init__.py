"""Text-supervised multimodal open-vocabulary segmentation, desk scale."""

__version__ = "0.1.0"
