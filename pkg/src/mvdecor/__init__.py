"""Multi-view dense-correspondence pre-training for few-shot 3D part segmentation."""

__version__ = "0.1.0"
