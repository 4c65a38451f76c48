"""Semi-supervised contrastive learning for image classification and segmentation."""

__version__ = "0.1.0"
