"""Multi-modal test-time adaptation on two-branch segmentation models."""

__version__ = "0.1.0"
