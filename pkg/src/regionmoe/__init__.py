"""Regional mixture-of-experts fusion for multimodal tabular cohorts."""

__version__ = "0.1.0"
