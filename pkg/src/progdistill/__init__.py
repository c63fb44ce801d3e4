"""Progressive consistency distillation for token-compressed toy multimodal transformers."""

__version__ = "0.1.0"
