"""Few-shot, prompt-conditioned image restoration with LoRA-adapted rectified-flow transformers."""

__version__ = "0.1.0"
