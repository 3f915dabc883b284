"""MAE-CLIP: contrastive language-image pre-training with masked cross-modal reconstruction."""

__version__ = "0.1.0"
