"""Few-shot microscopy denoising with a conditional GAN and contrastive learning."""

__version__ = "0.1.0"
