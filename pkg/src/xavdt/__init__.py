"""Audio-visual deepfake detection from diffusion inversion and cross-attention features."""
__version__ = "0.1.0"
