"""Post-training quantization of a toy diffusion model with temporal-feature maintenance."""

__version__ = "0.1.0"
