"""Joint video and depth diffusion with motion and cross-attention consistency at desk scale."""

__version__ = "0.1.0"
