"""Layout- and count-conditioned toy diffusion editing components."""

__version__ = "0.1.0"
