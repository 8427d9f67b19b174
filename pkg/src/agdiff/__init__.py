"""Action-guided diffusion policy toolkit."""

__version__ = "0.1.0"
