"""fieldcodec: meta-learned implicit representations with learned latent compression."""

__version__ = "0.1.0"
