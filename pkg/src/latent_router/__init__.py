"""Gate-free routing of token blocks by autoencoder reconstruction quality."""

__version__ = "0.1.0"
