"""Circle-product latent VAE, disentanglement metrics and procedural datasets."""

__version__ = "0.1.0"
