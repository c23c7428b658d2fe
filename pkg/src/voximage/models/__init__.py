"""Model definitions: masked autoencoders, cross-modal coupling, latent
autoencoder, conditional denoiser, and the evaluation classifier."""

from .classifier import ConvClassifier, cross_entropy
from .denoiser import CondUNet
from .latent_ae import ConvLatentAE
from .mae import FmriMae, ImageMae, MaskedAutoencoder
from .xmodal import CrossModalModel

__all__ = [
    "CondUNet", "ConvClassifier", "ConvLatentAE", "CrossModalModel",
    "FmriMae", "ImageMae", "MaskedAutoencoder", "cross_entropy",
]
