"""Training loops for every pipeline stage."""

from .classifier import ClassifierConfig, train_classifier
from .latent import LatentAEConfig, train_latent_ae
from .ldm import LdmConfig, finetune_ldm, generate_images, pretrain_ldm
from .phase1 import Phase1Config, phase1_step, train_phase1
from .phase2 import Phase2Config, phase2_step, train_phase2

__all__ = [
    "ClassifierConfig", "LatentAEConfig", "LdmConfig", "Phase1Config",
    "Phase2Config", "finetune_ldm", "generate_images", "phase1_step",
    "phase2_step", "pretrain_ldm", "train_classifier", "train_latent_ae",
    "train_phase1", "train_phase2",
]
