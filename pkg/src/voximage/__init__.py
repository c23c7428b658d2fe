"""voximage: cross-modal fMRI representation learning and conditional
latent diffusion, on a self-contained float64 autodiff engine.

The package trains a masked autoencoder on voxel vectors with a double
contrastive objective, aligns it with an image autoencoder through
cross-attention guided reconstruction, then drives a latent diffusion model
from the learned voxel encoder to synthesise images, and scores the results
with an n-way top-k identification metric.  All data is produced by a
built-in synthetic paired generator, so the full pipeline runs on a desk
machine in minutes.
"""

__version__ = "0.1.0"
