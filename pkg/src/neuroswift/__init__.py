"""Two-pathway fMRI-to-image decoding on a synthetic, fully known world.

A voxel-to-latent adapter supplies layout, a voxel-to-token adapter supplies
semantics, and a partial-noise sampler fuses the two.
"""

__version__ = "0.1.0"
