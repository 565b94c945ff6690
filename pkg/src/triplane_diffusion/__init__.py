"""Desk-scale 3D-aware denoising diffusion.

A denoiser that encodes a noisy 2D image into a triplane neural field
and volumetrically renders it back, trained only on posed 2D images.
Supports unconditional generation, monocular reconstruction, and
mask-conditioned inpainting.
"""

__version__ = "0.1.0"
