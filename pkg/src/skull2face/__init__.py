"""Skull-to-face translation at desk scale.

A small, self-contained stack: a reverse-mode autodiff tensor core,
generator/discriminator/embedder networks, the four translation
objectives (CycleGAN, cGAN, CUT, FastCUT), FID/IS/SSIM evaluation, and
Euclidean gallery retrieval, driven by a synthetic paired dataset and a
batch CLI.
"""

__version__ = "0.1.0"
