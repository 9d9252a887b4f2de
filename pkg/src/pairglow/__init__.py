"""Conditional Glow engine for paired image-to-image translation.

A dual-stack invertible model: an unconditional flow over source
images whose per-step activations condition every sub-step of a second
flow over target images. Trains by exact maximum likelihood on a
hand-rolled reverse-mode tape, supports temperature-controlled
sampling and content transfer, and ships a synthetic paired-scene
generator so everything is verifiable at desk scale.
"""

__version__ = "0.1.0"
