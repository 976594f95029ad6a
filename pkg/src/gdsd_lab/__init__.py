"""Guided denoiser self-distillation for masked diffusion models, at toy scale.

Submodules: ``numerics`` (autodiff), ``mdm`` (masking, denoisers, ELBO),
``decoder`` (re-masking samplers), ``objectives`` (losses), ``oracles``
(brute-force ground truth), ``tasks``, ``trainer``, ``verify`` and ``cli``.
"""

__version__ = "0.1.0"
