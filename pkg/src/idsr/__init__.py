"""Identity-preserving face super-resolution at desk scale.

Submodules: ``tensorcore`` (autodiff), ``resample`` (bicubic and degradation),
``ipunet`` (generator), ``frnet`` (frozen embedders), ``trainer``, ``evalkit``
(CMC), ``dataio`` and ``cli``.
"""
from . import dataio, evalkit, frnet, ipunet, kernels, resample, tensorcore, trainer

__version__ = "0.1.0"

__all__ = ["dataio", "evalkit", "frnet", "ipunet", "kernels", "resample", "tensorcore", "trainer", "__version__"]
