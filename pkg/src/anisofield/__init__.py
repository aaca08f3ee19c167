"""Anisotropic stable and multistable random fields via LePage series.

Submodules: ``quasi_metric`` (scaling matrices, tau_E, rho), ``subgaussian``
(multiplier sources and tail checks), ``shot_noise`` (partial sums and rates),
``lepage`` (densities, kernels, simulation), ``regularity`` (nets, moduli,
exponents) and ``cli``.
"""
from .kernels import BACKEND
from .lepage import (AlphaField, EigenProduct, FieldGrid, HarmonizableOS, IsotropicMixture,
                     RieszBessel, simulate_field, simulate_lines)
from .quasi_metric import HomogeneousPsi, QuasiMetricSpec, ScalingMatrix

__version__ = "0.1.0"
