"""Weighted denoising score matching on one-dimensional Gaussian mixtures.

Submodules: :mod:`density` (mixtures, derivatives, Fisher information),
:mod:`schedule` (VE noise schedule), :mod:`estimators` (Monte-Carlo
higher-order scores), :mod:`weighting` (loss weights), :mod:`score_net`
(tanh MLP), :mod:`training`, :mod:`sampling` and :mod:`cli`.
"""

from .density import GaussianMixture1D, fig1_mixture, gradvar_mixture, load_mixture
from .errors import NumericalError
from .schedule import NoiseSchedule

__all__ = ["GaussianMixture1D", "NoiseSchedule", "NumericalError", "fig1_mixture", "gradvar_mixture", "load_mixture"]
__version__ = "0.1.0"
