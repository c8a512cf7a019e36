"""Finite-particle alpha-Renyi variational learning.

Losses and responsibilities over particle ensembles, KL surrogates, an
AdamW particle trainer, local stability analysis, the discrete
self-consistent posterior, an alpha-aggregated preference objective and a
small experiment CLI.
"""

__version__ = "0.1.0"
