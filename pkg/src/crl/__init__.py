"""Causal representation learning from multi-environment data.

Synthetic latent SEM generation, exact log-density derivative oracles,
a structured-prior VAE estimator with iterative sink identification,
and evaluation against ground truth.
"""

__version__ = "0.1.0"
