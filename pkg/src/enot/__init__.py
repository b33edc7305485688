"""Expectile-regularized neural optimal transport.

Learns Kantorovich potentials and transport maps between empirical measures
by stochastic minimax training, replacing exact c-conjugation with an
expectile regularizer, and ships independent oracles (log-domain Sinkhorn,
closed-form Gaussian transport, brute-force conjugates) for validation.
"""

__version__ = "0.1.0"
