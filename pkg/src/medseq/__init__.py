"""medseq: patient medical histories as token sequences.

Vocabulary construction, synthetic cohorts with analytic oracles,
sequence linearization, a from-scratch autoregressive transformer,
Monte Carlo simulation of futures, and cost/risk evaluation.
"""

__version__ = "0.1.0"
