"""Planar pushing of a disc under pose uncertainty.

Hand-relative and lattice POMDP models, value iteration, QMDP and
determinized sparse tree search policies, and an evaluation harness.
"""

__version__ = "0.1.0"
