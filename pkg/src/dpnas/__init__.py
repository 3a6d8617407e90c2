"""Differentially private neural architecture search at desk scale.

An RL controller searches a cell-based space whose candidates are trained
with per-example clipping and Gaussian noising; privacy is tracked by a
Renyi-DP accountant that calibrates noise against an (epsilon, delta)
budget. Found architectures are trained from scratch under the budget and
analyzed (operation frequencies, activation/pooling ablations, transfer).
"""

__version__ = "0.1.0"
