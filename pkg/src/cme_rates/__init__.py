"""Conditional mean embeddings by vector-valued kernel ridge regression, with
exact-ground-truth checks of learning rates, bias/variance bounds and
lower-bound constructions."""

__version__ = "0.1.0"
