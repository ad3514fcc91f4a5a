"""Hierarchical fine-grained classification with logit-tree heads and learned intra-level costs."""

__version__ = "0.1.0"
