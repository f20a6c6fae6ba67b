"""Learned-weighted GNN/MLP ensembles, structure-poisoning attacks and defenses."""

__version__ = "0.1.0"
