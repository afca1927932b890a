"""Upstream glue for camforge: synthetic dataset planting and encoder export."""

from .synthetic import SyntheticSpec, dataset_digest, gen_synthetic

__all__ = ["SyntheticSpec", "dataset_digest", "gen_synthetic"]
