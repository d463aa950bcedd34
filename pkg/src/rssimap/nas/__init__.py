from .genome import ALL_OPS, CONV_OPS, ArchGenome, Skeleton, mutate, random_genome
from .model import build_model
from .search import SearchConfig, evolve, rank_candidates, validation_error

__all__ = ["ALL_OPS", "CONV_OPS", "ArchGenome", "Skeleton", "mutate", "random_genome",
           "build_model", "SearchConfig", "evolve", "rank_candidates", "validation_error"]
