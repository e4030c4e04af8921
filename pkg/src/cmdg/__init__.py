"""Causal matching for domain generalization: data, matching, training, metrics."""

from .datagen import GlyphConfig, MultiDomainDataset, ScmConfig, generate_glyphs, generate_scm, load_dataset, save_dataset, split
from .estimators import ContrastiveMatcher, MatchingClassifier
from .matchstore import MatchMatrix, infer_matches, perfect_matches, random_matches
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ContrastiveMatcher",
    "GlyphConfig",
    "MatchMatrix",
    "MatchingClassifier",
    "MultiDomainDataset",
    "ScmConfig",
    "TrainConfig",
    "generate_glyphs",
    "generate_scm",
    "infer_matches",
    "load_dataset",
    "perfect_matches",
    "random_matches",
    "save_dataset",
    "split",
]
