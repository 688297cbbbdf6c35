"""Reaction-prediction pre-training of a SMILES transformer for molecular property prediction."""

__version__ = "0.1.0"

from .smiles import (  # noqa: E402
    MolGraph,
    SmilesError,
    canonicalize,
    detokenize,
    parse_smiles,
    tokenize,
    write_canonical,
    write_randomized,
)
from .estimators import (  # noqa: E402
    PropertyClassifier,
    PropertyRegressor,
    ReactionPretrainer,
    SmilesCanonicalizer,
    SmilesRandomizer,
)

__all__ = [
    "MolGraph",
    "SmilesError",
    "canonicalize",
    "detokenize",
    "parse_smiles",
    "tokenize",
    "write_canonical",
    "write_randomized",
    "PropertyClassifier",
    "PropertyRegressor",
    "ReactionPretrainer",
    "SmilesCanonicalizer",
    "SmilesRandomizer",
]
