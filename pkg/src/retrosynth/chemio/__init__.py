"""Formulas, composition graphs, recipe datasets and the knowledge base."""
from .elements import ATOMIC_NUMBER, COMMON_ELEMENTS, N_ELEMENTS, SYMBOLS
from .formula import (
    Composition,
    FormulaError,
    canonical_formula,
    composition_from_amounts,
    format_formula,
    parse_formula,
)
from .graph import (
    CompositionGraph,
    ElementFeatureTable,
    MissingElementFeature,
    build_graph,
    fallback_element_features,
    load_element_features,
)
from .recipes import (
    IngestResult,
    KnowledgeBase,
    PrecursorVocabulary,
    Recipe,
    RecipeRecord,
    Reject,
    build_vocab_and_kb,
    labelize,
    load_recipes,
    split_dataset,
    write_recipes,
    write_rejects,
)

__all__ = [
    "ATOMIC_NUMBER",
    "COMMON_ELEMENTS",
    "Composition",
    "CompositionGraph",
    "ElementFeatureTable",
    "FormulaError",
    "IngestResult",
    "KnowledgeBase",
    "MissingElementFeature",
    "N_ELEMENTS",
    "PrecursorVocabulary",
    "Recipe",
    "RecipeRecord",
    "Reject",
    "SYMBOLS",
    "build_graph",
    "build_vocab_and_kb",
    "canonical_formula",
    "composition_from_amounts",
    "fallback_element_features",
    "format_formula",
    "labelize",
    "load_element_features",
    "load_recipes",
    "parse_formula",
    "split_dataset",
    "write_recipes",
    "write_rejects",
]
