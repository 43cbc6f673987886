from .dataset import (ConceptCatalog, JoinError, MissingField, SampleRow, SchemaError, ScoreDataset,
                      ScoreRow, filter_single_face, load_dataset, top_k)
from .scorer import ScorerAdapter, ScorerFailure, ScorerParseError, ScorerTimeout, run_scorer
from .suite import (HypothesisSpec, SpecError, Suite, auc_table, median_in_bin, run_hypothesis,
                    run_suite)

__all__ = [
    "ConceptCatalog", "JoinError", "MissingField", "SampleRow", "SchemaError", "ScoreDataset",
    "ScoreRow", "filter_single_face", "load_dataset", "top_k", "ScorerAdapter", "ScorerFailure",
    "ScorerParseError", "ScorerTimeout", "run_scorer", "HypothesisSpec", "SpecError", "Suite",
    "auc_table", "median_in_bin", "run_hypothesis", "run_suite",
]
