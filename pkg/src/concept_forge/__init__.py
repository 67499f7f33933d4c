"""Compositional concept extraction from embedding matrices."""

__version__ = "0.1.0"

from .baselines import ace_concepts, dictlearn_concepts, pca_concepts, random_concepts, seminmf_concepts
from .cce import CCEConfig, ExtractionResult, Subspace, cce_extract, learn_concepts, orthogonal_reject, silhouette
from .concepts import ConceptSet
from .embedding_store import (
    CenteringStats,
    EmbeddingMatrix,
    Labeling,
    center_standardize,
    load_embeddings,
    load_labels,
    save_embeddings,
    save_labels,
)
from .metrics import (
    MetricsReport,
    average_precision,
    compositionality_score,
    concept_score,
    evaluate,
    map_composition,
    match_concepts,
    nnls,
    roc_auc,
    score_matrix,
)
from .pipeline import ExperimentPlan, emit_report, run_plan
from .synthetic import GroundTruth, SyntheticSpec, generate, verify_theorem_properties

__all__ = [n for n in dir() if not n.startswith("_")]
