"""Knowledge-graph harvesting from masked language models.

The pipeline: expand a relation's initial prompt into a weighted ensemble of
paraphrased templates, search the vocabulary for the top candidate entity
tuples by minimum token log-likelihood with an exact pruned DFS, then rescore
by full prompt-weighted consistency and select the best into a knowledge
graph. An evaluation harness ranks harvested or reference tuples against
synthesized negatives and reports precision-recall curves.
"""

from .backends import MockScorer, MockTable, RemoteScorer, load_mock_table, make_scorer
from .errors import (
    KGHarvestError,
    ParseError,
    ProtocolError,
    ServiceError,
    StageError,
    ValidationError,
)
from .evaluation import (
    EvalSample,
    PRCurve,
    generate_negatives,
    load_positives_tsv,
    pr_curve,
    score_samples,
)
from .prompts import (
    collect_prompts,
    dedup,
    instantiate,
    load_prompt_set,
    save_prompt_set,
    strip_entities,
    weight_prompts,
)
from .relations import (
    EntityTuple,
    KnowledgeGraph,
    PromptTemplate,
    Provenance,
    RelationSchema,
    ScoredTuple,
    StatsReport,
    WeightedPromptSet,
    kg_stats,
    load_relation,
    read_kg,
    save_relation,
    write_kg,
)
from .scoring import (
    CompatibilityBreakdown,
    Filled,
    Masked,
    MaskedQuery,
    PartiallyFilled,
    ScorerInfo,
    entity_logprob,
    pair_compatibility,
)
from .search import (
    BaseK,
    ProposalHeap,
    SearchConfig,
    TopHalf,
    TopK,
    consistency,
    harvest,
    propose_candidates,
    rescore_and_select,
)

__version__ = "0.1.0"

__all__ = [
    "BaseK",
    "CompatibilityBreakdown",
    "EntityTuple",
    "EvalSample",
    "Filled",
    "KGHarvestError",
    "KnowledgeGraph",
    "Masked",
    "MaskedQuery",
    "MockScorer",
    "MockTable",
    "PRCurve",
    "ParseError",
    "PartiallyFilled",
    "PromptTemplate",
    "ProposalHeap",
    "ProtocolError",
    "Provenance",
    "RelationSchema",
    "RemoteScorer",
    "ScoredTuple",
    "ScorerInfo",
    "SearchConfig",
    "ServiceError",
    "StageError",
    "StatsReport",
    "TopHalf",
    "TopK",
    "ValidationError",
    "WeightedPromptSet",
    "collect_prompts",
    "consistency",
    "dedup",
    "entity_logprob",
    "generate_negatives",
    "harvest",
    "instantiate",
    "kg_stats",
    "load_mock_table",
    "load_positives_tsv",
    "load_prompt_set",
    "load_relation",
    "make_scorer",
    "pair_compatibility",
    "pr_curve",
    "propose_candidates",
    "read_kg",
    "rescore_and_select",
    "save_prompt_set",
    "save_relation",
    "score_samples",
    "strip_entities",
    "weight_prompts",
    "write_kg",
]
