"""Self-play data engine: one policy plays questioner, responder, and
verifier over a document corpus, and the scored rollouts become training
batches for an external GRPO-style trainer."""

__version__ = "0.1.0"

from .batching import (
    ObjectiveGroup,
    QuestionerSample,
    ResponderGroup,
    SelectionReport,
    TrainingRecord,
    VerifierGroup,
    batch_advantages,
    build_step_batch,
    emit_records,
    group_advantages,
    grpo_objective,
    read_records,
    select_questioner_samples,
    select_responder_groups,
    select_verifier_groups,
)
from .curriculum import HistoryMemory, assemble_context, grounding_filter, sample_documents
from .errors import (
    BackendError,
    ConfigError,
    CorpusExhausted,
    DegenerateGroup,
    DomainError,
    EmptyCluster,
    EmptyContext,
    EmptyDocument,
    IntegrityError,
    RestoreError,
    ShapeError,
    SpellError,
)
from .evaluation import middle_truncate, pass_at_k, run_eval, score_item
from .orchestrator import LoopConfig, LoopRunner, LoopState, restore_checkpoint, save_checkpoint
from .rewards import (
    RewardConfig,
    RolloutGroup,
    cem_match,
    majority_vote,
    questioner_reward,
    responder_reward,
    score_rollout_group,
    verifier_rewards,
)
from .types import (
    ALL_TASKS,
    TASK_FINANCIAL_MATH,
    TASK_GENERAL_QA,
    TASK_MULTIPLE_CHOICE,
    DocumentCluster,
    EvalItem,
    HistoryEntry,
    QuestionSpec,
    RawDocument,
)

__all__ = [
    "__version__",
    "ALL_TASKS",
    "TASK_FINANCIAL_MATH",
    "TASK_GENERAL_QA",
    "TASK_MULTIPLE_CHOICE",
    "BackendError",
    "ConfigError",
    "CorpusExhausted",
    "DegenerateGroup",
    "DomainError",
    "DocumentCluster",
    "EmptyCluster",
    "EmptyContext",
    "EmptyDocument",
    "EvalItem",
    "HistoryEntry",
    "HistoryMemory",
    "IntegrityError",
    "LoopConfig",
    "LoopRunner",
    "LoopState",
    "ObjectiveGroup",
    "QuestionSpec",
    "QuestionerSample",
    "RawDocument",
    "ResponderGroup",
    "RestoreError",
    "RewardConfig",
    "RolloutGroup",
    "SelectionReport",
    "ShapeError",
    "SpellError",
    "TrainingRecord",
    "VerifierGroup",
    "assemble_context",
    "batch_advantages",
    "build_step_batch",
    "cem_match",
    "emit_records",
    "group_advantages",
    "grounding_filter",
    "grpo_objective",
    "majority_vote",
    "middle_truncate",
    "pass_at_k",
    "questioner_reward",
    "read_records",
    "responder_reward",
    "restore_checkpoint",
    "run_eval",
    "sample_documents",
    "save_checkpoint",
    "score_item",
    "score_rollout_group",
    "select_questioner_samples",
    "select_responder_groups",
    "select_verifier_groups",
    "verifier_rewards",
]
