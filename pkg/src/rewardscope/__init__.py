"""Causal effect of a binary text attribute on a reward model's score.

The naive gap between attribute-present and attribute-absent responses
confounds the attribute with everything correlated with it. This package
estimates the effect with counterfactual rewrites instead, and rewrites
each rewrite back again so both sides of every contrast carry the same
rewriting artifacts. A synthetic world with known ground truth verifies
the estimators end to end.

Typical entry points: `load_dataset`, `batch_rewrite`, `score_batch`,
`all_estimates`, and `evaluate_run` for the whole pipeline at once.
"""

from .cache import CacheStats, DiskCache, canonical_json, content_key
from .config import (
    DatasetConfig,
    EstimatorConfig,
    RewardConfig,
    RewriterConfig,
    RunConfig,
    SyntheticConfig,
    build_backend,
    build_client,
)
from .data import (
    Dataset,
    LabeledExample,
    cell_counts,
    dataset_digest,
    default_class_size,
    filter_by_length,
    induce_correlation,
    load_dataset,
    save_dataset,
)
from .errors import (
    BatchRewriteError,
    CheckFailedError,
    ConfigError,
    DataError,
    EstimationError,
    RemoteServiceError,
    RewardScopeError,
    RewriteError,
    ScoringError,
)
from .estimators import (
    CONTRASTIVE_RATE_ATE,
    CONTRASTIVE_RATE_ATT,
    CONTRASTIVE_RATE_ATU,
    NAIVE,
    RATE_ATE,
    RATE_ATT,
    RATE_ATU,
    SINGLE_ATE,
    SINGLE_ATT,
    SINGLE_ATU,
    EffectEstimate,
    ScoredRecord,
    all_estimates,
    cohens_d,
    contrastive_rate_estimates,
    naive_estimate,
    normal_ci,
    rate_estimates,
    rate_summand,
    score_records,
    single_rewrite_estimates,
    single_summand,
    write_summands_csv,
)
from .pipeline import RunResult, evaluate_run, sample_dump_run, synthetic_run
from .rewards import (
    ConstantReward,
    HttpRewardBackend,
    KeywordBonusReward,
    LengthScaledReward,
    RewardBackend,
    contrastive_of_pointwise,
    make_mock_backend,
    score_batch,
    score_contrastive_batch,
)
from .rewriting import (
    ChatClient,
    HttpChatClient,
    IdentityStubClient,
    RewriteInstruction,
    RewriteRecord,
    ScriptedStubClient,
    batch_rewrite,
    double_rewrite,
    rewrite_once,
)
from .synthetic import (
    AdditiveLatentReward,
    SyntheticReward,
    SyntheticWorld,
    run_shift_sweep,
    run_unbiasedness_check,
    sample_dataset,
    simulate_scored_records,
    synthetic_rewrite,
    true_effects,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
