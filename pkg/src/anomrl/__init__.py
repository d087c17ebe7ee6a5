"""Desk-scale engine for staged video-anomaly reasoning: a rigid tagged
response grammar, verifiable anomaly-aware rewards, group-relative policy
optimization, a synthetic training environment, and evaluation metrics.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .grammar import (
    AnomalyJudgment,
    ParseError,
    ParseErrorClass,
    ParseOutcome,
    QuestionKind,
    RiskLevel,
    StageKind,
    StructuredResponse,
    TemporalInterval,
    expected_depth,
    normalize_category,
    parse_response,
    reasoning_depth,
    render_response,
    validate_response,
)
from .data import (
    DatasetError,
    QuestionRecord,
    Taxonomy,
    TemplateLibrary,
    VideoMeta,
    build_gold_response,
    canonical_open_answer,
    instantiate_questions,
    load_records,
    record_from_dict,
    record_to_dict,
    save_records,
)
from .rewards import (
    EmptyTimelineError,
    RewardBreakdown,
    RewardConfig,
    Side,
    VideoTimeline,
    accuracy_reward,
    depth_reward,
    excise_boundary,
    excise_interval,
    format_reward,
    risk_reward,
    score_response,
    token_f1,
    total_reward,
    verification_reward,
)
from .grpo import (
    CategoricalSequencePolicy,
    Completion,
    DifferentiablePolicy,
    GrpoConfig,
    Policy,
    RolloutGroup,
    SftBatch,
    compute_advantages,
    finite_diff_check,
    grpo_objective,
    grpo_objective_and_grad,
    sft_loss,
    sft_loss_and_grad,
    train_sft,
)
from .metrics import (
    EvalRecord,
    JointReport,
    StageReport,
    bleu,
    depth_alignment,
    joint_outcomes,
    mcq_accuracy,
    meteor_basic,
    rouge,
    stage_report,
)
from .simenv import (
    CorpusSpec,
    FeatureVector,
    SyntheticVideo,
    ToyPolicy,
    ToyPolicySpec,
    generate_corpus,
    observe,
    sample_structured,
    timeline,
)
from .oracle import (
    EndpointConfig,
    HttpJudge,
    HttpPolicyOracle,
    InProcessOracle,
    OracleMalformed,
    OracleUnavailable,
    ReplayOracle,
    RuleJudge,
)
from .train import train_rl
