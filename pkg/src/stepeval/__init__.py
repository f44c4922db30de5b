"""Step-by-step visual reasoning benchmark toolkit.

Three pillars: curated reasoning-chain datasets with human verification,
reference-based judge scoring with a ten-attribute scorecard, and best-of-B
inference scaling with exact model-call accounting.
"""

from .core import (
    BenchmarkSample,
    Category,
    ImageKind,
    ImageRef,
    JudgeScorecard,
    MetricName,
    ReasoningChain,
    ReasoningStep,
    ScorecardError,
    StageFields,
    VerificationState,
    Violation,
    recompute_overall,
    validate_sample,
)
from .dataset import (
    Dataset,
    DatasetError,
    ExportReport,
    SftConversation,
    SftTurn,
    export_sft,
    filter_min_steps,
    iter_sft_conversations,
    load_dataset,
    save_dataset,
)
from .gateway import (
    CallLedger,
    Candidate,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    EndpointConfig,
    LedgerSnapshot,
    MockFailure,
    MockReply,
    MockTransport,
    ModelGateway,
    ProtocolError,
    TransportError,
)
from .judging import (
    FinalAnswerVerdict,
    JudgeError,
    StepEvalInput,
    build_step_eval_messages,
    judge_final_answer,
    parse_scorecard,
    score_steps,
)
from .beam import (
    BeamConfig,
    CandidateSet,
    InferenceError,
    SelectionStrategy,
    StagePromptSet,
    beam_generate,
    default_stage_prompts,
    pick_default_strategy,
    select_best,
    stage_level_generate,
)
from .curation import (
    CurationStore,
    GenerationTask,
    IllegalEventError,
    LeaseManager,
    SampleStub,
    VerificationEvent,
    generate_chain,
    parse_generated_chain,
)
from .runner import (
    AggregateReport,
    EvaluationRun,
    RunConfig,
    SampleResult,
    aggregate,
    run_evaluation,
)
from .reporting import ReportFormat, parse_report, render_report

__version__ = "0.1.0"
