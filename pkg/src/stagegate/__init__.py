"""Staged synthetic-data generation with in-flight rejection of faulty trajectories."""

from .core import (
    Caps,
    CostLedger,
    RangeError,
    SampleRecord,
    Stage,
    StagePolicy,
    StageOutput,
    Trajectory,
    ValidationReport,
    bin_difficulty,
    validate_policy,
)
from .generators import (
    GeneratorBackend,
    HttpGenerator,
    SimulatedGenerator,
    SimulatorConfig,
    apply_chat_template,
)
from .pipeline import PipelineRun, PromptSpec, StagedPipeline, run_batch
from .validators import (
    RuleConfig,
    parse_arith_claims,
    extract_final_answer,
    validate_problem,
    validate_solution,
    validate_trace,
)

__version__ = "0.1.0"

__all__ = [
    "Caps",
    "CostLedger",
    "GeneratorBackend",
    "HttpGenerator",
    "PipelineRun",
    "PromptSpec",
    "RangeError",
    "RuleConfig",
    "SampleRecord",
    "SimulatedGenerator",
    "SimulatorConfig",
    "Stage",
    "StagePolicy",
    "StageOutput",
    "StagedPipeline",
    "Trajectory",
    "ValidationReport",
    "apply_chat_template",
    "bin_difficulty",
    "extract_final_answer",
    "parse_arith_claims",
    "run_batch",
    "validate_policy",
    "validate_problem",
    "validate_solution",
    "validate_trace",
    "__version__",
]
