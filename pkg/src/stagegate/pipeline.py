"""Staged generation with strict-exceed gating and in-flight rejection.

A trajectory advances through problem generation, a mid-solution checkpoint,
and full-solution completion.  After each of those stages its validation
score must strictly exceed the stage threshold or generation stops
immediately and nothing further is produced.  Survivors face the final
evaluation: the completed solution's checks, near-duplicate rejection, and
judge scoring, whose product decides acceptance.

Batches run in waves of ``batch_size``: generation within a wave may run on
worker threads (per-trajectory state is single-owner), while final
evaluation is serialized in prompt order so the shared duplicate index and
the running solution-length estimate stay deterministic.
"""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .core import (
    ACCEPTED,
    CostLedger,
    REJECTED,
    SampleRecord,
    Stage,
    StagePolicy,
    StageOutput,
    Trajectory,
    ValidationReport,
    bin_difficulty,
    fraction_to_decimal_str,
    ledger_to_dict,
    sample_to_dict,
    stage_output_to_dict,
    validate_policy,
)
from .evaluation import (
    DegenerateTextError,
    JudgeVerdict,
    MinHashIndex,
    final_validator_product,
    judge_sample,
    minhash_signature,
)
from .generators import (
    BackendError,
    BackendUnreachable,
    GeneratorBackend,
    StageRequest,
    generate_stage,
)
from .validators import RuleConfig, extract_final_answer, validate_problem, validate_solution, validate_trace

logger = logging.getLogger(__name__)

PROBLEM_INSTRUCTION = (
    "Write one new grade-school math word problem. Reply with only the problem text."
)
SOLVE_INSTRUCTION = (
    "Solve the following problem step by step. Finish with one line of the form "
    "'#### <answer>'.\n\nProblem: {problem}"
)


@dataclass(frozen=True)
class PromptSpec:
    """One unit of work: the generation prompt plus externally supplied metadata."""

    text: str
    difficulty: float = 50.0
    tag: str = "all"


@dataclass(frozen=True)
class PipelineRun:
    """Run-level configuration for a batch."""

    policy: StagePolicy
    batch_size: int = 64
    target_accepted: int | None = None
    seed: int = 42
    sampling_mix: float = 0.30
    problem_temperature: float = 0.7
    solution_temperature: float = 0.0
    judge_reject_below: int = 3
    bootstrap_solution_tokens: int = 400
    max_workers: int = 4
    retries: int = 3
    exemplars: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.target_accepted is not None and self.target_accepted < 1:
            raise ValueError("target_accepted must be at least 1")
        if not 0 <= self.sampling_mix <= 1:
            raise ValueError("sampling_mix must lie in [0, 1]")


@dataclass
class RunSummary:
    """Aggregate outcome of a batch run."""

    gating: bool
    prompts_consumed: int = 0
    accepted: int = 0
    rejected_by_stage: dict[int, int] = field(default_factory=dict)
    total_tokens: int = 0
    elapsed_seconds: float = 0.0
    partial: bool = False
    failure: str | None = None

    @property
    def pairs_per_hour(self) -> float:
        if self.elapsed_seconds <= 0:
            return 0.0
        return self.accepted / self.elapsed_seconds * 3600.0

    @property
    def tokens_per_second(self) -> float:
        if self.elapsed_seconds <= 0:
            return 0.0
        return self.total_tokens / self.elapsed_seconds

    @property
    def acceptance_rate(self) -> float:
        if self.prompts_consumed == 0:
            return 0.0
        return self.accepted / self.prompts_consumed

    def to_dict(self) -> dict[str, Any]:
        return {
            "gating": self.gating,
            "prompts_consumed": self.prompts_consumed,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "rejected_by_stage": {str(k): v for k, v in sorted(self.rejected_by_stage.items())},
            "total_tokens": self.total_tokens,
            "elapsed_seconds": self.elapsed_seconds,
            "pairs_per_hour": self.pairs_per_hour,
            "tokens_per_second": self.tokens_per_second,
            "partial": self.partial,
            "failure": self.failure,
        }

    def to_text(self) -> str:
        lines = [
            f"gating             {'on' if self.gating else 'off'}",
            f"prompts consumed   {self.prompts_consumed}",
            f"accepted           {self.accepted} ({self.acceptance_rate:.1%})",
            f"total tokens       {self.total_tokens}",
            "rejections         "
            + (
                ", ".join(f"S{k}:{v}" for k, v in sorted(self.rejected_by_stage.items()))
                or "none"
            ),
            f"throughput         {self.pairs_per_hour:,.0f} pairs/hr | "
            f"{self.tokens_per_second:,.0f} tokens/s",
        ]
        if self.partial:
            lines.append(f"PARTIAL RUN        {self.failure}")
        return "\n".join(lines)


class SolutionLengthEstimator:
    """Running mean of accepted solution lengths, with a fixed bootstrap."""

    def __init__(self, bootstrap: int = 400):
        self.bootstrap = bootstrap
        self._total = 0
        self._count = 0

    @property
    def value(self) -> float:
        if self._count == 0:
            return float(self.bootstrap)
        return self._total / self._count

    def update(self, solution_tokens: int) -> None:
        self._total += solution_tokens
        self._count += 1


def checkpoint_tokens(cutoff: float, expected_solution_tokens: float) -> int:
    """Token budget for the mid-solution checkpoint."""
    if not 0 < cutoff <= 1:
        raise ValueError("cutoff must lie in (0, 1]")
    return max(1, int(round(cutoff * expected_solution_tokens)))


_WORD_RE = re.compile(r"\S+")


def word_slice(text: str, k: int) -> str:
    """Prefix of ``text`` containing its first ``k`` whitespace words."""
    matches = list(_WORD_RE.finditer(text))
    if k >= len(matches):
        return text
    if k < 1:
        return ""
    return text[: matches[k - 1].end()]


@dataclass(frozen=True)
class CheckpointResult:
    """Outcome of the mid-solution checkpoint."""

    visible_text: str     # what the stage-2 validator audits
    recorded_text: str    # what the trajectory records for stage 2
    tokens: int
    solution_complete: bool
    full_text: str | None  # set when a fallback generated everything up front


def midsolution_checkpoint(
    backend: GeneratorBackend,
    request: StageRequest,
    *,
    cutoff: float,
    expected_solution_tokens: float,
    retries: int = 3,
) -> CheckpointResult:
    """Generate the solution prefix up to ``cutoff`` of the expected length.

    Backends without continuation support fall back to a single-shot full
    generation whose tokens are all charged at this stage; the cutoff then
    only determines the slice handed to the validator.  That degradation is
    logged because it forfeits the savings of a genuine early stop.
    """
    budget = checkpoint_tokens(cutoff, expected_solution_tokens)
    if backend.capabilities.supports_continuation:
        result = generate_stage(
            backend,
            StageRequest(
                stage=Stage.MID_SOLUTION,
                instruction=request.instruction,
                prompt_index=request.prompt_index,
                problem=request.problem,
                temperature=request.temperature,
                max_tokens=budget,
            ),
            retries=retries,
        )
        return CheckpointResult(result.text, result.text, result.tokens, result.finished, None)
    logger.warning(
        "backend lacks continuation support; generating the full solution at the "
        "checkpoint and charging all of it (no early-stop savings)"
    )
    result = generate_stage(
        backend,
        StageRequest(
            stage=Stage.MID_SOLUTION,
            instruction=request.instruction,
            prompt_index=request.prompt_index,
            problem=request.problem,
            temperature=request.temperature,
            max_tokens=None,
        ),
        retries=retries,
    )
    visible = word_slice(result.text, budget)
    return CheckpointResult(visible, result.text, result.tokens, True, result.text)


@dataclass
class StagedResult:
    """Everything produced for one prompt: the trajectory, reports, and sample."""

    trajectory: Trajectory
    reports: dict[int, ValidationReport]
    sample: SampleRecord | None = None
    evaluation: dict[str, Any] | None = None
    latent_good: bool | None = None
    prompt_spec: PromptSpec | None = None

    @property
    def ledger(self) -> CostLedger:
        return CostLedger.from_trajectory(self.trajectory)


@dataclass
class _Intermediate:
    prompt: PromptSpec
    index: int
    outputs: list[StageOutput]
    reports: dict[int, ValidationReport]
    problem: str | None = None
    full_solution: str | None = None
    rejected_at: Stage | None = None
    rule_hits: tuple[str, ...] = ()


class StagedPipeline:
    """Drives per-prompt staged generation against a backend pair."""

    def __init__(
        self,
        run: PipelineRun,
        backend: GeneratorBackend,
        judge_backend: GeneratorBackend | None = None,
        *,
        rule_config: RuleConfig | None = None,
        dedup_index: MinHashIndex | None = None,
    ):
        for violation in validate_policy(run.policy):
            # Callers own policy validation; an unreachable stage still has
            # well-defined behavior (everything stops there), so only warn.
            logger.warning("stage policy violation: %s", violation)
        self.run = run
        self.backend = backend
        self.judge_backend = judge_backend if judge_backend is not None else backend
        self.rule_config = rule_config or RuleConfig(caps=run.policy.caps)
        self.dedup_index = dedup_index if dedup_index is not None else MinHashIndex()
        self.length_estimator = SolutionLengthEstimator(run.bootstrap_solution_tokens)

    # -- per-prompt flow --------------------------------------------------------

    def _trajectory_seed(self, index: int) -> int:
        return (self.run.seed * 0x9E3779B97F4A7C15 + index) % 2**63

    def _few_shot(self, index: int) -> tuple[str, ...]:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.run.seed, spawn_key=(index, 7))
        )
        if rng.random() >= self.run.sampling_mix or not self.run.exemplars:
            return ()
        count = min(2, len(self.run.exemplars))
        picks = rng.choice(len(self.run.exemplars), size=count, replace=False)
        return tuple(self.run.exemplars[int(i)] for i in picks)

    def _gate(self, report: ValidationReport, stage: Stage) -> bool:
        """True when generation may continue: score strictly exceeds the threshold."""
        return report.score > self.run.policy.thresholds[int(stage) - 1]

    def generate_and_gate(
        self, prompt: PromptSpec, index: int, *, expected_solution_tokens: float, gating: bool = True
    ) -> _Intermediate:
        """Stages 1-3 for one prompt; shared state is never touched here."""
        inter = _Intermediate(prompt=prompt, index=index, outputs=[], reports={})
        policy = self.run.policy

        try:
            problem_result = generate_stage(
                self.backend,
                StageRequest(
                    stage=Stage.PROBLEM,
                    instruction=f"{prompt.text}\n\n{PROBLEM_INSTRUCTION}",
                    prompt_index=index,
                    temperature=self.run.problem_temperature,
                    few_shot_exemplars=self._few_shot(index),
                ),
                retries=self.run.retries,
            )
        except BackendUnreachable:
            raise
        except BackendError:
            inter.rejected_at = Stage.PROBLEM
            inter.rule_hits = ("backend.error",)
            return inter
        problem = problem_result.text
        inter.problem = problem
        inter.outputs.append(StageOutput(Stage.PROBLEM, problem, problem_result.tokens))
        report = validate_problem(problem, self.rule_config)
        inter.reports[1] = report
        if gating and not self._gate(report, Stage.PROBLEM):
            inter.rejected_at = Stage.PROBLEM
            inter.rule_hits = report.failed_rule_ids()
            return inter

        solve_instruction = SOLVE_INSTRUCTION.format(problem=problem)
        try:
            checkpoint = midsolution_checkpoint(
                self.backend,
                StageRequest(
                    stage=Stage.MID_SOLUTION,
                    instruction=solve_instruction,
                    prompt_index=index,
                    problem=problem,
                    temperature=self.run.solution_temperature,
                ),
                cutoff=policy.midsol_cutoff,
                expected_solution_tokens=expected_solution_tokens,
                retries=self.run.retries,
            )
        except BackendUnreachable:
            raise
        except BackendError:
            inter.rejected_at = Stage.MID_SOLUTION
            inter.rule_hits = ("backend.error",)
            return inter
        inter.outputs.append(
            StageOutput(Stage.MID_SOLUTION, checkpoint.recorded_text, checkpoint.tokens)
        )
        report = validate_trace(problem, checkpoint.visible_text, self.rule_config)
        inter.reports[2] = report
        if gating and not self._gate(report, Stage.MID_SOLUTION):
            inter.rejected_at = Stage.MID_SOLUTION
            inter.rule_hits = report.failed_rule_ids()
            return inter

        if checkpoint.full_text is not None:
            full = checkpoint.full_text
        elif checkpoint.solution_complete:
            # Degenerate cutoff: the solution already ended inside the
            # checkpoint budget, so there is nothing left to generate.
            full = checkpoint.recorded_text
        else:
            try:
                continuation = generate_stage(
                    self.backend,
                    StageRequest(
                        stage=Stage.FULL_SOLUTION,
                        instruction=solve_instruction,
                        prompt_index=index,
                        problem=problem,
                        prefix=checkpoint.recorded_text,
                        temperature=self.run.solution_temperature,
                    ),
                    retries=self.run.retries,
                )
            except BackendUnreachable:
                raise
            except BackendError:
                inter.rejected_at = Stage.FULL_SOLUTION
                inter.rule_hits = ("backend.error",)
                return inter
            full = checkpoint.recorded_text + continuation.text
            inter.outputs.append(StageOutput(Stage.FULL_SOLUTION, full, continuation.tokens))
        inter.full_solution = full
        report = validate_solution(problem, full, self.rule_config)
        inter.reports[3] = report
        if gating and not self._gate(report, Stage.FULL_SOLUTION):
            inter.rejected_at = Stage.FULL_SOLUTION
            inter.rule_hits = report.failed_rule_ids()
        return inter

    def finalize(self, inter: _Intermediate) -> StagedResult:
        """Final evaluation (serialized): completed-solution checks, dedup, judge."""
        seed = self._trajectory_seed(inter.index)
        if inter.rejected_at is not None:
            trajectory = Trajectory(
                prompt=inter.prompt.text,
                stage_outputs=tuple(inter.outputs),
                status=REJECTED,
                rejected_at=inter.rejected_at,
                rule_hits=inter.rule_hits,
                seed=seed,
            )
            return StagedResult(trajectory, inter.reports, prompt_spec=inter.prompt)

        assert inter.problem is not None and inter.full_solution is not None
        solution_report = inter.reports[3]
        duplicate = False
        verdict: JudgeVerdict | None = None
        rule_hits: tuple[str, ...] = ()
        signature: tuple[int, ...] = ()
        judge_output: StageOutput | None = None

        if solution_report.all_passed:
            sample_id = f"sample-{inter.index}"
            try:
                sig = minhash_signature(
                    f"{inter.problem}\n\n{inter.full_solution}", self.dedup_index.params
                )
            except DegenerateTextError:
                duplicate = True
                rule_hits = ("eval.degenerate_text",)
            else:
                signature = tuple(int(v) for v in sig)
                duplicate = self.dedup_index.is_duplicate(sig, sample_id)
                if duplicate:
                    rule_hits = ("eval.duplicate",)
            if not duplicate:
                verdict = judge_sample(
                    inter.problem,
                    inter.full_solution,
                    self.judge_backend,
                    prompt_index=inter.index,
                    reject_below=self.run.judge_reject_below,
                )
                if verdict.tokens > 0:
                    judge_output = StageOutput(Stage.EVALUATION, verdict.reply, verdict.tokens)
                if not verdict.accepted and verdict.rule_hit:
                    rule_hits = (verdict.rule_hit,)
        else:
            rule_hits = solution_report.failed_rule_ids()

        quality = final_validator_product(
            solution_report, duplicate, verdict.accepted if verdict else False
        )
        outputs = list(inter.outputs)
        if judge_output is not None:
            outputs.append(judge_output)

        trajectory = Trajectory(
            prompt=inter.prompt.text,
            stage_outputs=tuple(outputs),
            status=ACCEPTED if quality == 1 else REJECTED,
            rejected_at=None if quality == 1 else Stage.EVALUATION,
            rule_hits=rule_hits,
            seed=seed,
        )
        evaluation = {
            "solution_ok": solution_report.all_passed,
            "duplicate": duplicate,
            "judge_score": verdict.score if verdict else None,
            "judge_accepted": verdict.accepted if verdict else False,
            "quality": quality,
        }
        result = StagedResult(
            trajectory,
            inter.reports,
            evaluation=evaluation,
            latent_good=self._latent_label(inter.index),
            prompt_spec=inter.prompt,
        )
        if quality == 1:
            final_value = extract_final_answer(inter.full_solution, self.rule_config.final_marker)
            assert final_value is not None  # guaranteed by the solution checks
            result.sample = SampleRecord(
                problem=inter.problem,
                solution=inter.full_solution,
                final_answer=fraction_to_decimal_str(final_value),
                tier=bin_difficulty(inter.prompt.difficulty),
                difficulty_scalar=inter.prompt.difficulty,
                judge_score=verdict.score if verdict else None,
                minhash_signature=signature,
                ledger=result.ledger,
            )
        return result

    def _latent_label(self, index: int) -> bool | None:
        ground_truth = getattr(self.backend, "ground_truth", None)
        if ground_truth is None:
            return None
        return bool(ground_truth(index))

    def run_one(
        self, prompt: PromptSpec, index: int, *, gating: bool = True
    ) -> StagedResult:
        """Full staged flow for a single prompt, including final evaluation."""
        inter = self.generate_and_gate(
            prompt, index, expected_solution_tokens=self.length_estimator.value, gating=gating
        )
        result = self.finalize(inter)
        self._observe(result)
        return result

    def _observe(self, result: StagedResult) -> None:
        if result.trajectory.status == ACCEPTED:
            solution_tokens = sum(
                o.tokens
                for o in result.trajectory.stage_outputs
                if o.stage in (Stage.MID_SOLUTION, Stage.FULL_SOLUTION)
            )
            self.length_estimator.update(solution_tokens)


def _result_to_record(result: StagedResult, index: int, tag: str) -> dict[str, Any]:
    trajectory = result.trajectory
    record = {
        "id": index,
        "kind": "trajectory",
        "tag": tag,
        "prompt": trajectory.prompt,
        "difficulty": result.prompt_spec.difficulty if result.prompt_spec else None,
        "seed": trajectory.seed,
        "stage_outputs": [stage_output_to_dict(o) for o in trajectory.stage_outputs],
        "status": trajectory.status,
        "rejected_at": int(trajectory.rejected_at) if trajectory.rejected_at else None,
        "rule_hits": list(trajectory.rule_hits),
        "gate_scores": {str(s): r.score for s, r in result.reports.items()},
        "stage_failed_rules": {
            str(s): list(r.failed_rule_ids()) for s, r in result.reports.items()
        },
        "ledger": ledger_to_dict(result.ledger),
        "eval": result.evaluation,
        "latent_good": result.latent_good,
    }
    return record


def run_batch(
    pipeline: StagedPipeline,
    prompts: Iterable[PromptSpec],
    *,
    trajectory_sink=None,
    sample_sink=None,
    gating: bool = True,
) -> RunSummary:
    """Drive prompts through the pipeline until exhaustion or the accepted target.

    Generation within each wave may run on threads; final evaluation and all
    sink writes happen serially in prompt order, so outputs are byte-identical
    across runs with the same seed and prompt set.  When ``target_accepted``
    is reached mid-wave, the remaining already-generated trajectories of that
    wave are discarded unrecorded.
    """
    run = pipeline.run
    summary = RunSummary(gating=gating)
    start = time.perf_counter()
    prompt_iter = enumerate(prompts)
    sample_count = 0

    def emit(sink, record) -> bool:
        if sink is None:
            return True
        try:
            sink.emit(record)
        except OSError as exc:
            summary.partial = True
            summary.failure = f"sink write failed: {exc}"
            return False
        return True

    done = False
    while not done:
        wave: list[tuple[int, PromptSpec]] = []
        for _ in range(run.batch_size):
            try:
                wave.append(next(prompt_iter))
            except StopIteration:
                done = True
                break
        if not wave:
            break
        expected = pipeline.length_estimator.value
        if run.max_workers > 1 and len(wave) > 1:
            with ThreadPoolExecutor(max_workers=run.max_workers) as pool:
                intermediates = list(
                    pool.map(
                        lambda item: pipeline.generate_and_gate(
                            item[1], item[0], expected_solution_tokens=expected, gating=gating
                        ),
                        wave,
                    )
                )
        else:
            intermediates = [
                pipeline.generate_and_gate(
                    spec, idx, expected_solution_tokens=expected, gating=gating
                )
                for idx, spec in wave
            ]
        for (index, spec), inter in zip(wave, intermediates):
            result = pipeline.finalize(inter)
            pipeline._observe(result)
            summary.prompts_consumed += 1
            summary.total_tokens += result.trajectory.total_tokens
            if result.trajectory.status == ACCEPTED:
                summary.accepted += 1
            elif result.trajectory.rejected_at is not None:
                stage = int(result.trajectory.rejected_at)
                summary.rejected_by_stage[stage] = summary.rejected_by_stage.get(stage, 0) + 1
            if not emit(trajectory_sink, _result_to_record(result, index, spec.tag)):
                summary.elapsed_seconds = time.perf_counter() - start
                return summary
            if result.sample is not None:
                record = {"id": index, "kind": "sample", "tag": spec.tag}
                record.update(sample_to_dict(result.sample))
                if not emit(sample_sink, record):
                    summary.elapsed_seconds = time.perf_counter() - start
                    return summary
                sample_count += 1
            if run.target_accepted is not None and summary.accepted >= run.target_accepted:
                done = True
                break
    summary.elapsed_seconds = time.perf_counter() - start
    return summary
