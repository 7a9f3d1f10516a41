"""Shared domain types for staged generation with in-flight rejection.

Generation proceeds through four stages: problem text, a mid-solution
checkpoint, the completed solution, and a final evaluation pass.  The types
here carry the per-stage outputs, the token ledger, and the gating policy
that the rest of the package operates on.  All of them are immutable value
objects; they can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from typing import Any, Sequence


class RangeError(ValueError):
    """A scalar input fell outside its documented range."""


class Stage(IntEnum):
    """Pipeline stages, in generation order."""

    PROBLEM = 1
    MID_SOLUTION = 2
    FULL_SOLUTION = 3
    EVALUATION = 4


#: Stages guarded by a score threshold; the evaluation stage is gated by the
#: product of its own binary checks instead.
GATE_STAGES = (Stage.PROBLEM, Stage.MID_SOLUTION, Stage.FULL_SOLUTION)

TIERS = ("easy", "medium", "hard")

# Trajectory terminal states.
IN_FLIGHT = "in_flight"
REJECTED = "rejected"
ACCEPTED = "accepted"


def bin_difficulty(d: float) -> str:
    """Map a difficulty scalar to its tier.

    Brackets are left-closed and right-open, except the top of the hard
    bracket (2000) which is included.
    """
    if not 1 <= d <= 2000:
        raise RangeError(f"difficulty scalar {d!r} outside [1, 2000]")
    if d < 50:
        return "easy"
    if d < 500:
        return "medium"
    return "hard"


@dataclass(frozen=True)
class Caps:
    """Numeric sanity caps shared by the trace and solution validators."""

    magnitude_relative: float = 100.0
    magnitude_absolute: int = 10_000_000
    word_min: int = 8
    word_max: int = 100


@dataclass(frozen=True)
class StagePolicy:
    """Gating policy for the three validated generation stages.

    A trajectory continues past stage ``t`` only when its validation score
    strictly exceeds ``thresholds[t-1]``.  With the default thresholds of
    ``K - 1`` every check must pass.
    """

    thresholds: tuple[int, int, int] = (5, 5, 5)
    check_counts: tuple[int, int, int] = (6, 6, 6)
    midsol_cutoff: float = 0.5
    lambda_cost: float = 0.0
    caps: Caps = field(default_factory=Caps)


def validate_policy(
    policy: StagePolicy, cost_template: Sequence[int] | None = None
) -> list[str]:
    """Return a list of policy violations; an empty list means the policy is usable.

    When ``cost_template`` is given it must be a strictly increasing vector of
    four per-stage token costs, reflecting that each stage is substantially
    more expensive than the one before it.
    """
    violations: list[str] = []
    if len(policy.thresholds) != 3 or len(policy.check_counts) != 3:
        violations.append("thresholds and check_counts must each have three entries")
        return violations
    for t, (lam, k) in enumerate(zip(policy.thresholds, policy.check_counts), start=1):
        if k <= 0:
            violations.append(f"stage {t}: check count must be positive, got {k}")
        if lam < 0:
            violations.append(f"stage {t}: threshold must be nonnegative, got {lam}")
        elif lam >= k:
            violations.append(
                f"stage {t}: unreachable stage (threshold {lam} >= check count {k}; "
                "the strict-exceed rule can never fire)"
            )
    if not 0 < policy.midsol_cutoff <= 1:
        violations.append(
            f"midsol_cutoff must lie in (0, 1], got {policy.midsol_cutoff} "
            "(a zero cutoff leaves no mid-solution text to validate)"
        )
    if policy.lambda_cost < 0:
        violations.append(f"lambda_cost must be nonnegative, got {policy.lambda_cost}")
    caps = policy.caps
    if caps.magnitude_relative <= 0 or caps.magnitude_absolute <= 0:
        violations.append("magnitude caps must be positive")
    if not 0 < caps.word_min < caps.word_max:
        violations.append(
            f"word bounds must satisfy 0 < min < max, got [{caps.word_min}, {caps.word_max}]"
        )
    if cost_template is not None:
        costs = list(cost_template)
        if len(costs) != 4:
            violations.append("cost template must have four entries")
        elif any(c <= 0 for c in costs):
            violations.append(f"cost template entries must be positive, got {costs}")
        elif any(a >= b for a, b in zip(costs, costs[1:])):
            violations.append(f"cost template must be strictly increasing, got {costs}")
    return violations


@dataclass(frozen=True)
class RuleOutcome:
    """Outcome of a single named check."""

    rule_id: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    """Per-stage validation result: one outcome per rule, score = rules passed."""

    stage: Stage
    outcomes: tuple[RuleOutcome, ...]

    def __post_init__(self) -> None:
        ids = [o.rule_id for o in self.outcomes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate rule ids in report: {ids}")

    @property
    def score(self) -> int:
        return sum(1 for o in self.outcomes if o.passed)

    @property
    def all_passed(self) -> bool:
        return all(o.passed for o in self.outcomes)

    def failed_rule_ids(self) -> tuple[str, ...]:
        return tuple(o.rule_id for o in self.outcomes if not o.passed)


@dataclass(frozen=True)
class StageOutput:
    """Text produced at one stage plus the incremental tokens it cost.

    ``text`` is the cumulative text visible at the stage (the full-solution
    stage repeats the mid-solution prefix verbatim); ``tokens`` counts only
    what was newly generated.
    """

    stage: Stage
    text: str
    tokens: int

    def __post_init__(self) -> None:
        if self.tokens <= 0:
            raise ValueError(
                f"stage {self.stage.name} recorded nonpositive token count {self.tokens}"
            )


@dataclass(frozen=True)
class Trajectory:
    """One prompt's journey through the staged pipeline."""

    prompt: str
    stage_outputs: tuple[StageOutput, ...]
    status: str
    rejected_at: Stage | None = None
    rule_hits: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.status not in (IN_FLIGHT, REJECTED, ACCEPTED):
            raise ValueError(f"unknown trajectory status {self.status!r}")
        if (self.status == REJECTED) != (self.rejected_at is not None):
            raise ValueError("rejected_at must be set exactly for rejected trajectories")
        stages = [o.stage for o in self.stage_outputs]
        if stages != sorted(stages) or len(set(stages)) != len(stages):
            raise ValueError("stage outputs must be ordered and unique per stage")
        if self.rejected_at is not None and any(s > self.rejected_at for s in stages):
            raise ValueError(
                f"trajectory rejected at {self.rejected_at.name} carries later stage outputs"
            )

    def output_at(self, stage: Stage) -> StageOutput | None:
        for out in self.stage_outputs:
            if out.stage == stage:
                return out
        return None

    @property
    def total_tokens(self) -> int:
        return sum(o.tokens for o in self.stage_outputs)

    @property
    def stop_stage(self) -> Stage | None:
        """The stage at which the trajectory stopped, or EVALUATION if it completed."""
        if self.status == REJECTED:
            return self.rejected_at
        if self.status == ACCEPTED:
            return Stage.EVALUATION
        return None


@dataclass(frozen=True)
class CostLedger:
    """Per-stage token increments and the cumulative cost through the stop stage."""

    delta_costs: tuple[int, int, int, int]
    stop_stage: Stage | None
    cumulative: int

    def __post_init__(self) -> None:
        if len(self.delta_costs) != 4 or any(c < 0 for c in self.delta_costs):
            raise ValueError(f"delta_costs must be four nonnegative integers, got {self.delta_costs}")
        if self.stop_stage is not None:
            spent = sum(self.delta_costs[: int(self.stop_stage)])
            if spent != self.cumulative:
                raise ValueError(
                    f"cumulative {self.cumulative} != tokens through stage "
                    f"{self.stop_stage.name} ({spent})"
                )
        if self.cumulative > self.full_cost:
            raise ValueError("cumulative cost exceeds the full-generation cost")

    @property
    def full_cost(self) -> int:
        return sum(self.delta_costs)

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory) -> "CostLedger":
        deltas = [0, 0, 0, 0]
        for out in trajectory.stage_outputs:
            deltas[int(out.stage) - 1] = out.tokens
        stop = trajectory.stop_stage
        cumulative = sum(deltas[: int(stop)]) if stop is not None else sum(deltas)
        return cls(tuple(deltas), stop, cumulative)


def fraction_to_decimal_str(value: Fraction) -> str:
    """Render a rational as an exact decimal string when one exists.

    Falls back to ``num/den`` notation for non-terminating expansions so the
    round trip stays lossless.
    """
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    twos = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    fives = 0
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return f"{value.numerator}/{value.denominator}"
    places = max(twos, fives)
    scaled = value * 10**places
    digits = str(abs(scaled.numerator)).rjust(places + 1, "0")
    sign = "-" if value < 0 else ""
    return f"{sign}{digits[:-places]}.{digits[-places:]}"


def parse_decimal_str(text: str) -> Fraction:
    """Inverse of :func:`fraction_to_decimal_str`."""
    return Fraction(text)


@dataclass(frozen=True)
class SampleRecord:
    """An accepted problem-solution pair with its quality metadata."""

    problem: str
    solution: str
    final_answer: str
    tier: str
    difficulty_scalar: float
    judge_score: int | None
    minhash_signature: tuple[int, ...]
    ledger: CostLedger

    def __post_init__(self) -> None:
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.judge_score is not None and not 1 <= self.judge_score <= 5:
            raise ValueError(f"judge score must be 1-5, got {self.judge_score}")

    @property
    def final_answer_value(self) -> Fraction:
        return parse_decimal_str(self.final_answer)


# --- serialization -----------------------------------------------------------
#
# Every type above round-trips through plain dicts so the record files stay
# line-delimited JSON with no custom encoders.


def caps_to_dict(caps: Caps) -> dict[str, Any]:
    return {
        "magnitude_relative": caps.magnitude_relative,
        "magnitude_absolute": caps.magnitude_absolute,
        "word_min": caps.word_min,
        "word_max": caps.word_max,
    }


def caps_from_dict(data: dict[str, Any]) -> Caps:
    return Caps(**data)


def policy_to_dict(policy: StagePolicy) -> dict[str, Any]:
    return {
        "thresholds": list(policy.thresholds),
        "check_counts": list(policy.check_counts),
        "midsol_cutoff": policy.midsol_cutoff,
        "lambda_cost": policy.lambda_cost,
        "caps": caps_to_dict(policy.caps),
    }


def policy_from_dict(data: dict[str, Any]) -> StagePolicy:
    return StagePolicy(
        thresholds=tuple(data["thresholds"]),
        check_counts=tuple(data["check_counts"]),
        midsol_cutoff=data["midsol_cutoff"],
        lambda_cost=data["lambda_cost"],
        caps=caps_from_dict(data["caps"]),
    )


def report_to_dict(report: ValidationReport) -> dict[str, Any]:
    return {
        "stage": int(report.stage),
        "outcomes": [
            {"rule_id": o.rule_id, "passed": o.passed, "detail": o.detail}
            for o in report.outcomes
        ],
    }


def report_from_dict(data: dict[str, Any]) -> ValidationReport:
    return ValidationReport(
        stage=Stage(data["stage"]),
        outcomes=tuple(
            RuleOutcome(o["rule_id"], o["passed"], o.get("detail", ""))
            for o in data["outcomes"]
        ),
    )


def stage_output_to_dict(out: StageOutput) -> dict[str, Any]:
    return {"stage": int(out.stage), "text": out.text, "tokens": out.tokens}


def stage_output_from_dict(data: dict[str, Any]) -> StageOutput:
    return StageOutput(Stage(data["stage"]), data["text"], data["tokens"])


def ledger_to_dict(ledger: CostLedger) -> dict[str, Any]:
    return {
        "delta_costs": list(ledger.delta_costs),
        "stop_stage": int(ledger.stop_stage) if ledger.stop_stage is not None else None,
        "cumulative": ledger.cumulative,
    }


def ledger_from_dict(data: dict[str, Any]) -> CostLedger:
    stop = data["stop_stage"]
    return CostLedger(
        tuple(data["delta_costs"]),
        Stage(stop) if stop is not None else None,
        data["cumulative"],
    )


def trajectory_to_dict(trajectory: Trajectory) -> dict[str, Any]:
    return {
        "prompt": trajectory.prompt,
        "stage_outputs": [stage_output_to_dict(o) for o in trajectory.stage_outputs],
        "status": trajectory.status,
        "rejected_at": int(trajectory.rejected_at) if trajectory.rejected_at else None,
        "rule_hits": list(trajectory.rule_hits),
        "seed": trajectory.seed,
    }


def trajectory_from_dict(data: dict[str, Any]) -> Trajectory:
    rejected_at = data.get("rejected_at")
    return Trajectory(
        prompt=data["prompt"],
        stage_outputs=tuple(stage_output_from_dict(o) for o in data["stage_outputs"]),
        status=data["status"],
        rejected_at=Stage(rejected_at) if rejected_at else None,
        rule_hits=tuple(data.get("rule_hits", ())),
        seed=data.get("seed", 0),
    )


def sample_to_dict(sample: SampleRecord) -> dict[str, Any]:
    return {
        "problem": sample.problem,
        "solution": sample.solution,
        "final_answer": sample.final_answer,
        "tier": sample.tier,
        "difficulty_scalar": sample.difficulty_scalar,
        "judge_score": sample.judge_score,
        "minhash_signature": list(sample.minhash_signature),
        "ledger": ledger_to_dict(sample.ledger),
    }


def sample_from_dict(data: dict[str, Any]) -> SampleRecord:
    return SampleRecord(
        problem=data["problem"],
        solution=data["solution"],
        final_answer=data["final_answer"],
        tier=data["tier"],
        difficulty_scalar=data["difficulty_scalar"],
        judge_score=data["judge_score"],
        minhash_signature=tuple(data["minhash_signature"]),
        ledger=ledger_from_dict(data["ledger"]),
    )
