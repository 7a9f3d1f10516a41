"""Token accounting, savings decomposition, and the stopping-theory harness.

Two layers share the same report types:

* An abstract layer over :class:`StageModel` (per-stage costs, pass
  probabilities, and a conditional quality table) where every quantity is
  computed by exhaustive enumeration, so the savings decomposition and the
  optional-stopping equality can be checked exactly.
* A log layer that replays recorded trajectories: would-have-rejected stages,
  empirical savings against the no-gating cost of the same trajectories, and
  false-positive / false-negative rates against recorded quality labels.

Conventions: gate outcomes are binary with 1 = pass; a trajectory's stopping
stage is the first gate that fails, or 4 when every gate passes.  Probability
patterns are indexed ``(o1, o2, o3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .pipeline import word_slice
from .validators import RuleConfig, validate_problem, validate_solution, validate_trace

PATTERNS = tuple(product((0, 1), repeat=3))

#: Tolerance for identities that hold algebraically; float roundoff only.
EXACT_RTOL = 1e-12


class MeasurabilityError(ValueError):
    """A stopping rule peeked at outcomes it had not observed yet."""


@dataclass(frozen=True)
class StageModel:
    """Enumerable model of one gated generation process.

    ``quality[p]`` is the probability that the finished sample passes every
    final check given gate-outcome pattern ``p``; gate outcomes are mutually
    independent with pass probabilities ``continue_probs``.
    """

    delta_costs: tuple[int, int, int, int]
    continue_probs: tuple[float, float, float]
    quality: Mapping[tuple[int, int, int], float]

    def __post_init__(self) -> None:
        if len(self.delta_costs) != 4 or any(c <= 0 for c in self.delta_costs):
            raise ValueError(f"delta_costs must be four positive integers: {self.delta_costs}")
        if len(self.continue_probs) != 3 or any(not 0 <= p <= 1 for p in self.continue_probs):
            raise ValueError(f"continue_probs must be three probabilities: {self.continue_probs}")
        for pattern in PATTERNS:
            q = self.quality.get(pattern)
            if q is None or not 0 <= q <= 1:
                raise ValueError(f"quality table needs P(q=1|{pattern}) in [0,1]")

    @property
    def c_full(self) -> int:
        return sum(self.delta_costs)

    def pattern_prob(self, pattern: Sequence[int]) -> float:
        prob = 1.0
        for outcome, p in zip(pattern, self.continue_probs):
            prob *= p if outcome else (1.0 - p)
        return prob

    def stop_probs(self) -> tuple[float, float, float, float]:
        """P(tau = t) for t = 1..4 under the first-fail stopping rule."""
        p1, p2, p3 = self.continue_probs
        return (1 - p1, p1 * (1 - p2), p1 * p2 * (1 - p3), p1 * p2 * p3)

    def reach_probs(self) -> tuple[float, float, float, float]:
        """P(tau >= t) for t = 1..4."""
        p1, p2, p3 = self.continue_probs
        return (1.0, p1, p1 * p2, p1 * p2 * p3)

    def stopped_before(self) -> tuple[float, float, float, float]:
        """P(tau < t) for t = 1..4."""
        return tuple(1.0 - r for r in self.reach_probs())

    def expected_quality(self) -> float:
        return sum(self.pattern_prob(p) * self.quality[p] for p in PATTERNS)

    def conditional_quality(self, prefix: tuple[int, ...]) -> float:
        """E[q | the first len(prefix) gate outcomes] by direct summation."""
        total = 0.0
        mass = 0.0
        for pattern in PATTERNS:
            if pattern[: len(prefix)] != prefix:
                continue
            tail = 1.0
            for outcome, p in zip(pattern[len(prefix) :], self.continue_probs[len(prefix) :]):
                tail *= p if outcome else (1.0 - p)
            total += tail * self.quality[pattern]
            mass += tail
        return total / mass if mass else 0.0


def random_stage_model(rng: np.random.Generator) -> StageModel:
    """A randomized enumerable model with strictly increasing stage costs."""
    raw = np.sort(rng.integers(1, 1000, size=4))
    costs = tuple(int(c) + i for i, c in enumerate(raw))  # break ties, keep increasing
    probs = tuple(float(p) for p in rng.uniform(0.0, 1.0, size=3))
    quality = {p: float(rng.uniform(0.0, 1.0)) for p in PATTERNS}
    return StageModel(costs, probs, quality)


@dataclass(frozen=True)
class SavingsReport:
    """Expected-cost accounting for one model or one replayed log."""

    e_cost: float
    c_full: float
    per_stage_terms: tuple[float, float, float, float]
    lower_bound: float
    objective: float
    standard_error: float | None = None

    @property
    def savings(self) -> float:
        return self.c_full - self.e_cost

    @property
    def savings_fraction(self) -> float:
        return self.savings / self.c_full if self.c_full else 0.0

    def decomposition_gap(self) -> float:
        return abs(self.savings - sum(self.per_stage_terms))

    def to_dict(self) -> dict[str, Any]:
        return {
            "e_cost": self.e_cost,
            "c_full": self.c_full,
            "per_stage_terms": list(self.per_stage_terms),
            "lower_bound": self.lower_bound,
            "objective": self.objective,
            "savings": self.savings,
            "savings_fraction": self.savings_fraction,
            "standard_error": self.standard_error,
        }


def exact_expected_cost(model: StageModel, lambda_cost: float = 0.0) -> SavingsReport:
    """Expected stopped cost by exhaustive enumeration.

    The expectation is computed two independent ways (stop-pattern
    enumeration and the reach-probability sum); disagreement beyond float
    roundoff raises, as does a violation of the decomposition identity or of
    strict savings when some rejection is possible.
    """
    stop = model.stop_probs()
    cum = np.cumsum(model.delta_costs)
    by_patterns = float(sum(stop[t] * cum[t] for t in range(4)))
    by_reach = float(
        sum(dc * r for dc, r in zip(model.delta_costs, model.reach_probs()))
    )
    scale = max(abs(by_patterns), abs(by_reach), 1.0)
    if abs(by_patterns - by_reach) > EXACT_RTOL * scale:
        raise RuntimeError(
            f"enumeration cross-check failed: {by_patterns} vs {by_reach}"
        )
    before = model.stopped_before()
    terms = tuple(dc * pb for dc, pb in zip(model.delta_costs, before))
    savings = model.c_full - by_reach
    if abs(savings - sum(terms)) > EXACT_RTOL * max(model.c_full, 1.0):
        raise RuntimeError("savings decomposition identity violated")
    if before[3] > 0 and not savings > 0:
        raise RuntimeError("strict savings violated despite nonzero rejection mass")
    p1, p2, p3 = model.continue_probs
    objective = p1 * p2 * p3 * model.quality[(1, 1, 1)] - lambda_cost * by_reach
    return SavingsReport(
        e_cost=by_reach,
        c_full=float(model.c_full),
        per_stage_terms=terms,
        lower_bound=model.delta_costs[3] * before[3],
        objective=objective,
    )


def simulate_expected_cost(
    model: StageModel, trials: int, seed: int, lambda_cost: float = 0.0
) -> SavingsReport:
    """Monte-Carlo counterpart of :func:`exact_expected_cost`.

    Agreement with the exact report within a few standard errors is the
    correctness contract checked by the verification command and the tests.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    outcomes = rng.random((trials, 3)) < np.asarray(model.continue_probs)
    fails = ~outcomes
    tau = np.where(fails[:, 0], 1, np.where(fails[:, 1], 2, np.where(fails[:, 2], 3, 4)))
    cum = np.cumsum(model.delta_costs)
    costs = cum[tau - 1]
    survived = tau == 4
    q = np.zeros(trials)
    if survived.any():
        q[survived] = rng.random(int(survived.sum())) < model.quality[(1, 1, 1)]
    terms = tuple(
        float(np.mean((tau < t) * model.delta_costs[t - 1])) for t in range(1, 5)
    )
    e_cost = float(np.mean(costs))
    se = float(np.std(costs, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    objective = float(np.mean(q * survived)) - lambda_cost * e_cost
    return SavingsReport(
        e_cost=e_cost,
        c_full=float(model.c_full),
        per_stage_terms=terms,
        lower_bound=float(np.mean((tau < 4) * model.delta_costs[3])),
        objective=objective,
        standard_error=se,
    )


# --- stopping policies ---------------------------------------------------------


class StoppingPolicy:
    """A stopping rule given as a full-pattern table, checked for measurability.

    The table maps every gate-outcome pattern to the stage at which the rule
    stops (4 = never).  A rule is admissible only when its decision at stage
    ``t`` depends on the first ``t`` outcomes alone; any dependence on later
    outcomes raises :class:`MeasurabilityError`.  That restriction is exactly
    what makes the stopped conditional-quality estimate unbiased.
    """

    def __init__(self, tau_by_pattern: Mapping[tuple[int, int, int], int], name: str = "policy"):
        self.name = name
        self._table = {p: int(tau_by_pattern[p]) for p in PATTERNS}
        for pattern, tau in self._table.items():
            if tau not in (1, 2, 3, 4):
                raise ValueError(f"stop stage must be 1..4, got {tau} for {pattern}")
        self._validate()

    def tau(self, pattern: tuple[int, int, int]) -> int:
        return self._table[pattern]

    def _validate(self) -> None:
        for t in (1, 2, 3):
            for prefix in product((0, 1), repeat=t):
                taus = {
                    self._table[p] for p in PATTERNS if p[:t] == prefix
                }
                stopped_here = {tau for tau in taus if tau == t}
                if stopped_here and taus != {t}:
                    raise MeasurabilityError(
                        f"{self.name}: decision at stage {t} for prefix {prefix} "
                        f"depends on unobserved outcomes (stop stages seen: {sorted(taus)})"
                    )


def first_fail_policy() -> StoppingPolicy:
    """Stop at the first failed gate; the pipeline's own rule."""
    table = {}
    for p in PATTERNS:
        table[p] = next((t + 1 for t, o in enumerate(p) if not o), 4)
    return StoppingPolicy(table, "first-fail")


def never_stop_policy() -> StoppingPolicy:
    return StoppingPolicy({p: 4 for p in PATTERNS}, "never-stop")


def stop_at_stage_policy(stage: int) -> StoppingPolicy:
    return StoppingPolicy({p: stage for p in PATTERNS}, f"stop-at-{stage}")


def enumerate_policies() -> list[StoppingPolicy]:
    """Every deterministic prefix-measurable stopping rule over three gates."""

    def expand(t: int, prefix: tuple[int, ...]) -> list[dict]:
        members = [p for p in PATTERNS if p[: len(prefix)] == prefix]
        options = [{p: t for p in members}]
        if t == 3:
            # Past the last gate there is nothing left to decide.
            options.append({p: 4 for p in members})
        else:
            for left in expand(t + 1, prefix + (0,)):
                for right in expand(t + 1, prefix + (1,)):
                    options.append({**left, **right})
        return options

    policies = []
    for left in expand(1, (0,)):
        for right in expand(1, (1,)):
            table = {**left, **right}
            policies.append(StoppingPolicy(table, f"enum-{len(policies)}"))
    return policies


@dataclass(frozen=True)
class StoppingCheck:
    policy: str
    exact_gap: float
    mc_estimate: float | None
    mc_se: float | None
    expected_quality: float

    @property
    def mc_gap_in_se(self) -> float | None:
        if self.mc_estimate is None or not self.mc_se:
            return None
        return abs(self.mc_estimate - self.expected_quality) / self.mc_se


def stopped_quality_estimate(model: StageModel, policy: StoppingPolicy) -> float:
    """E[M_tau]: the conditional-quality estimate frozen at the stopping stage."""
    total = 0.0
    for pattern in PATTERNS:
        tau = policy.tau(pattern)
        prefix = pattern[: min(tau, 3)]
        total += model.pattern_prob(pattern) * model.conditional_quality(prefix)
    return total


def martingale_check(
    model: StageModel,
    policies: Iterable[StoppingPolicy],
    *,
    trials: int = 0,
    seed: int = 0,
    se_multiplier: float = 4.0,
) -> list[StoppingCheck]:
    """Verify E[M_tau] = E[q] for each stopping rule.

    Exactly under enumeration for every policy; additionally by Monte Carlo
    when ``trials`` is positive, where agreement within ``se_multiplier``
    standard errors is required by callers.
    """
    expected = model.expected_quality()
    checks = []
    rng = np.random.default_rng(seed)
    for policy in policies:
        exact = stopped_quality_estimate(model, policy)
        mc_mean: float | None = None
        mc_se: float | None = None
        if trials > 0:
            outcomes = (rng.random((trials, 3)) < np.asarray(model.continue_probs)).astype(int)
            q_draws = rng.random(trials)
            # Everything a trial needs is a function of its 3-bit pattern.
            tau_table = np.array([policy.tau(p) for p in PATTERNS])
            m_table = np.array(
                [
                    model.conditional_quality(p[:tau]) if tau <= 3 else 0.0
                    for p, tau in zip(PATTERNS, tau_table)
                ]
            )
            q_table = np.array([model.quality[p] for p in PATTERNS])
            idx = outcomes[:, 0] * 4 + outcomes[:, 1] * 2 + outcomes[:, 2]
            realized_q = (q_draws < q_table[idx]).astype(float)
            values = np.where(tau_table[idx] == 4, realized_q, m_table[idx])
            mc_mean = float(np.mean(values))
            mc_se = float(np.std(values, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        checks.append(
            StoppingCheck(
                policy=policy.name,
                exact_gap=abs(exact - expected),
                mc_estimate=mc_mean,
                mc_se=mc_se,
                expected_quality=expected,
            )
        )
    return checks


# --- score/quality monotonicity --------------------------------------------------


@dataclass(frozen=True)
class ScoreBucket:
    score: int
    count: int
    mean_quality: float


@dataclass(frozen=True)
class MonotonicityViolation:
    stage: int
    lower_score: int
    upper_score: int
    gap: float
    margin: float


@dataclass(frozen=True)
class MonotonicityReport:
    curves: dict[int, tuple[ScoreBucket, ...]]
    violations: tuple[MonotonicityViolation, ...]
    skipped_buckets: tuple[tuple[int, int], ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def score_quality_curves(
    rows: Iterable[tuple[Mapping[int, int], int]],
    *,
    z: float = 3.0,
    min_bucket: int = 5,
) -> MonotonicityReport:
    """Estimate mean final quality per stage score and flag confident decreases.

    ``rows`` yields ``(scores_by_stage, quality)`` pairs.  A violation is
    reported when an adjacent score pair is ordered the wrong way by more
    than ``z`` combined standard errors; sparse buckets (fewer than
    ``min_bucket`` rows) are skipped with a notice rather than compared.
    """
    sums: dict[int, dict[int, list[int]]] = {}
    for scores, quality in rows:
        for stage, score in scores.items():
            bucket = sums.setdefault(int(stage), {}).setdefault(int(score), [0, 0])
            bucket[0] += 1
            bucket[1] += int(quality)
    curves: dict[int, tuple[ScoreBucket, ...]] = {}
    violations: list[MonotonicityViolation] = []
    skipped: list[tuple[int, int]] = []
    for stage, buckets in sorted(sums.items()):
        stage_curve = []
        for score in sorted(buckets):
            count, positives = buckets[score]
            stage_curve.append(ScoreBucket(score, count, positives / count))
        curves[stage] = tuple(stage_curve)
        usable = []
        for b in stage_curve:
            if b.count < min_bucket:
                skipped.append((stage, b.score))
            else:
                usable.append(b)
        for low, high in zip(usable, usable[1:]):
            gap = low.mean_quality - high.mean_quality
            if gap <= 0:
                continue
            se_low = math.sqrt(low.mean_quality * (1 - low.mean_quality) / low.count)
            se_high = math.sqrt(high.mean_quality * (1 - high.mean_quality) / high.count)
            margin = z * math.hypot(se_low, se_high)
            if gap > margin:
                violations.append(
                    MonotonicityViolation(stage, low.score, high.score, gap, margin)
                )
    return MonotonicityReport(curves, tuple(violations), tuple(skipped))


def monotonicity_rows_from_records(
    records: Iterable[Mapping[str, Any]],
) -> list[tuple[dict[int, int], int]]:
    """Extract (scores, quality) rows from trajectory records.

    Quality prefers the recorded final-evaluation product and falls back to
    the backend's latent label when evaluation was skipped.
    """
    rows = []
    for record in records:
        scores = {int(k): int(v) for k, v in (record.get("gate_scores") or {}).items()}
        if not scores:
            continue
        evaluation = record.get("eval")
        if evaluation is not None and evaluation.get("quality") is not None:
            quality = int(evaluation["quality"])
        elif record.get("latent_good") is not None:
            quality = int(bool(record["latent_good"]))
        else:
            continue
        rows.append((scores, quality))
    return rows


# --- log replay -------------------------------------------------------------------


class ReplayError(ValueError):
    """The supplied log cannot support the requested replay."""


@dataclass(frozen=True)
class ErrorRateRow:
    tag: str
    n_good: int
    n_bad: int
    fpr: float
    fnr: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "tag": self.tag,
            "n_good": self.n_good,
            "n_bad": self.n_bad,
            "fpr_percent": 100.0 * self.fpr,
            "fnr_percent": 100.0 * self.fnr,
        }


@dataclass(frozen=True)
class ReplayReport:
    rows: tuple[ErrorRateRow, ...]
    would_reject_stage: tuple[int | None, ...]
    savings: SavingsReport

    def error_table(self) -> str:
        header = f"{'tag':<12} {'#Good':>6} {'#Bad':>6} {'FPR%':>7} {'FNR%':>7}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"{row.tag:<12} {row.n_good:>6} {row.n_bad:>6} "
                f"{100 * row.fpr:>7.1f} {100 * row.fnr:>7.1f}"
            )
        return "\n".join(lines)


def _record_stage_text(record: Mapping[str, Any], stage: int) -> str | None:
    for output in record.get("stage_outputs", ()):
        if output["stage"] == stage:
            return output["text"]
    return None


def _record_stage_tokens(record: Mapping[str, Any]) -> dict[int, int]:
    return {o["stage"]: o["tokens"] for o in record.get("stage_outputs", ())}


def replay_error_rates(
    records: Sequence[Mapping[str, Any]],
    *,
    policy,
    rule_config: RuleConfig | None = None,
    cutoff: float | None = None,
    bootstrap_solution_tokens: int = 400,
    lambda_cost: float = 0.0,
) -> ReplayReport:
    """Re-validate a no-gating log and measure would-have-rejected outcomes.

    Every record must carry the full generation and its final-evaluation
    labels.  ``cutoff`` overrides the policy's checkpoint fraction so the
    same log can be swept across checkpoint positions; the checkpoint prefix
    for each trajectory is re-sliced from the completed solution using the
    same running length estimate the generation run used.

    Inverting the recorded labels swaps the roles of the two error rates
    (up to complements), which callers use as a sanity property.
    """
    cfg = rule_config or RuleConfig(caps=policy.caps)
    cut = policy.midsol_cutoff if cutoff is None else cutoff
    estimator_total = 0
    estimator_count = 0

    per_tag: dict[str, dict[str, int]] = {}
    would_reject: list[int | None] = []
    full_costs: list[int] = []
    gated_costs: list[int] = []
    per_stage_saved = np.zeros(4)
    quality_terms: list[float] = []

    for record in records:
        evaluation = record.get("eval")
        if evaluation is None or evaluation.get("quality") is None:
            raise ReplayError(
                "replay requires full generations with final labels; "
                "re-run generation with gating disabled"
            )
        problem = _record_stage_text(record, 1)
        mid = _record_stage_text(record, 2)
        full = _record_stage_text(record, 3) or mid
        if problem is None or full is None:
            raise ReplayError("record lacks the per-stage texts needed for replay")
        tokens = _record_stage_tokens(record)
        solution_tokens = tokens.get(2, 0) + tokens.get(3, 0)

        expected = (
            estimator_total / estimator_count if estimator_count else float(bootstrap_solution_tokens)
        )
        budget = max(1, int(round(cut * expected)))
        prefix = word_slice(full, budget)

        stage_hit: int | None = None
        report = validate_problem(problem, cfg)
        if report.score <= policy.thresholds[0]:
            stage_hit = 1
        if stage_hit is None and prefix:
            report = validate_trace(problem, prefix, cfg)
            if report.score <= policy.thresholds[1]:
                stage_hit = 2
        if stage_hit is None:
            report = validate_solution(problem, full, cfg)
            if report.score <= policy.thresholds[2]:
                stage_hit = 3
        would_reject.append(stage_hit)

        good = bool(evaluation["quality"])
        tag = record.get("tag", "all")
        counts = per_tag.setdefault(tag, {"good": 0, "bad": 0, "fp": 0, "fn": 0})
        if good:
            counts["good"] += 1
            if stage_hit is not None:
                counts["fp"] += 1
        else:
            counts["bad"] += 1
            if stage_hit is None:
                counts["fn"] += 1
        # The length estimate tracks what the generation run saw: solutions it
        # actually accepted.  Keying off the recorded status (not the labels)
        # keeps the replayed prefixes independent of label bookkeeping.
        if record.get("status") == "accepted":
            estimator_total += solution_tokens
            estimator_count += 1

        deltas = [tokens.get(s, 0) for s in (1, 2, 3, 4)]
        full_cost = sum(deltas)
        if stage_hit is None:
            gated = full_cost
        else:
            gated = sum(deltas[:stage_hit])
            for later in range(stage_hit, 4):
                per_stage_saved[later] += deltas[later]
        full_costs.append(full_cost)
        gated_costs.append(gated)
        quality_terms.append(float(evaluation["quality"]) if stage_hit is None else 0.0)

    n = len(full_costs)
    if n == 0:
        raise ReplayError("no records to replay")
    rows = tuple(
        ErrorRateRow(
            tag=tag,
            n_good=c["good"],
            n_bad=c["bad"],
            fpr=c["fp"] / c["good"] if c["good"] else 0.0,
            fnr=c["fn"] / c["bad"] if c["bad"] else 0.0,
        )
        for tag, c in sorted(per_tag.items())
    )
    e_cost = float(np.mean(gated_costs))
    c_full = float(np.mean(full_costs))
    terms = tuple(float(v) / n for v in per_stage_saved)
    savings = SavingsReport(
        e_cost=e_cost,
        c_full=c_full,
        per_stage_terms=terms,
        lower_bound=terms[3],
        objective=float(np.mean(quality_terms)) - lambda_cost * e_cost,
        standard_error=float(np.std(gated_costs, ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
    )
    return ReplayReport(rows, tuple(would_reject), savings)


def objective_value(records: Sequence[Mapping[str, Any]], lambda_cost: float) -> float:
    """Empirical trade-off objective from a run log.

    Mean of (final quality for completed trajectories) minus ``lambda_cost``
    times the mean stopped token cost.
    """
    if not records:
        raise ValueError("no records")
    quality = []
    costs = []
    for record in records:
        evaluation = record.get("eval") or {}
        completed = record.get("rejected_at") in (None, 4)
        q = evaluation.get("quality")
        quality.append(float(q) if (completed and q is not None) else 0.0)
        costs.append(record["ledger"]["cumulative"])
    return float(np.mean(quality)) - lambda_cost * float(np.mean(costs))
