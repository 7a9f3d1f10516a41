"""Generation backends: a seeded simulator and an HTTP chat-completions client.

The simulator fabricates grade-school word problems and step-by-step
solutions from templates, injecting configurable fault classes at seeded
positions.  It privately knows each trajectory's latent quality, which is
what makes desk-scale verification of the pipeline's error rates and token
accounting possible.  The HTTP backend speaks the de-facto open
inference-server chat API and trusts the server's reported usage for all
token accounting.

Token convention for the simulator: one token per whitespace-delimited word.
"""

from __future__ import annotations

import abc
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Mapping

import numpy as np

from .core import Stage

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """A generation call failed (timeout, malformed reply, refused request)."""


class BackendUnreachable(BackendError):
    """The backend endpoint could not be reached at all."""


@dataclass(frozen=True)
class Capabilities:
    supports_continuation: bool
    reports_token_counts: bool


@dataclass(frozen=True)
class StageRequest:
    """Everything a backend needs to produce one stage of one trajectory."""

    stage: Stage
    instruction: str
    prompt_index: int
    problem: str | None = None
    prefix: str | None = None
    temperature: float = 0.0
    max_tokens: int | None = None
    stop: tuple[str, ...] = ()
    few_shot_exemplars: tuple[str, ...] = ()


@dataclass(frozen=True)
class GenerationResult:
    """Newly generated text plus the tokens it cost.

    ``text`` contains only what was produced at this stage; the pipeline
    concatenates stages itself so the prefix chain holds by construction.
    ``finished`` reports whether the model stopped naturally rather than at
    the token limit.
    """

    text: str
    tokens: int
    finished: bool

    def __post_init__(self) -> None:
        if self.tokens < 1:
            raise ValueError("every generate call must report at least one token")


class GeneratorBackend(abc.ABC):
    """Interface all generation backends implement."""

    capabilities: Capabilities

    @abc.abstractmethod
    def generate(self, request: StageRequest) -> GenerationResult:
        raise NotImplementedError


def generate_stage(
    backend: GeneratorBackend,
    request: StageRequest,
    *,
    retries: int = 3,
    base_delay: float = 0.2,
    sleep: Callable[[float], None] = time.sleep,
) -> GenerationResult:
    """Call the backend with an exponential-backoff retry budget."""
    attempt = 0
    while True:
        try:
            return backend.generate(request)
        except BackendError:
            attempt += 1
            if attempt > retries:
                raise
            sleep(base_delay * 2 ** (attempt - 1))


# --- chat templates ----------------------------------------------------------

CHAT_FAMILIES = ("chatml", "llama3", "deepseek", "phi3", "mistral")


def _fold_system(system: str | None, user: str, family: str) -> str:
    if system is None:
        return user
    logger.info("family %s has no system slot; prepending system text to user turn", family)
    return f"{system}\n\n{user}"


def apply_chat_template(family: str, system: str | None, user: str) -> str:
    """Render a (system, user) exchange into the byte-exact wire prompt.

    Families without a system role fold the system text into the user turn
    with a logged notice.
    """
    if family == "chatml":
        parts = []
        if system is not None:
            parts.append(f"<|im_start|>system\n{system}<|im_end|>\n")
        parts.append(f"<|im_start|>user\n{user}<|im_end|>\n")
        parts.append("<|im_start|>assistant\n")
        return "".join(parts)
    if family == "llama3":
        parts = ["<|begin_of_text|>"]
        if system is not None:
            parts.append(f"<|start_header_id|>system<|end_header_id|>\n\n{system}<|eot_id|>")
        parts.append(f"<|start_header_id|>user<|end_header_id|>\n\n{user}<|eot_id|>")
        parts.append("<|start_header_id|>assistant<|end_header_id|>\n\n")
        return "".join(parts)
    if family == "deepseek":
        return f"User: {_fold_system(system, user, family)}\n\nAssistant:"
    if family == "phi3":
        parts = []
        if system is not None:
            parts.append(f"<|system|>\n{system}<|end|>\n")
        parts.append(f"<|user|>\n{user}<|end|>\n")
        parts.append("<|assistant|>\n")
        return "".join(parts)
    if family == "mistral":
        return f"[INST] {_fold_system(system, user, family)} [/INST]"
    raise ValueError(f"unknown chat family {family!r}; expected one of {CHAT_FAMILIES}")


_CHATML_BLOCK = re.compile(r"<\|im_start\|>(\w+)\n(.*?)<\|im_end\|>\n", re.DOTALL)
_LLAMA3_BLOCK = re.compile(
    r"<\|start_header_id\|>(\w+)<\|end_header_id\|>\n\n(.*?)<\|eot_id\|>", re.DOTALL
)
_PHI3_BLOCK = re.compile(r"<\|(\w+)\|>\n(.*?)<\|end\|>\n", re.DOTALL)
_DEEPSEEK_RE = re.compile(r"\AUser: (.*)\n\nAssistant:\Z", re.DOTALL)
_MISTRAL_RE = re.compile(r"\A\[INST\] (.*) \[/INST\]\Z", re.DOTALL)


def parse_chat_template(family: str, wire: str) -> list[tuple[str, str]]:
    """Recover the (role, content) turns from a templated wire string."""
    if family == "chatml":
        return [(m.group(1), m.group(2)) for m in _CHATML_BLOCK.finditer(wire)]
    if family == "llama3":
        return [(m.group(1), m.group(2)) for m in _LLAMA3_BLOCK.finditer(wire)]
    if family == "phi3":
        return [(m.group(1), m.group(2)) for m in _PHI3_BLOCK.finditer(wire)]
    if family == "deepseek":
        match = _DEEPSEEK_RE.match(wire)
        return [("user", match.group(1))] if match else []
    if family == "mistral":
        match = _MISTRAL_RE.match(wire)
        return [("user", match.group(1))] if match else []
    raise ValueError(f"unknown chat family {family!r}")


# --- simulator ---------------------------------------------------------------

#: Visible fault classes the simulator can inject, and where they surface.
FAULT_CLASSES = (
    "problem",       # malformed problem text; caught before any solution tokens
    "marker",        # premature final marker mid-trace
    "leakage",       # role/system text leaked into the solution
    "arith",         # a stated calculation that does not check out
    "magnitude",     # an absurdly large intermediate value
    "hallucination", # boilerplate disclaimers in the reasoning
    "incoherence",   # silent repetition only a judge notices
)

_DEFAULT_FAULT_WEIGHTS: tuple[tuple[str, float], ...] = (
    ("problem", 0.02),
    ("marker", 0.15),
    ("leakage", 0.015),
    ("arith", 0.40),
    ("magnitude", 0.08),
    ("hallucination", 0.30),
    ("incoherence", 0.035),
)


@dataclass(frozen=True)
class SimulatorConfig:
    """Knobs for the seeded trajectory simulator.

    ``quality_correlation`` couples visible rule-detectable artifacts to the
    latent quality label.  At +1 every low-quality trajectory carries its
    drawn fault class; at 0 low-quality trajectories carry no rule-visible
    artifact at all (only a judge can tell); negative values invert the
    coupling so that high-quality trajectories carry harmless rule-tripping
    quirks while low-quality ones look spotless - a constructed counterexample
    for the score/quality monotonicity harness.
    """

    seed: int = 42
    p_good: float = 0.742
    fault_weights: tuple[tuple[str, float], ...] = _DEFAULT_FAULT_WEIGHTS
    quality_correlation: float = 1.0
    problem_pad_sentences: tuple[int, int] = (2, 3)
    good_solution_words: tuple[float, float] = (200.0, 25.0)
    bad_solution_words: tuple[float, float] = (1050.0, 100.0)
    solution_word_bounds: tuple[int, int] = (120, 1500)
    judge_reply_words: int = 40
    fault_position_scale: float = 36.0
    benign_quirk_prob: float = 0.026
    short_problem_prob: float = 0.010
    arith_break_prob: float = 0.70
    magnitude_break_prob: float = 0.65

    def __post_init__(self) -> None:
        if not 0 <= self.p_good <= 1:
            raise ValueError("p_good must be a probability")
        if not -1 <= self.quality_correlation <= 1:
            raise ValueError("quality_correlation must lie in [-1, 1]")
        for name, weight in self.fault_weights:
            if name not in FAULT_CLASSES:
                raise ValueError(f"unknown fault class {name!r}")
            if weight < 0:
                raise ValueError("fault weights must be nonnegative")


def calibrated_sim_config(seed: int = 42) -> SimulatorConfig:
    """Simulator preset tuned to grade-school-math generation error rates."""
    return SimulatorConfig(seed=seed)


def adversarial_sim_config(seed: int = 42) -> SimulatorConfig:
    """Inverted coupling: clean-looking bad data, quirky good data."""
    return SimulatorConfig(seed=seed, quality_correlation=-1.0)


_NAMES = (
    "Tom", "Mara", "Felix", "Priya", "Jonah", "Alice", "Ravi", "Sofia",
    "Henry", "Nadia", "Omar", "Lena", "Caleb", "Ruth", "Diego", "Wendy",
    "Ivan", "Petra", "Kofi", "June", "Marcus", "Tessa", "Abel", "Rosa",
    "Victor", "Hana", "Gideon", "Mabel", "Arthur", "Selma", "Noel", "Ida",
)

_PROBLEM_PADDING = (
    "The weekly planner on the kitchen wall keeps every detail in view.",
    "Careful bookkeeping makes the arithmetic easy to follow.",
    "A quick note in the margin records the plan before anything is bought.",
    "Everyone agrees the totals should be worked out ahead of time.",
    "The shopping list never leaves the clipboard by the door.",
    "Each entry gets double underlined once it is settled.",
    "A pocket calculator sits unused because the steps are simple.",
    "The family chalkboard tracks these counts through the season.",
    "Good habits keep the running totals from drifting.",
    "Neat columns in the notebook make checking the work painless.",
)

_OPENINGS = (
    "Let us work through this carefully.",
    "We take the problem one step at a time.",
    "Start by laying out what the problem tells us.",
    "Break the question into small calculations.",
    "We track each quantity as it appears.",
    "Write down the given numbers before combining them.",
)

_FILLERS = (
    "We jot the subtotal beside entry {n} so nothing slips past us.",
    "Row {n} of the worksheet stays unchanged while we continue.",
    "A quick glance at note {n} confirms the bookkeeping is tidy.",
    "Nothing new happens in step {n}, so the running count carries over.",
    "The margin tally near line {n} still agrees with our figures.",
    "Entry {n} is copied forward without any adjustment.",
    "We circle checkpoint {n} to mark the progress so far.",
    "Line {n} of the scratchpad repeats the carried amount.",
    "The checklist item {n} is ticked off before moving on.",
    "Step {n} just restates the working figure for clarity.",
    "We park the intermediate value at slot {n} for the moment.",
    "Page {n} of the notes holds the same subtotal as before.",
    "Ledger cell {n} is reconciled and left untouched.",
    "Nothing in paragraph {n} changes the count we are tracking.",
)

_CLAIM_LEADS = (
    "First, {expr}.",
    "Next we compute {expr}.",
    "That gives {expr}.",
    "Carrying on, {expr}.",
    "So we find {expr}.",
)

_MUL_SYMBOLS = ("×", "x", "*")


@dataclass(frozen=True)
class _Template:
    body: str
    kind: str  # "abc_mul" (a*b*c), "ab_minus_c", "ab_plus_c"

    def render(self, name: str, a: int, b: int, c: int) -> str:
        return self.body.format(name=name, a=a, b=b, c=c)

    def answer(self, a: int, b: int, c: int) -> int:
        if self.kind == "abc_mul":
            return a * b * c
        if self.kind == "ab_minus_c":
            return a * b - c
        return a * b + c

    def chain(self, a: int, b: int, c: int) -> list[tuple[int, str, int, int]]:
        """Claim chain as (lhs, op, rhs, result) steps."""
        ab = a * b
        if self.kind == "abc_mul":
            return [(a, "*", b, ab), (ab, "*", c, ab * c)]
        if self.kind == "ab_minus_c":
            return [(a, "*", b, ab), (ab, "-", c, ab - c)]
        return [(a, "*", b, ab), (ab, "+", c, ab + c)]

    def regex(self) -> re.Pattern[str]:
        escaped = re.escape(self.body)
        escaped = escaped.replace(re.escape("{name}"), r"[A-Z][a-z]+")
        for slot in ("{a}", "{b}", "{c}"):
            escaped = escaped.replace(re.escape(slot), r"(\d+)", 1)
        # Later repeats of {name} after the first.
        escaped = escaped.replace(re.escape("{name}"), r"[A-Z][a-z]+")
        return re.compile(escaped)


_TEMPLATES = (
    _Template(
        "{name} buys {a} cartons that hold {b} eggs apiece every single week. "
        "How many eggs does {name} end up with after {c} weeks of shopping?",
        "abc_mul",
    ),
    _Template(
        "A school orders {a} boxes with {b} pencils in each box and later gives "
        "away {c} pencils to visitors. How many pencils does the school still have?",
        "ab_minus_c",
    ),
    _Template(
        "{name} saves {a} dollars every week for {b} weeks straight and then "
        "spends {c} dollars on a small gift. How many dollars does {name} have left?",
        "ab_minus_c",
    ),
    _Template(
        "A bakery sells {a} trays of {b} muffins during the morning rush and "
        "another {c} single muffins after lunch. How many muffins does the bakery sell in all?",
        "ab_plus_c",
    ),
    _Template(
        "Each shuttle bus seats {a} riders comfortably. If {b} buses each complete "
        "{c} full trips today, how many riders can be carried in total?",
        "abc_mul",
    ),
    _Template(
        "{name} reads {a} pages of a novel each night for {b} nights and finishes "
        "with a final sprint of {c} extra pages. How many pages does {name} read overall?",
        "ab_plus_c",
    ),
)

_SHORT_TEMPLATE = _Template("Quick: {a} groups of {b} items total?", "short")
# The short form multiplies two quantities; give it a dedicated chain/answer.


def _short_answer(a: int, b: int) -> int:
    return a * b


_TEMPLATE_REGEXES = [(tpl, tpl.regex()) for tpl in _TEMPLATES]
_SHORT_REGEX = re.compile(r"Quick: (\d+) groups of (\d+) items total\?")

_HALLUCINATION_LINE = "As an AI, I cannot be fully certain here, but we press on regardless."
_LEAKAGE_LINE = "SYSTEM: remember to keep the tone neutral and concise."
_INCOHERENCE_LINE = "We revisit checkpoint {n} once more without changing anything."


@dataclass(frozen=True)
class TrajectoryPlan:
    """Fully materialized ground truth for one simulated trajectory."""

    index: int
    latent_good: bool
    problem_text: str
    solution_text: str
    solution_word_count: int
    true_answer: int
    fault_class: str | None
    fault_word_pos: int | None
    quirk_word_pos: int | None
    short_problem: bool


def _mul_symbol(rng: np.random.Generator) -> str:
    return _MUL_SYMBOLS[int(rng.integers(0, len(_MUL_SYMBOLS)))]


def _claim_sentence(rng: np.random.Generator, lhs: int, op: str, rhs: int, result: int) -> str:
    symbol = {"*": _mul_symbol(rng), "+": "+", "-": "-"}[op]
    expr = f"{lhs} {symbol} {rhs} = {result}"
    lead = _CLAIM_LEADS[int(rng.integers(0, len(_CLAIM_LEADS)))]
    return lead.format(expr=expr)


class SimulatedGenerator(GeneratorBackend):
    """Deterministic template-based generator with seeded fault injection.

    Every per-trajectory random draw derives from ``(config.seed,
    prompt_index)`` alone, so concurrent callers cannot perturb outputs and
    repeated runs are byte-identical.
    """

    capabilities = Capabilities(supports_continuation=True, reports_token_counts=True)

    def __init__(self, config: SimulatorConfig | None = None):
        self.config = config or SimulatorConfig()
        self._plans: dict[int, TrajectoryPlan] = {}
        self._lock = threading.Lock()

    # -- plan materialization -------------------------------------------------

    def plan(self, index: int) -> TrajectoryPlan:
        with self._lock:
            cached = self._plans.get(index)
        if cached is not None:
            return cached
        built = self._build_plan(index)
        with self._lock:
            # Bound the cache; replays recompute cheaply.
            if len(self._plans) > 4096:
                self._plans.clear()
            self._plans[index] = built
        return built

    def ground_truth(self, index: int) -> bool:
        """Latent quality label: True when the trajectory is sound."""
        return self.plan(index).latent_good

    def _rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.config.seed, spawn_key=(index,))
        )

    def _build_plan(self, index: int) -> TrajectoryPlan:
        cfg = self.config
        rng = self._rng(index)
        # Draw order below is fixed; changing it changes every downstream byte.
        latent_good = bool(rng.random() < cfg.p_good)

        name = _NAMES[int(rng.integers(0, len(_NAMES)))]
        template = _TEMPLATES[int(rng.integers(0, len(_TEMPLATES)))]
        a = int(rng.integers(3, 13))
        b = int(rng.integers(11, 61))
        c = int(rng.integers(2, 9))

        mean, sd = cfg.good_solution_words if latent_good else cfg.bad_solution_words
        lo, hi = cfg.solution_word_bounds
        target_words = int(np.clip(round(rng.normal(mean, sd)), lo, hi))

        rho = cfg.quality_correlation
        fault_class: str | None = None
        quirk_pos: int | None = None
        fault_pos: int | None = None
        short_problem = False

        if latent_good:
            if rho >= 0:
                short_problem = bool(rng.random() < cfg.short_problem_prob)
                has_quirk = bool(rng.random() < cfg.benign_quirk_prob)
            else:
                short_problem = False
                has_quirk = bool(rng.random() < -rho * 0.9)
            if has_quirk:
                quirk_pos = int(rng.integers(0, max(1, int(0.55 * target_words))))
        else:
            names, weights = zip(*cfg.fault_weights)
            total = sum(weights)
            drawn = rng.choice(len(names), p=[w / total for w in weights])
            fault_class = names[int(drawn)]
            if rho < 0:
                fault_class = "incoherence"
            elif rho < 1 and rng.random() >= rho:
                fault_class = "incoherence"
            raw = 5.0 + rng.exponential(cfg.fault_position_scale)
            fault_pos = int(min(raw, 0.5 * target_words))
            # Benign quirks are quality-independent asides: at zero coupling
            # they are the only rule-visible artifact on either side, which is
            # exactly what makes the score curve flat there.
            if rho >= 0 and rng.random() < cfg.benign_quirk_prob:
                quirk_pos = int(rng.integers(0, max(1, int(0.55 * target_words))))

        break_roll = float(rng.random())

        problem_text, true_answer = self._render_problem(
            rng, template, name, a, b, c, short_problem, fault_class
        )
        solution_text = self._render_solution(
            rng,
            template,
            a,
            b,
            c,
            short_problem,
            target_words,
            fault_class,
            fault_pos,
            quirk_pos,
            break_roll,
        )
        return TrajectoryPlan(
            index=index,
            latent_good=latent_good,
            problem_text=problem_text,
            solution_text=solution_text,
            solution_word_count=len(solution_text.split()),
            true_answer=true_answer,
            fault_class=fault_class,
            fault_word_pos=fault_pos,
            quirk_word_pos=quirk_pos,
            short_problem=short_problem,
        )

    def _render_problem(
        self,
        rng: np.random.Generator,
        template: _Template,
        name: str,
        a: int,
        b: int,
        c: int,
        short_problem: bool,
        fault_class: str | None,
    ) -> tuple[str, int]:
        if short_problem:
            return _SHORT_TEMPLATE.body.format(a=a, b=b), _short_answer(a, b)
        pad_lo, pad_hi = self.config.problem_pad_sentences
        n_pad = int(rng.integers(pad_lo, pad_hi + 1))
        pads = [
            _PROBLEM_PADDING[int(rng.integers(0, len(_PROBLEM_PADDING)))] for _ in range(n_pad)
        ]
        text = " ".join(pads + [template.render(name, a, b, c)])
        answer = template.answer(a, b, c)
        if fault_class == "problem":
            variant = int(rng.integers(0, 4))
            if variant == 0:
                text = text.replace("?", ".")
            elif variant == 1:
                text = text[0].lower() + text[1:]
            elif variant == 2:
                text = text + " ??"
            else:
                text = text + " 个?"
        return text, answer

    def _render_solution(
        self,
        rng: np.random.Generator,
        template: _Template,
        a: int,
        b: int,
        c: int,
        short_problem: bool,
        target_words: int,
        fault_class: str | None,
        fault_pos: int | None,
        quirk_pos: int | None,
        break_roll: float,
    ) -> str:
        cfg = self.config
        if short_problem:
            chain = [(a, "*", b, a * b)]
        else:
            chain = template.chain(a, b, c)
        final_answer = chain[-1][3]

        # Scheduled insertions: (word_position, line_text).  Claim positions
        # default to 30% / 60% of the target length.
        events: list[tuple[int, str]] = []
        claim_positions = [int(0.3 * target_words), int(0.6 * target_words)]
        if len(chain) == 1:
            claim_positions = [int(0.4 * target_words)]

        if fault_class == "arith":
            wrong = (a - 1) * b
            if break_roll < cfg.arith_break_prob:
                # The trace recovers on paper but the stated final answer
                # follows the wrong branch: the closing line disagrees with
                # the last claim.
                claims = [
                    (fault_pos or 0, _claim_sentence(rng, a, "*", b, wrong)),
                    ((fault_pos or 0) + 15, _claim_sentence(rng, *chain[1])),
                ]
                final_answer = wrong + c if template.kind != "ab_minus_c" else wrong - c
            else:
                # Consistent propagation: downstream steps build on the wrong
                # value, so the trace is internally coherent yet wrong.
                op = chain[1][1] if len(chain) > 1 else "+"
                second = {"*": wrong * c, "+": wrong + c, "-": wrong - c}[op]
                claims = [
                    (fault_pos or 0, _claim_sentence(rng, a, "*", b, wrong)),
                    ((fault_pos or 0) + 15, _claim_sentence(rng, wrong, op, c, second)),
                ]
                final_answer = second
            events.extend(claims)
        elif fault_class == "magnitude":
            big = int(rng.integers(12_000_000, 90_000_000))
            events.append((fault_pos or 0, _claim_sentence(rng, big, "+", 1, big + 1)))
            late = [int(0.70 * target_words), int(0.80 * target_words)]
            for pos, step in zip(late, chain):
                events.append((pos, _claim_sentence(rng, *step)))
            if break_roll < cfg.magnitude_break_prob:
                final_answer = big + 1
        else:
            for pos, step in zip(claim_positions, chain):
                events.append((pos, _claim_sentence(rng, *step)))
            if fault_class == "marker":
                wrong = max(1, chain[0][3] - int(rng.integers(1, 9)))
                events.append((fault_pos or 0, f"#### {wrong}"))
            elif fault_class == "leakage":
                events.append((fault_pos or 0, _LEAKAGE_LINE))
            elif fault_class == "hallucination":
                events.append((fault_pos or 0, _HALLUCINATION_LINE))
            elif fault_class == "incoherence":
                line = _INCOHERENCE_LINE.format(n=int(rng.integers(1, 9999)))
                events.append((fault_pos or 0, line))
                events.append(((fault_pos or 0) + 1, line))

        if quirk_pos is not None:
            # Arithmetically sound aside whose magnitude trips the relative
            # cap heuristic; harmless in the completed solution.
            base = max(b, c, a) + 1
            events.append((quirk_pos, _claim_sentence(rng, base, "*", 101, base * 101)))

        events.sort(key=lambda item: item[0])

        lines = [_OPENINGS[int(rng.integers(0, len(_OPENINGS)))]]
        words = len(lines[0].split())
        pending = list(events)
        # Strictly increasing filler counters: consecutive lines can only be
        # identical when the incoherence fault injects them on purpose.
        counter = int(rng.integers(1, 1000))
        # Reserve room for the closing two lines.
        budget = max(target_words - 12, words + 1)
        while words < budget or pending:
            if pending and words >= pending[0][0]:
                line = pending.pop(0)[1]
            elif words >= budget:
                break
            else:
                filler = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
                counter += int(rng.integers(1, 9))
                line = filler.format(n=counter)
            lines.append(line)
            words += len(line.split())
        lines.append(f"So the final tally comes to {final_answer}.")
        lines.append(f"#### {final_answer}")
        return "\n".join(lines)

    # -- generation -------------------------------------------------------------

    def generate(self, request: StageRequest) -> GenerationResult:
        plan = self.plan(request.prompt_index)
        if request.stage == Stage.PROBLEM:
            text = plan.problem_text
            return GenerationResult(text, len(text.split()), True)
        if request.stage == Stage.MID_SOLUTION:
            return self._slice_prefix(plan, request.max_tokens)
        if request.stage == Stage.FULL_SOLUTION:
            return self._continue(plan, request.prefix or "")
        if request.stage == Stage.EVALUATION:
            return self._judge_reply(request.instruction)
        raise BackendError(f"simulator cannot serve stage {request.stage!r}")

    def _slice_prefix(self, plan: TrajectoryPlan, max_tokens: int | None) -> GenerationResult:
        text = plan.solution_text
        total = plan.solution_word_count
        if max_tokens is None or max_tokens >= total:
            return GenerationResult(text, total, True)
        k = max(1, max_tokens)
        matches = list(re.finditer(r"\S+", text))
        end = matches[k - 1].end()
        return GenerationResult(text[:end], k, False)

    def _continue(self, plan: TrajectoryPlan, prefix: str) -> GenerationResult:
        full = plan.solution_text
        if not full.startswith(prefix):
            raise BackendError("continuation prefix does not match the planned solution")
        remainder = full[len(prefix) :]
        tokens = len(remainder.split())
        if tokens == 0:
            raise BackendError("nothing left to continue; the prefix is already complete")
        return GenerationResult(remainder, tokens, True)

    # -- judging ----------------------------------------------------------------

    def _judge_reply(self, instruction: str) -> GenerationResult:
        problem, solution = _split_rubric(instruction)
        rating = self.rate_pair(problem, solution)
        filler = (
            "The reasoning was checked step by step against the stated quantities "
            "and the closing answer line, with attention to formatting, relevance, "
            "arithmetic reliability, tone, duplication, and overall usefulness for training."
        )
        words_needed = max(self.config.judge_reply_words - 2, 1)
        reply = f"Rating: {rating}. " + " ".join(filler.split()[:words_needed])
        return GenerationResult(reply, len(reply.split()), True)

    def rate_pair(self, problem: str, solution: str) -> int:
        """Oracle 1-5 rating consistent with the simulator's latent labels."""
        from .validators import (  # local import to avoid a cycle at module load
            DEFAULT_HALLUCINATION_LEXICON,
            DEFAULT_LEAKAGE_MARKERS,
            extract_final_answer,
            parse_arith_claims,
        )

        if problem is None or solution is None:
            return 1
        if "?" not in problem:
            return 2
        first_alpha = next((ch for ch in problem if ch.isalpha()), "a")
        if not first_alpha.isupper():
            return 2
        if re.search(r"([!?.,;:])\1", problem):
            return 2
        if re.search(r"[㐀-鿿Ѐ-ӿ؀-ۿ]", problem):
            return 2

        truth = self._true_answer_from_problem(problem)
        if truth is None:
            return 2
        answer = extract_final_answer(solution)
        if answer is None or answer != truth:
            return 1

        lowered = solution.lower()
        if any(p.lower() in lowered for p in DEFAULT_HALLUCINATION_LEXICON):
            return 2
        if any(m in solution for m in DEFAULT_LEAKAGE_MARKERS):
            return 2
        for claim in parse_arith_claims(solution):
            if any(abs(v) > 10_000_000 for v in claim.values()):
                return 2
        lines = [ln for ln in solution.splitlines() if ln.strip()]
        if any(x == y for x, y in zip(lines, lines[1:])):
            return 2
        return 5

    @staticmethod
    def _true_answer_from_problem(problem: str) -> Fraction | None:
        short = _SHORT_REGEX.search(problem)
        if short:
            return Fraction(_short_answer(int(short.group(1)), int(short.group(2))))
        for template, pattern in _TEMPLATE_REGEXES:
            match = pattern.search(problem)
            if match:
                a, b, c = (int(g) for g in match.groups())
                return Fraction(template.answer(a, b, c))
        return None


_RUBRIC_PROBLEM = re.compile(r"^Problem:\n(.*?)\n\nSolution:\n(.*)\Z", re.DOTALL | re.MULTILINE)


def _split_rubric(instruction: str) -> tuple[str | None, str | None]:
    marker = "Problem:\n"
    idx = instruction.find(marker)
    if idx == -1:
        return None, None
    match = _RUBRIC_PROBLEM.search(instruction[idx:])
    if not match:
        return None, None
    return match.group(1), match.group(2)


# --- HTTP backend ------------------------------------------------------------

API_KEY_ENV = "STAGEGATE_API_KEY"


class HttpGenerator(GeneratorBackend):
    """Chat-completions client for an OpenAI-compatible inference server.

    Token accounting comes straight from the server's ``usage`` block; the
    completion side is what lands in the ledger.  Continuation requests resend
    the existing prefix as an assistant turn, which servers without raw
    continuation still honor.
    """

    capabilities = Capabilities(supports_continuation=True, reports_token_counts=True)

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: str | None = None,
        timeout: float = 60.0,
        session: Any | None = None,
    ):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._session = session or requests.Session()

    def _messages(self, request: StageRequest) -> list[dict[str, str]]:
        user = request.instruction
        if request.few_shot_exemplars:
            shots = "\n\n".join(request.few_shot_exemplars)
            user = f"{shots}\n\n{user}"
        messages = [{"role": "user", "content": user}]
        if request.stage == Stage.FULL_SOLUTION and request.prefix:
            messages.append({"role": "assistant", "content": request.prefix})
        return messages

    def generate(self, request: StageRequest) -> GenerationResult:
        import requests

        payload: dict[str, Any] = {
            "model": self.model,
            "messages": self._messages(request),
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        if request.stop:
            payload["stop"] = list(request.stop)
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self._session.post(
                f"{self.endpoint}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.exceptions.ConnectionError as exc:
            raise BackendUnreachable(f"cannot reach {self.endpoint}: {exc}") from exc
        except requests.exceptions.RequestException as exc:
            raise BackendError(f"request failed: {exc}") from exc
        if response.status_code != 200:
            raise BackendError(f"server returned {response.status_code}: {response.text[:200]}")
        try:
            data = response.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
            usage = data["usage"]
            tokens = int(usage["completion_tokens"])
            finished = choice.get("finish_reason", "stop") != "length"
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed response: {exc}") from exc
        return GenerationResult(text, max(tokens, 1), finished)


class ScriptedBackend(GeneratorBackend):
    """Replays fixed per-stage outputs; for tests and worked examples."""

    capabilities = Capabilities(supports_continuation=True, reports_token_counts=True)

    def __init__(self, outputs: Mapping[Stage, GenerationResult]):
        self.outputs = dict(outputs)

    def generate(self, request: StageRequest) -> GenerationResult:
        try:
            return self.outputs[request.stage]
        except KeyError:
            raise BackendError(f"no scripted output for stage {request.stage.name}")
