"""Rule-based validators for the three gated generation stages.

Each validator is a pure function from text to a :class:`ValidationReport`
with six named checks.  Rule ids are stable strings and form the public
contract for reports and rejection logs:

* ``problem.*``  - well-posedness checks on the generated problem (stage 1)
* ``trace.*``    - audit of the partial reasoning trace (stage 2)
* ``solution.*`` - convergence checks on the completed solution (stage 3)

The arithmetic audit parses explicit claims of the form
``<num> <op> <num> [... <op> <num>] = <num>`` and re-evaluates them with
exact rational arithmetic, left to right.  Chain-of-thought traces state
running totals rather than algebraic expressions, so no operator precedence
is applied.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction

from .core import Caps, RuleOutcome, Stage, ValidationReport

DEFAULT_HALLUCINATION_LEXICON = (
    "as an AI",
    "I cannot",
    "hypothetically",
    "let's assume the answer",
)
DEFAULT_LEAKAGE_MARKERS = ("SYSTEM:", "User:")
DEFAULT_FINAL_MARKER = "####"

PROBLEM_RULES = (
    "problem.question_mark",
    "problem.has_number",
    "problem.word_count",
    "problem.english_only",
    "problem.clean_ending",
    "problem.capitalized",
)
TRACE_RULES = (
    "trace.no_hallucination",
    "trace.no_premature_final",
    "trace.single_final_marker",
    "trace.arithmetic",
    "trace.magnitude",
    "trace.no_unexpected_negative",
)
SOLUTION_RULES = (
    "solution.final_line",
    "solution.answer_consistent",
    "solution.complete_ending",
    "solution.no_leakage",
    "solution.single_final",
    "solution.magnitude",
)

RULES_BY_STAGE = {
    Stage.PROBLEM: PROBLEM_RULES,
    Stage.MID_SOLUTION: TRACE_RULES,
    Stage.FULL_SOLUTION: SOLUTION_RULES,
}


@dataclass(frozen=True)
class RuleConfig:
    """Tunable inputs shared by the stage validators."""

    hallucination_lexicon: tuple[str, ...] = DEFAULT_HALLUCINATION_LEXICON
    leakage_markers: tuple[str, ...] = DEFAULT_LEAKAGE_MARKERS
    final_marker: str = DEFAULT_FINAL_MARKER
    caps: Caps = field(default_factory=Caps)
    # Absolute slack when comparing rationals; zero keeps comparisons exact.
    arith_tolerance: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        if not self.hallucination_lexicon or not self.leakage_markers:
            raise ValueError("lexicon and marker lists must be non-empty")
        if not self.final_marker:
            raise ValueError("final marker must be non-empty")


# Number literal: optional currency symbol, optional sign, digits with
# optional thousands separators and decimal part.
_NUM = r"(?:[$€£]\s?)?[-−]?\d{1,3}(?:,\d{3})+(?:\.\d+)?|(?:[$€£]\s?)?[-−]?\d+(?:\.\d+)?"
_OP = r"[+\-−*×/÷x]"
# Claims stay on a single line; CoT steps do not wrap mid-equation.
_WS = r"[ \t]*"
CLAIM_RE = re.compile(
    rf"(?P<expr>(?:{_NUM})(?:{_WS}(?:{_OP}){_WS}(?:{_NUM}))+){_WS}={_WS}(?P<result>{_NUM})"
)
NUMBER_RE = re.compile(_NUM)
_OP_RE = re.compile(_OP)

_NON_ENGLISH_RE = re.compile(
    "["
    "㐀-䶿"  # CJK extension A
    "一-鿿"  # CJK unified
    "぀-ヿ"  # kana
    "가-힯"  # hangul
    "Ѐ-ӿ"  # Cyrillic
    "؀-ۿ"  # Arabic
    "]"
)
_REPEATED_PUNCT_RE = re.compile(r"([!?.,;:])\1")
_TERMINAL_END_RE = re.compile(r"[.?!][\"')\]]*\s*$")

_CANONICAL_OPS = {
    "+": "+",
    "-": "-",
    "−": "-",
    "*": "*",
    "x": "*",
    "×": "*",
    "/": "/",
    "÷": "/",
}


def parse_number(token: str) -> Fraction:
    """Parse one numeric literal, stripping currency symbols and separators."""
    cleaned = token.strip().lstrip("$€£").strip()
    cleaned = cleaned.replace(",", "").replace("−", "-")
    return Fraction(cleaned)


@dataclass(frozen=True)
class ArithClaim:
    """One explicit arithmetic claim extracted from a trace."""

    operands: tuple[Fraction, ...]
    operators: tuple[str, ...]
    claimed_result: Fraction
    source_span: tuple[int, int]

    def __post_init__(self) -> None:
        if len(self.operands) < 2 or len(self.operators) != len(self.operands) - 1:
            raise ValueError("claim needs at least two operands and matching operators")

    @property
    def operator(self) -> str:
        return self.operators[0]

    def expected(self) -> Fraction | None:
        """Left-to-right evaluation of the left-hand side; None on division by zero."""
        acc = self.operands[0]
        for op, operand in zip(self.operators, self.operands[1:]):
            if op == "+":
                acc = acc + operand
            elif op == "-":
                acc = acc - operand
            elif op == "*":
                acc = acc * operand
            else:
                if operand == 0:
                    return None
                acc = acc / operand
        return acc

    def holds(self, tolerance: Fraction = Fraction(0)) -> bool:
        expected = self.expected()
        if expected is None:
            return False
        return abs(expected - self.claimed_result) <= tolerance

    def values(self) -> tuple[Fraction, ...]:
        return self.operands + (self.claimed_result,)


def parse_arith_claims(text: str, *, drop_trailing: bool = False) -> list[ArithClaim]:
    """Extract every arithmetic claim from ``text``.

    Malformed spans are skipped, never fatal.  With ``drop_trailing`` a claim
    whose match runs to the very end of the text is discarded: a truncated
    partial generation may have cut the final number short, and a mangled
    literal must not be audited as if the model asserted it.
    """
    claims: list[ArithClaim] = []
    for match in CLAIM_RE.finditer(text):
        if drop_trailing and match.end() >= len(text.rstrip()):
            continue
        try:
            expr = match.group("expr")
            operands = [parse_number(tok) for tok in NUMBER_RE.findall(expr)]
            stripped = NUMBER_RE.sub(" ", expr)
            operators = [_CANONICAL_OPS[op] for op in _OP_RE.findall(stripped)]
            claimed = parse_number(match.group("result"))
        except (ValueError, ZeroDivisionError, KeyError):
            continue
        if len(operands) < 2 or len(operators) != len(operands) - 1:
            continue
        claims.append(
            ArithClaim(tuple(operands), tuple(operators), claimed, (match.start(), match.end()))
        )
    return claims


def extract_final_answer(text: str, marker: str = DEFAULT_FINAL_MARKER) -> Fraction | None:
    """Return the number following the unique final marker, else None.

    A missing marker and a duplicated marker both yield None: an answer is
    only trusted when it is stated exactly once.
    """
    if text.count(marker) != 1:
        return None
    _, _, rest = text.partition(marker)
    first_line = rest.splitlines()[0] if rest else ""
    match = NUMBER_RE.search(first_line)
    if match is None:
        return None
    try:
        return parse_number(match.group(0))
    except ValueError:
        return None


def problem_numbers(problem: str) -> list[Fraction]:
    """All numeric literals stated in the problem, signs included."""
    values = []
    for token in NUMBER_RE.findall(problem):
        try:
            values.append(parse_number(token))
        except ValueError:
            continue
    return values


def _report(stage: Stage, outcomes: list[RuleOutcome]) -> ValidationReport:
    return ValidationReport(stage=stage, outcomes=tuple(outcomes))


def validate_problem(problem: str, cfg: RuleConfig) -> ValidationReport:
    """Stage-1 well-posedness checks on a generated problem."""
    if not problem:
        raise ValueError("problem text must be non-empty")
    outcomes = []

    outcomes.append(
        RuleOutcome("problem.question_mark", "?" in problem, "expects an explicit question")
    )

    has_number = re.search(r"\d", problem) is not None
    outcomes.append(RuleOutcome("problem.has_number", has_number, "expects at least one numeral"))

    words = len(problem.split())
    in_range = cfg.caps.word_min <= words <= cfg.caps.word_max
    outcomes.append(
        RuleOutcome(
            "problem.word_count",
            in_range,
            f"word_count={words} bounds=[{cfg.caps.word_min},{cfg.caps.word_max}]",
        )
    )

    foreign = _NON_ENGLISH_RE.search(problem)
    outcomes.append(
        RuleOutcome(
            "problem.english_only",
            foreign is None,
            "" if foreign is None else f"non-English codepoint {foreign.group(0)!r}",
        )
    )

    repeated = _REPEATED_PUNCT_RE.search(problem)
    ends_clean = _TERMINAL_END_RE.search(problem) is not None
    outcomes.append(
        RuleOutcome(
            "problem.clean_ending",
            repeated is None and ends_clean,
            "repeated punctuation" if repeated else ("" if ends_clean else "cut-off suffix"),
        )
    )

    first_alpha = next((c for c in problem if c.isalpha()), None)
    outcomes.append(
        RuleOutcome(
            "problem.capitalized",
            first_alpha is not None and first_alpha.isupper(),
            "first alphabetic character must be uppercase",
        )
    )
    return _report(Stage.PROBLEM, outcomes)


def _marker_lines(text: str, marker: str) -> list[int]:
    return [i for i, line in enumerate(text.splitlines()) if marker in line]


def _premature_final(text: str, marker: str) -> bool:
    """True when a final marker is followed by further non-whitespace text."""
    lines = text.splitlines()
    marked = _marker_lines(text, marker)
    for idx in marked:
        if any(line.strip() for line in lines[idx + 1 :]):
            return True
    return False


def _magnitude_violation(
    values: tuple[Fraction, ...], problem_max: Fraction | None, caps: Caps
) -> str:
    for value in values:
        mag = abs(value)
        if mag > caps.magnitude_absolute:
            return f"value {value} exceeds absolute cap {caps.magnitude_absolute}"
        if problem_max is not None and problem_max > 0:
            if mag > Fraction(caps.magnitude_relative) * problem_max:
                return (
                    f"value {value} exceeds {caps.magnitude_relative}x problem max {problem_max}"
                )
    return ""


def validate_trace(problem: str, partial_solution: str, cfg: RuleConfig) -> ValidationReport:
    """Stage-2 audit of a partial reasoning trace.

    The text is typically a truncated prefix, so the claim parser ignores a
    claim that runs up to the cut point.
    """
    if not partial_solution:
        raise ValueError("partial solution text must be non-empty")
    outcomes = []

    lowered = partial_solution.lower()
    hit = next((p for p in cfg.hallucination_lexicon if p.lower() in lowered), None)
    outcomes.append(
        RuleOutcome(
            "trace.no_hallucination",
            hit is None,
            "" if hit is None else f"lexicon phrase {hit!r}",
        )
    )

    outcomes.append(
        RuleOutcome(
            "trace.no_premature_final",
            not _premature_final(partial_solution, cfg.final_marker),
            "final marker followed by additional text",
        )
    )

    marker_count = partial_solution.count(cfg.final_marker)
    outcomes.append(
        RuleOutcome(
            "trace.single_final_marker",
            marker_count <= 1,
            f"marker_count={marker_count}",
        )
    )

    claims = parse_arith_claims(partial_solution, drop_trailing=True)
    bad_claim = next((c for c in claims if not c.holds(cfg.arith_tolerance)), None)
    outcomes.append(
        RuleOutcome(
            "trace.arithmetic",
            bad_claim is None,
            ""
            if bad_claim is None
            else f"claim at {bad_claim.source_span} states {bad_claim.claimed_result}, "
            f"evaluates to {bad_claim.expected()}",
        )
    )

    stated = problem_numbers(problem)
    problem_max = max(stated, default=None)
    all_values: tuple[Fraction, ...] = tuple(v for c in claims for v in c.values())
    magnitude_detail = _magnitude_violation(all_values, problem_max, cfg.caps)
    outcomes.append(RuleOutcome("trace.magnitude", magnitude_detail == "", magnitude_detail))

    nonnegative_problem = all(v >= 0 for v in stated)
    negative = next((v for v in all_values if v < 0), None)
    unexpected = nonnegative_problem and negative is not None
    outcomes.append(
        RuleOutcome(
            "trace.no_unexpected_negative",
            not unexpected,
            "" if not unexpected else f"negative value {negative} with nonnegative problem",
        )
    )
    return _report(Stage.MID_SOLUTION, outcomes)


def validate_solution(problem: str, full_solution: str, cfg: RuleConfig) -> ValidationReport:
    """Stage-3 convergence checks on a completed solution."""
    if not full_solution:
        raise ValueError("solution text must be non-empty")
    outcomes = []
    marker = re.escape(cfg.final_marker)
    final_line_re = re.compile(rf"^{marker}[ \t]+(?:{_NUM})[ \t]*$", re.MULTILINE)

    outcomes.append(
        RuleOutcome(
            "solution.final_line",
            final_line_re.search(full_solution) is not None,
            f"expects one line of the form {cfg.final_marker} <number>",
        )
    )

    final_answer = extract_final_answer(full_solution, cfg.final_marker)
    claims = parse_arith_claims(full_solution)
    if not claims:
        # Nothing to align against; the answer cannot be contradicted.
        consistent, detail = True, "no arithmetic claims to compare"
    elif final_answer is None:
        consistent, detail = False, "no unique final answer to compare"
    else:
        last_value = claims[-1].expected()
        consistent = last_value is not None and abs(last_value - final_answer) <= cfg.arith_tolerance
        detail = f"final={final_answer} last_claim={last_value}"
    outcomes.append(RuleOutcome("solution.answer_consistent", consistent, detail))

    stripped = full_solution.rstrip()
    last_line = stripped.splitlines()[-1] if stripped else ""
    ends_on_marker = cfg.final_marker in last_line
    ends_clean = _TERMINAL_END_RE.search(stripped) is not None or ends_on_marker
    outcomes.append(
        RuleOutcome("solution.complete_ending", ends_clean, "generation cut off mid-sentence")
    )

    leak = next((m for m in cfg.leakage_markers if m in full_solution), None)
    outcomes.append(
        RuleOutcome(
            "solution.no_leakage",
            leak is None,
            "" if leak is None else f"leakage marker {leak!r}",
        )
    )

    marker_count = full_solution.count(cfg.final_marker)
    outcomes.append(
        RuleOutcome("solution.single_final", marker_count == 1, f"marker_count={marker_count}")
    )

    magnitude_ok = True
    detail = "no final answer to bound"
    if final_answer is not None:
        magnitude_ok = abs(final_answer) <= cfg.caps.magnitude_absolute
        detail = f"final={final_answer} cap={cfg.caps.magnitude_absolute}"
    outcomes.append(RuleOutcome("solution.magnitude", magnitude_ok, detail))
    return _report(Stage.FULL_SOLUTION, outcomes)
