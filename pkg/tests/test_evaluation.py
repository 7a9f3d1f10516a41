import math

import numpy as np
import pytest

from stagegate.core import Stage, RuleOutcome, ValidationReport
from stagegate.evaluation import (
    DegenerateTextError,
    MinHashIndex,
    MinHashParams,
    estimated_jaccard,
    final_validator_product,
    judge_sample,
    load_judge_rubric,
    minhash_signature,
    parse_judge_score,
)
from stagegate.generators import (
    BackendError,
    Capabilities,
    GenerationResult,
    GeneratorBackend,
    ScriptedBackend,
)

PARAMS = MinHashParams()


def brute_force_jaccard(a: str, b: str, k: int = 5) -> float:
    """Oracle: exact Jaccard over the two character-shingle sets."""
    sa = {a[i : i + k] for i in range(len(a) - k + 1)}
    sb = {b[i : i + k] for i in range(len(b) - k + 1)}
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def random_text(rng: np.random.Generator, length: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz "
    return "".join(letters[i] for i in rng.integers(0, len(letters), size=length))


def edit_text(rng: np.random.Generator, text: str, fraction: float) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    chars = list(text)
    n_edits = int(len(chars) * fraction)
    for pos in rng.choice(len(chars), size=n_edits, replace=False):
        chars[pos] = letters[int(rng.integers(0, 26))]
    return "".join(chars)


class TestMinHashSignature:
    def test_identical_texts_identical_signatures(self):
        text = "the quick brown fox jumps over the lazy dog" * 3
        sig_a = minhash_signature(text, PARAMS)
        sig_b = minhash_signature(text, PARAMS)
        assert np.array_equal(sig_a, sig_b)
        assert estimated_jaccard(sig_a, sig_b) == 1.0

    def test_disjoint_alphabets_estimate_zero(self):
        sig_a = minhash_signature("abcdefghij" * 10, PARAMS)
        sig_b = minhash_signature("0123456789" * 10, PARAMS)
        assert estimated_jaccard(sig_a, sig_b) == 0.0

    def test_ten_percent_edit_matches_brute_force(self):
        rng = np.random.default_rng(7)
        base = random_text(rng, 600)
        edited = edit_text(rng, base, 0.10)
        truth = brute_force_jaccard(base, edited)
        estimate = estimated_jaccard(
            minhash_signature(base, PARAMS), minhash_signature(edited, PARAMS)
        )
        sigma = math.sqrt(truth * (1 - truth) / PARAMS.num_hashes)
        assert abs(estimate - truth) <= 3 * sigma

    def test_short_text_is_degenerate(self):
        with pytest.raises(DegenerateTextError):
            minhash_signature("abc", PARAMS)

    def test_signature_length_matches_num_hashes(self):
        params = MinHashParams(num_hashes=64)
        assert minhash_signature("some long enough text", params).shape == (64,)


class TestMinHashIndex:
    def test_first_sample_is_never_a_duplicate(self):
        index = MinHashIndex(PARAMS)
        sig = minhash_signature("a perfectly original sentence", PARAMS)
        assert index.is_duplicate(sig, "s0") is False

    def test_exact_resubmission_is_flagged(self):
        index = MinHashIndex(PARAMS)
        sig = minhash_signature("a perfectly original sentence", PARAMS)
        index.is_duplicate(sig, "s0")
        assert index.is_duplicate(sig, "s1") is True

    def test_monotone_once_inserted_always_flagged(self):
        index = MinHashIndex(PARAMS)
        text = "some reusable sample text for the index"
        index.is_duplicate(minhash_signature(text, PARAMS), "s0")
        for label in ("s1", "s2", "s3"):
            assert index.is_duplicate(minhash_signature(text, PARAMS), label)
        assert index.ids == ("s0",)

    def test_hundred_random_texts_have_no_duplicates(self):
        rng = np.random.default_rng(13)
        texts = [random_text(rng, 300) for _ in range(100)]
        # Oracle: brute-force pairwise Jaccard confirms the corpus is clean.
        for i in range(0, 100, 7):
            for j in range(i + 1, 100, 13):
                assert brute_force_jaccard(texts[i], texts[j]) < 0.8
        index = MinHashIndex(PARAMS)
        flags = [index.is_duplicate(minhash_signature(t, PARAMS), str(i)) for i, t in enumerate(texts)]
        assert sum(flags) == 0

    def test_snapshot_round_trip(self, tmp_path):
        index = MinHashIndex(MinHashParams(num_hashes=32))
        texts = ["first sample text here", "second sample text here"]
        for i, text in enumerate(texts):
            index.is_duplicate(minhash_signature(text, index.params), f"s{i}")
        path = tmp_path / "index.bin"
        index.save(path)
        loaded = MinHashIndex.load(path)
        assert loaded.params == index.params
        assert loaded.ids == index.ids
        assert loaded.is_duplicate(minhash_signature(texts[0], loaded.params), "again") is True

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            MinHashIndex.load(path)


class _FailingBackend(GeneratorBackend):
    capabilities = Capabilities(True, True)

    def generate(self, request):
        raise BackendError("judge offline")


def _scripted_judge(reply: str, tokens: int = 9):
    return ScriptedBackend({Stage.EVALUATION: GenerationResult(reply, tokens, True)})


class TestJudge:
    def test_rubric_asset_has_slots(self):
        rubric = load_judge_rubric()
        assert "{problem}" in rubric and "{solution}" in rubric

    def test_parse_score(self):
        assert parse_judge_score("Rating: 5") == 5
        assert parse_judge_score("2") == 2
        assert parse_judge_score("great!") is None

    def test_clear_accept(self):
        verdict = judge_sample("p?", "#### 1", _scripted_judge("Rating: 5. Clean."))
        assert verdict.score == 5 and verdict.accepted
        assert verdict.rule_hit is None

    def test_low_score_rejects(self):
        verdict = judge_sample("p?", "#### 1", _scripted_judge("2"))
        assert verdict.score == 2 and not verdict.accepted
        assert verdict.rule_hit == "judge.low_score"

    def test_threshold_boundary_accepts_three(self):
        verdict = judge_sample("p?", "#### 1", _scripted_judge("Rating: 3"))
        assert verdict.accepted

    def test_unparseable_rejects_after_retries(self):
        judge = _scripted_judge("great!")
        verdict = judge_sample("p?", "#### 1", judge, retries=2)
        assert verdict.score is None and not verdict.accepted
        assert verdict.rule_hit == "judge.unparseable"
        assert verdict.tokens == 27  # three attempts, nine tokens each

    def test_backend_failure_rejects(self):
        verdict = judge_sample("p?", "#### 1", _FailingBackend())
        assert not verdict.accepted
        assert verdict.rule_hit == "judge.backend_error"


def _report(all_pass: bool) -> ValidationReport:
    outcomes = [RuleOutcome(f"solution.rule{i}", True) for i in range(5)]
    outcomes.append(RuleOutcome("solution.rule5", all_pass))
    return ValidationReport(Stage.FULL_SOLUTION, tuple(outcomes))


class TestFinalProduct:
    @pytest.mark.parametrize("solution_ok", [True, False])
    @pytest.mark.parametrize("duplicate", [True, False])
    @pytest.mark.parametrize("judge_ok", [True, False])
    def test_truth_table(self, solution_ok, duplicate, judge_ok):
        product = final_validator_product(_report(solution_ok), duplicate, judge_ok)
        assert product == int(solution_ok and not duplicate and judge_ok)

    def test_flipping_any_factor_zeroes_the_product(self):
        assert final_validator_product(_report(True), False, True) == 1
        assert final_validator_product(_report(False), False, True) == 0
        assert final_validator_product(_report(True), True, True) == 0
        assert final_validator_product(_report(True), False, False) == 0
