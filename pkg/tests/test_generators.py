import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings, strategies as st

from stagegate.core import Stage
from stagegate.generators import (
    BackendError,
    BackendUnreachable,
    CHAT_FAMILIES,
    Capabilities,
    GenerationResult,
    GeneratorBackend,
    HttpGenerator,
    ScriptedBackend,
    SimulatedGenerator,
    SimulatorConfig,
    StageRequest,
    adversarial_sim_config,
    apply_chat_template,
    calibrated_sim_config,
    generate_stage,
    parse_chat_template,
)
from stagegate.validators import RuleConfig, validate_solution


class TestChatTemplates:
    def test_chatml_user_only(self):
        assert (
            apply_chat_template("chatml", None, "Hi")
            == "<|im_start|>user\nHi<|im_end|>\n<|im_start|>assistant\n"
        )

    def test_chatml_with_system(self):
        wire = apply_chat_template("chatml", "S", "U")
        assert wire == (
            "<|im_start|>system\nS<|im_end|>\n"
            "<|im_start|>user\nU<|im_end|>\n"
            "<|im_start|>assistant\n"
        )

    def test_llama3_layout(self):
        wire = apply_chat_template("llama3", "S", "U")
        assert wire.startswith(
            "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\nS<|eot_id|>"
        )
        assert wire.endswith("<|start_header_id|>assistant<|end_header_id|>\n\n")
        assert "<|start_header_id|>user<|end_header_id|>\n\nU<|eot_id|>" in wire

    def test_deepseek_plain(self):
        assert apply_chat_template("deepseek", None, "Hi") == "User: Hi\n\nAssistant:"

    def test_phi3_layout(self):
        assert (
            apply_chat_template("phi3", None, "Hi")
            == "<|user|>\nHi<|end|>\n<|assistant|>\n"
        )

    def test_mistral_bracket_format(self):
        assert apply_chat_template("mistral", None, "Hi") == "[INST] Hi [/INST]"

    @pytest.mark.parametrize("family", ["deepseek", "mistral"])
    def test_system_folds_into_user_when_unsupported(self, family, caplog):
        with caplog.at_level("INFO"):
            wire = apply_chat_template(family, "Be brief.", "Hi")
        assert "Be brief.\n\nHi" in wire
        assert any("no system slot" in r.message for r in caplog.records)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            apply_chat_template("gpt2", None, "Hi")


_MARKERS = (
    "<|", "|>", "[INST]", "[/INST]", "\n\nAssistant:", "User: ",
)
_content = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="<>[]|"),
    min_size=1,
    max_size=60,
).filter(lambda s: not any(m in s for m in _MARKERS) and s == s.strip())


@settings(max_examples=60, deadline=None)
@given(family=st.sampled_from(CHAT_FAMILIES), system=st.none() | _content, user=_content)
def test_template_round_trip(family, system, user):
    wire = apply_chat_template(family, system, user)
    turns = parse_chat_template(family, wire)
    if system is None or family in ("deepseek", "mistral"):
        expected_user = user if system is None else f"{system}\n\n{user}"
        assert ("user", expected_user) in turns
    else:
        assert ("system", system) in turns
        assert ("user", user) in turns


def _request(stage, index=0, **kwargs):
    return StageRequest(stage=stage, instruction="solve", prompt_index=index, **kwargs)


class TestSimulator:
    def test_same_seed_same_output(self):
        a = SimulatedGenerator(SimulatorConfig(seed=9))
        b = SimulatedGenerator(SimulatorConfig(seed=9))
        for index in range(20):
            for stage in (Stage.PROBLEM, Stage.MID_SOLUTION):
                ra = a.generate(_request(stage, index, max_tokens=80))
                rb = b.generate(_request(stage, index, max_tokens=80))
                assert (ra.text, ra.tokens) == (rb.text, rb.tokens)

    def test_token_counts_are_word_counts(self):
        sim = SimulatedGenerator(SimulatorConfig(seed=3))
        result = sim.generate(_request(Stage.PROBLEM, 5))
        assert result.tokens == len(result.text.split())

    def test_prefix_budget_respected(self):
        sim = SimulatedGenerator(SimulatorConfig(seed=3))
        result = sim.generate(_request(Stage.MID_SOLUTION, 1, max_tokens=100))
        assert result.tokens == 100
        assert len(result.text.split()) == 100
        assert not result.finished

    def test_continuation_extends_prefix_exactly(self):
        sim = SimulatedGenerator(SimulatorConfig(seed=3))
        prefix = sim.generate(_request(Stage.MID_SOLUTION, 1, max_tokens=100))
        rest = sim.generate(_request(Stage.FULL_SOLUTION, 1, prefix=prefix.text))
        full = prefix.text + rest.text
        assert full == sim.plan(1).solution_text
        assert prefix.tokens + rest.tokens == sim.plan(1).solution_word_count

    def test_mismatched_prefix_rejected(self):
        sim = SimulatedGenerator(SimulatorConfig(seed=3))
        with pytest.raises(BackendError):
            sim.generate(_request(Stage.FULL_SOLUTION, 1, prefix="something else"))

    def test_fault_artifacts_materialize(self):
        from stagegate.validators import parse_arith_claims

        sim = SimulatedGenerator(calibrated_sim_config(seed=42))
        seen = {}
        for index in range(1500):
            plan = sim.plan(index)
            if plan.fault_class and plan.fault_class not in seen:
                seen[plan.fault_class] = plan
        assert {"arith", "marker", "leakage", "hallucination", "magnitude"} <= set(seen)
        # The arithmetic fault states a product with the wrong result, the
        # "4 x 60 = 180" shape: parseable and verifiably false.
        bad_claims = [
            c for c in parse_arith_claims(seen["arith"].solution_text) if not c.holds()
        ]
        assert len(bad_claims) == 1
        assert seen["marker"].solution_text.count("####") >= 2
        assert "SYSTEM:" in seen["leakage"].solution_text
        assert "As an AI" in seen["hallucination"].solution_text
        huge = [
            v
            for c in parse_arith_claims(seen["magnitude"].solution_text)
            for v in c.values()
            if abs(v) > 10_000_000
        ]
        assert huge

    def test_incoherence_repeats_a_line(self):
        sim = SimulatedGenerator(calibrated_sim_config(seed=42))
        for index in range(4000):
            plan = sim.plan(index)
            if plan.fault_class == "incoherence":
                lines = [l for l in plan.solution_text.splitlines() if l.strip()]
                assert any(x == y for x, y in zip(lines, lines[1:]))
                return
        pytest.fail("no incoherence fault drawn")

    def test_ground_truth_matches_full_final_validation(self):
        """The latent label equals what completing and final-validating decides."""
        sim = SimulatedGenerator(calibrated_sim_config(seed=11))
        cfg = RuleConfig()
        for index in range(400):
            plan = sim.plan(index)
            solution_ok = validate_solution(plan.problem_text, plan.solution_text, cfg).all_passed
            judge_ok = sim.rate_pair(plan.problem_text, plan.solution_text) >= 3
            assert (solution_ok and judge_ok) == plan.latent_good, (
                index,
                plan.fault_class,
                plan.quirk_word_pos,
            )

    def test_adversarial_config_flips_artifact_coupling(self):
        sim = SimulatedGenerator(adversarial_sim_config(seed=5))
        quirky_good = bad_with_visible_fault = 0
        for index in range(600):
            plan = sim.plan(index)
            if plan.latent_good and plan.quirk_word_pos is not None:
                quirky_good += 1
            if not plan.latent_good and plan.fault_class != "incoherence":
                bad_with_visible_fault += 1
        assert quirky_good > 100
        assert bad_with_visible_fault == 0

    def test_judge_reply_is_parseable_and_costed(self):
        sim = SimulatedGenerator(SimulatorConfig(seed=3))
        plan = sim.plan(2)
        from stagegate.evaluation import load_judge_rubric

        instruction = load_judge_rubric().format(
            problem=plan.problem_text, solution=plan.solution_text
        )
        result = sim.generate(_request(Stage.EVALUATION, 2).__class__(
            stage=Stage.EVALUATION, instruction=instruction, prompt_index=2
        ))
        assert result.text.startswith("Rating: ")
        assert result.tokens == len(result.text.split())


class _FlakyBackend(GeneratorBackend):
    capabilities = Capabilities(True, True)

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def generate(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise BackendError("boom")
        return GenerationResult("ok", 1, True)


class TestRetries:
    def test_retries_then_succeeds(self):
        backend = _FlakyBackend(failures=2)
        result = generate_stage(backend, _request(Stage.PROBLEM), retries=3, sleep=lambda _: None)
        assert result.text == "ok"
        assert backend.calls == 3

    def test_budget_exhaustion_raises(self):
        backend = _FlakyBackend(failures=10)
        with pytest.raises(BackendError):
            generate_stage(backend, _request(Stage.PROBLEM), retries=2, sleep=lambda _: None)
        assert backend.calls == 3

    def test_backoff_is_exponential(self):
        delays = []
        backend = _FlakyBackend(failures=3)
        generate_stage(backend, _request(Stage.PROBLEM), retries=3, base_delay=1.0,
                       sleep=delays.append)
        assert delays == [1.0, 2.0, 4.0]


class _StubHandler(BaseHTTPRequestHandler):
    status = 200
    seen_auth: list = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        type(self).seen_auth.append(self.headers.get("Authorization"))
        reply = {
            "choices": [
                {"message": {"content": f"echo:{body['messages'][-1]['content']}"},
                 "finish_reason": "stop"}
            ],
            "usage": {"prompt_tokens": 17, "completion_tokens": 23},
        }
        payload = json.dumps(reply).encode()
        self.send_response(self.status)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        if self.status == 200:
            self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestHttpBackend:
    def test_usage_reported_tokens_are_trusted_exactly(self, stub_server):
        backend = HttpGenerator(stub_server, "test-model")
        result = backend.generate(_request(Stage.PROBLEM))
        assert result.tokens == 23
        assert result.text.startswith("echo:")
        assert result.finished

    def test_continuation_resends_prefix_as_assistant_turn(self, stub_server):
        backend = HttpGenerator(stub_server, "test-model")
        result = backend.generate(_request(Stage.FULL_SOLUTION, prefix="partial text"))
        # The stub echoes the last message, which must be the prefix turn.
        assert result.text == "echo:partial text"

    def test_server_error_raises_backend_error(self, stub_server):
        _StubHandler.status = 500
        try:
            backend = HttpGenerator(stub_server, "test-model")
            with pytest.raises(BackendError):
                backend.generate(_request(Stage.PROBLEM))
        finally:
            _StubHandler.status = 200

    def test_unreachable_endpoint(self):
        backend = HttpGenerator("http://127.0.0.1:9", "test-model", timeout=0.5)
        with pytest.raises(BackendUnreachable):
            backend.generate(_request(Stage.PROBLEM))

    def test_api_key_flows_from_environment(self, stub_server, monkeypatch):
        from stagegate.generators import API_KEY_ENV

        monkeypatch.setenv(API_KEY_ENV, "sekrit")
        _StubHandler.seen_auth.clear()
        HttpGenerator(stub_server, "test-model").generate(_request(Stage.PROBLEM))
        assert _StubHandler.seen_auth[-1] == "Bearer sekrit"


class TestScriptedBackend:
    def test_replays_fixed_outputs(self):
        backend = ScriptedBackend({Stage.PROBLEM: GenerationResult("Why?", 12, True)})
        assert backend.generate(_request(Stage.PROBLEM)).tokens == 12
        with pytest.raises(BackendError):
            backend.generate(_request(Stage.MID_SOLUTION))
