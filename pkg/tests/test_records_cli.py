import json

import pytest

from stagegate.cli import (
    ConfigError,
    EXIT_BACKEND,
    EXIT_CONFIG,
    EXIT_OK,
    load_config,
    load_prompts,
    main,
)
from stagegate.records import (
    JsonlWriter,
    RecordFileError,
    TRAJECTORY_SCHEMA,
    TruncatedRecordError,
    read_records,
)

from test_evaluation import brute_force_jaccard, edit_text, random_text
import numpy as np


class TestRecordFiles:
    def test_round_trip_with_header(self, tmp_path):
        path = tmp_path / "log.jsonl"
        with JsonlWriter(path, TRAJECTORY_SCHEMA, {"seed": 1}) as writer:
            writer.emit({"id": 0, "kind": "trajectory"})
            writer.emit({"id": 1, "kind": "trajectory"})
        header, records = read_records(path, TRAJECTORY_SCHEMA)
        assert header["schema"] == TRAJECTORY_SCHEMA
        assert header["config"] == {"seed": 1}
        assert [r["id"] for r in records] == [0, 1]
        assert [r["ts"] for r in records] == [0, 1]

    def test_truncated_final_line_detected(self, tmp_path):
        path = tmp_path / "log.jsonl"
        with JsonlWriter(path, TRAJECTORY_SCHEMA, {}) as writer:
            writer.emit({"id": 0})
            writer.emit({"id": 1})
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])  # tear the final record
        with pytest.raises(TruncatedRecordError) as excinfo:
            read_records(path, TRAJECTORY_SCHEMA)
        assert excinfo.value.complete_records == 1

    def test_missing_trailing_newline_is_torn(self, tmp_path):
        path = tmp_path / "log.jsonl"
        with JsonlWriter(path, TRAJECTORY_SCHEMA, {}) as writer:
            writer.emit({"id": 0})
        path.write_bytes(path.read_bytes().rstrip(b"\n"))
        with pytest.raises(TruncatedRecordError):
            read_records(path, TRAJECTORY_SCHEMA)

    def test_schema_mismatch(self, tmp_path):
        path = tmp_path / "log.jsonl"
        with JsonlWriter(path, "other.v1", {}):
            pass
        with pytest.raises(RecordFileError):
            read_records(path, TRAJECTORY_SCHEMA)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text('{"id": 0}\n')
        with pytest.raises(RecordFileError):
            read_records(path)


class TestConfig:
    def test_defaults(self):
        config = load_config(None)
        assert config.seed == 42
        assert config.batch_size == 64
        assert config.cutoff == 0.5
        assert config.sampling_mix == 0.30
        assert config.problem_temperature == 0.7
        assert config.solution_temperature == 0.0
        assert config.judge_reject_below == 3

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{"sed": 7}')
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{"caps": {"word_mim": 9}}')
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{"seed": 7, "cutoff": 0.3}')
        config = load_config(str(path), {"seed": 9})
        assert config.seed == 9
        assert config.cutoff == 0.3

    def test_canonical_echo_round_trips(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{"thresholds": [4, 5, 5], "cost_template": [1, 2, 3, 4]}')
        config = load_config(str(path))
        echo = config.canonical()
        assert echo["thresholds"] == [4, 5, 5]
        assert json.loads(json.dumps(echo)) == echo

    def test_prompts_plain_and_json(self, tmp_path):
        path = tmp_path / "prompts.jsonl"
        path.write_text('make one\n{"prompt": "make two", "difficulty": 600, "tag": "t"}\n')
        prompts = load_prompts(path)
        assert prompts[0].text == "make one" and prompts[0].difficulty == 50.0
        assert prompts[1].difficulty == 600 and prompts[1].tag == "t"

    def test_out_of_range_difficulty_rejected_at_load(self, tmp_path):
        path = tmp_path / "prompts.jsonl"
        path.write_text('{"prompt": "x", "difficulty": 9999}\n')
        with pytest.raises(ValueError, match="difficulty"):
            load_prompts(path)
        assert main(["generate", str(path)]) == EXIT_CONFIG


def write_prompts(tmp_path, n, name="prompts.txt"):
    path = tmp_path / name
    path.write_text("".join(f"make problem {i}\n" for i in range(n)))
    return path


class TestGenerateCommand:
    def test_small_run_writes_all_outputs(self, tmp_path, capsys):
        prompts = write_prompts(tmp_path, 20)
        out = tmp_path / "out"
        code = main(["generate", str(prompts), "--seed", "7", "--out-dir", str(out)])
        assert code == EXIT_OK
        header, trajectories = read_records(out / "trajectories.jsonl", TRAJECTORY_SCHEMA)
        assert header["config"]["seed"] == 7
        assert len(trajectories) == 20
        _, samples = read_records(out / "dataset.jsonl")
        assert 0 < len(samples) <= 20
        assert (out / "summary.json").exists()
        assert "accepted" in capsys.readouterr().out

    def test_empty_prompts_exits_2(self, tmp_path):
        prompts = tmp_path / "prompts.txt"
        prompts.write_text("")
        assert main(["generate", str(prompts)]) == EXIT_CONFIG

    def test_config_violation_exits_2(self, tmp_path):
        prompts = write_prompts(tmp_path, 3)
        config = tmp_path / "config.json"
        config.write_text('{"thresholds": [6, 5, 5]}')
        code = main(["generate", str(prompts), "--config", str(config),
                     "--out-dir", str(tmp_path / "out")])
        assert code == EXIT_CONFIG

    def test_unreachable_http_backend_exits_3(self, tmp_path):
        prompts = write_prompts(tmp_path, 2)
        config = tmp_path / "config.json"
        config.write_text(
            '{"backend": "http", "http": {"endpoint": "http://127.0.0.1:9", "timeout": 0.3},'
            ' "retries": 0}'
        )
        code = main(["generate", str(prompts), "--config", str(config),
                     "--out-dir", str(tmp_path / "out")])
        assert code == EXIT_BACKEND

    def test_no_gating_flag_disables_early_rejection(self, tmp_path):
        prompts = write_prompts(tmp_path, 30)
        out = tmp_path / "out"
        code = main(["generate", str(prompts), "--no-gating", "--out-dir", str(out)])
        assert code == EXIT_OK
        _, records = read_records(out / "trajectories.jsonl", TRAJECTORY_SCHEMA)
        assert all(r["rejected_at"] in (None, 4) for r in records)


class TestReplayCommand:
    def test_replay_of_gated_log_exits_2(self, tmp_path):
        prompts = write_prompts(tmp_path, 10)
        out = tmp_path / "out"
        main(["generate", str(prompts), "--out-dir", str(out)])
        assert main(["replay", str(out / "trajectories.jsonl")]) == EXIT_CONFIG

    def test_replay_of_ungated_log_reports(self, tmp_path, capsys):
        prompts = write_prompts(tmp_path, 40)
        out = tmp_path / "out"
        main(["generate", str(prompts), "--no-gating", "--out-dir", str(out)])
        capsys.readouterr()
        report_path = tmp_path / "report.jsonl"
        code = main(["replay", str(out / "trajectories.jsonl"), "--out", str(report_path)])
        assert code == EXIT_OK
        output = capsys.readouterr().out
        assert "FPR%" in output and "savings" in output
        lines = [json.loads(l) for l in report_path.read_text().splitlines()]
        assert lines[0]["schema"] == "stagegate.report.v1"
        assert any(l["kind"] == "savings" for l in lines)

    def test_replay_is_idempotent(self, tmp_path):
        prompts = write_prompts(tmp_path, 25)
        out = tmp_path / "out"
        main(["generate", str(prompts), "--no-gating", "--out-dir", str(out)])
        reports = []
        for name in ("r1.jsonl", "r2.jsonl"):
            path = tmp_path / name
            main(["replay", str(out / "trajectories.jsonl"), "--out", str(path)])
            reports.append(path.read_bytes())
        assert reports[0] == reports[1]


class TestVerifyTheoryCommand:
    def test_random_models_pass(self, capsys):
        code = main(["verify-theory", "--random", "40", "--trials", "4000"])
        assert code == EXIT_OK
        assert "ALL IDENTITIES HOLD" in capsys.readouterr().out

    def test_degenerate_all_continue_model_passes(self, tmp_path):
        model = {
            "delta_costs": [1, 2, 3, 4],
            "continue_probs": [1.0, 1.0, 1.0],
            "quality": {fmt: 0.5 for fmt in ("000", "001", "010", "011", "100", "101", "110", "111")},
        }
        path = tmp_path / "models.json"
        path.write_text(json.dumps([model]))
        assert main(["verify-theory", "--models", str(path)]) == EXIT_OK

    def test_negative_cost_model_rejected_at_load(self, tmp_path):
        model = {
            "delta_costs": [-1, 2, 3, 4],
            "continue_probs": [0.5, 0.5, 0.5],
            "quality": {fmt: 0.5 for fmt in ("000", "001", "010", "011", "100", "101", "110", "111")},
        }
        path = tmp_path / "models.json"
        path.write_text(json.dumps([model]))
        assert main(["verify-theory", "--models", str(path)]) == EXIT_CONFIG


class TestDedupCommand:
    def _write_dataset(self, tmp_path, texts):
        path = tmp_path / "data.jsonl"
        with path.open("w") as fh:
            for i, text in enumerate(texts):
                fh.write(json.dumps({"id": i, "text": text}) + "\n")
        return path

    def test_exact_duplicate_pair_flagged(self, tmp_path, capsys):
        text = "a sample problem about eggs and cartons repeated verbatim"
        path = self._write_dataset(tmp_path, [text, text, "something entirely different here"])
        assert main(["dedup", str(path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "1 near-duplicate cluster" in out

    def test_disjoint_texts_unflagged(self, tmp_path, capsys):
        path = self._write_dataset(
            tmp_path, ["alpha beta gamma delta epsilon zeta", "0123456789 9876543210 13579"]
        )
        main(["dedup", str(path)])
        assert "0 near-duplicate cluster" in capsys.readouterr().out

    def test_edited_copy_flag_matches_brute_force(self, tmp_path, capsys):
        # Each edited character corrupts up to five shingles, so a ~1.5%
        # edit keeps Jaccard above 0.8 while 30% pushes it far below.
        rng = np.random.default_rng(3)
        base = random_text(rng, 400)
        near = edit_text(rng, base, 0.015)
        far = edit_text(rng, base, 0.30)
        truth_near = brute_force_jaccard(base, near)
        truth_far = brute_force_jaccard(base, far)
        assert truth_near >= 0.8 and truth_far < 0.8  # oracle separates the two
        path = self._write_dataset(tmp_path, [base, near, far])
        main(["dedup", str(path)])
        out = capsys.readouterr().out
        assert "1 near-duplicate cluster" in out
        assert "0, 1" in out
