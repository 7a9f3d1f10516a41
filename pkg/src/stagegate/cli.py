"""Command-line entry point: generate, replay, verify-theory, and dedup.

Configuration is a flat JSON file; unknown keys are rejected and the loaded
form is echoed back canonically (sorted keys) into the output directory and
into every record-file header.  All randomness flows from the single seed.

Exit codes: 0 success, 1 verification failure or partial run, 2 invalid
configuration or input files, 3 backend unreachable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

from .analytics import (
    EXACT_RTOL,
    ReplayError,
    StageModel,
    enumerate_policies,
    exact_expected_cost,
    first_fail_policy,
    martingale_check,
    never_stop_policy,
    random_stage_model,
    replay_error_rates,
    simulate_expected_cost,
    stop_at_stage_policy,
)
from .core import Caps, StagePolicy, validate_policy
from .evaluation import MinHashIndex, MinHashParams, estimated_jaccard, minhash_signature
from .generators import (
    BackendUnreachable,
    GeneratorBackend,
    HttpGenerator,
    SimulatedGenerator,
    SimulatorConfig,
)
from .pipeline import PipelineRun, PromptSpec, StagedPipeline, run_batch
from .records import (
    JsonlWriter,
    RecordFileError,
    REPORT_SCHEMA,
    SAMPLE_SCHEMA,
    TRAJECTORY_SCHEMA,
    dumps_record,
    read_records,
)
from .validators import RuleConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3


class ConfigError(ValueError):
    """Configuration file or flags are unusable."""


_CAPS_KEYS = {"magnitude_relative", "magnitude_absolute", "word_min", "word_max"}
_DEDUP_KEYS = {"num_hashes", "shingle_size", "jaccard_threshold", "hash_seed"}
_HTTP_KEYS = {"endpoint", "model", "timeout", "judge_model"}
_SIM_KEYS = {f.name for f in dataclasses.fields(SimulatorConfig)} - {"seed"}
_RULES_KEYS = {"hallucination_lexicon", "leakage_markers", "final_marker", "arith_tolerance"}


@dataclasses.dataclass
class RunConfig:
    """Flat run configuration; defaults match the documented reference setup."""

    seed: int = 42
    backend: str = "sim"
    batch_size: int = 64
    target_accepted: int | None = None
    no_gating: bool = False
    cutoff: float = 0.5
    sampling_mix: float = 0.30
    problem_temperature: float = 0.7
    solution_temperature: float = 0.0
    judge_reject_below: int = 3
    bootstrap_solution_tokens: int = 400
    max_workers: int = 4
    retries: int = 3
    thresholds: tuple[int, int, int] = (5, 5, 5)
    check_counts: tuple[int, int, int] = (6, 6, 6)
    lambda_cost: float = 0.0
    caps: Caps = dataclasses.field(default_factory=Caps)
    cost_template: tuple[int, ...] | None = None
    exemplars_file: str | None = None
    rules: dict[str, Any] = dataclasses.field(default_factory=dict)
    sim: dict[str, Any] = dataclasses.field(default_factory=dict)
    http: dict[str, Any] = dataclasses.field(default_factory=dict)
    dedup: dict[str, Any] = dataclasses.field(default_factory=dict)
    out_dir: str = "stagegate-out"

    def policy(self) -> StagePolicy:
        return StagePolicy(
            thresholds=tuple(self.thresholds),
            check_counts=tuple(self.check_counts),
            midsol_cutoff=self.cutoff,
            lambda_cost=self.lambda_cost,
            caps=self.caps,
        )

    def rule_config(self) -> RuleConfig:
        kwargs: dict[str, Any] = {"caps": self.caps}
        if "hallucination_lexicon" in self.rules:
            kwargs["hallucination_lexicon"] = tuple(self.rules["hallucination_lexicon"])
        if "leakage_markers" in self.rules:
            kwargs["leakage_markers"] = tuple(self.rules["leakage_markers"])
        if "final_marker" in self.rules:
            kwargs["final_marker"] = str(self.rules["final_marker"])
        if "arith_tolerance" in self.rules:
            kwargs["arith_tolerance"] = Fraction(str(self.rules["arith_tolerance"]))
        return RuleConfig(**kwargs)

    def canonical(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["thresholds"] = list(self.thresholds)
        data["check_counts"] = list(self.check_counts)
        data["cost_template"] = list(self.cost_template) if self.cost_template else None
        # The output location is environmental, not run semantics; identical
        # runs must produce byte-identical files wherever they land.
        data.pop("out_dir")
        return data


_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path: str | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus flag overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in (("caps", _CAPS_KEYS), ("dedup", _DEDUP_KEYS),
                             ("http", _HTTP_KEYS), ("sim", _SIM_KEYS),
                             ("rules", _RULES_KEYS)):
        extra = set(data.get(section, {}) or {}) - allowed
        if extra:
            raise ConfigError(f"unknown {section} keys: {sorted(extra)}")

    config = RunConfig()
    for key, value in data.items():
        if key == "caps":
            config.caps = Caps(**value)
        elif key in ("thresholds", "check_counts"):
            setattr(config, key, tuple(int(v) for v in value))
        elif key == "cost_template":
            config.cost_template = tuple(int(v) for v in value) if value else None
        else:
            setattr(config, key, value)
    return config


def config_violations(config: RunConfig) -> list[str]:
    violations = validate_policy(config.policy(), config.cost_template)
    if config.backend not in ("sim", "http"):
        violations.append(f"backend must be 'sim' or 'http', got {config.backend!r}")
    if config.backend == "http" and not config.http.get("endpoint"):
        violations.append("http backend requires http.endpoint")
    if config.batch_size < 1:
        violations.append("batch_size must be at least 1")
    if config.target_accepted is not None and config.target_accepted < 1:
        violations.append("target_accepted must be at least 1")
    if not 0 <= config.sampling_mix <= 1:
        violations.append("sampling_mix must lie in [0, 1]")
    if not 1 <= config.judge_reject_below <= 5:
        violations.append("judge_reject_below must lie in [1, 5]")
    return violations


def build_backends(config: RunConfig) -> tuple[GeneratorBackend, GeneratorBackend]:
    """The (generator, judge) pair selected by the configuration."""
    if config.backend == "sim":
        sim_kwargs = dict(config.sim)
        if "fault_weights" in sim_kwargs:
            sim_kwargs["fault_weights"] = tuple(
                (str(name), float(weight)) for name, weight in sim_kwargs["fault_weights"]
            )
        for key in ("good_solution_words", "bad_solution_words", "solution_word_bounds",
                    "problem_pad_sentences"):
            if key in sim_kwargs:
                sim_kwargs[key] = tuple(sim_kwargs[key])
        backend = SimulatedGenerator(SimulatorConfig(seed=config.seed, **sim_kwargs))
        return backend, backend
    http = dict(config.http)
    endpoint = http["endpoint"]
    model = http.get("model", "default")
    timeout = float(http.get("timeout", 60.0))
    backend = HttpGenerator(endpoint, model, timeout=timeout)
    judge_model = http.get("judge_model")
    judge = (
        HttpGenerator(endpoint, judge_model, timeout=timeout) if judge_model else backend
    )
    return backend, judge


def load_prompts(path: str | Path) -> list[PromptSpec]:
    """Prompts file: one prompt per line, plain text or a JSON object."""
    prompts = []
    raw = Path(path).read_text("utf-8")
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("{"):
            data = json.loads(line)
            difficulty = float(data.get("difficulty", 50.0))
            if not 1 <= difficulty <= 2000:
                raise ValueError(
                    f"line {lineno}: difficulty {difficulty} outside [1, 2000]"
                )
            prompts.append(
                PromptSpec(
                    text=data["prompt"],
                    difficulty=difficulty,
                    tag=str(data.get("tag", "all")),
                )
            )
        else:
            prompts.append(PromptSpec(text=line))
    return prompts


def dedup_params(config: RunConfig) -> MinHashParams:
    return MinHashParams(**config.dedup) if config.dedup else MinHashParams()


# --- generate --------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        config = load_config(
            args.config,
            {
                "seed": args.seed,
                "backend": args.backend,
                "cutoff": args.cutoff,
                "target_accepted": args.target_accepted,
                "out_dir": args.out_dir,
                "no_gating": True if args.no_gating else None,
            },
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    violations = config_violations(config)
    if violations:
        for violation in violations:
            print(f"config violation: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        prompts = load_prompts(args.prompts)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"cannot read prompts file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not prompts:
        print("prompts file is empty", file=sys.stderr)
        return EXIT_CONFIG

    exemplars: tuple[str, ...] = ()
    if config.exemplars_file:
        exemplars = tuple(
            line.strip()
            for line in Path(config.exemplars_file).read_text("utf-8").splitlines()
            if line.strip()
        )

    backend, judge = build_backends(config)
    run = PipelineRun(
        policy=config.policy(),
        batch_size=config.batch_size,
        target_accepted=config.target_accepted,
        seed=config.seed,
        sampling_mix=config.sampling_mix,
        problem_temperature=config.problem_temperature,
        solution_temperature=config.solution_temperature,
        judge_reject_below=config.judge_reject_below,
        bootstrap_solution_tokens=config.bootstrap_solution_tokens,
        max_workers=config.max_workers,
        retries=config.retries,
        exemplars=exemplars,
    )
    pipeline = StagedPipeline(
        run,
        backend,
        judge,
        rule_config=config.rule_config(),
        dedup_index=MinHashIndex(dedup_params(config)),
    )

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = config.canonical()
    (out_dir / "config.json").write_text(dumps_record(echo) + "\n", "utf-8")

    try:
        with JsonlWriter(out_dir / "trajectories.jsonl", TRAJECTORY_SCHEMA, echo) as tsink, \
                JsonlWriter(out_dir / "dataset.jsonl", SAMPLE_SCHEMA, echo) as ssink:
            summary = run_batch(
                pipeline,
                prompts,
                trajectory_sink=tsink,
                sample_sink=ssink,
                gating=not config.no_gating,
            )
    except BackendUnreachable as exc:
        print(f"backend unreachable: {exc}", file=sys.stderr)
        return EXIT_BACKEND

    (out_dir / "summary.json").write_text(dumps_record(summary.to_dict()) + "\n", "utf-8")
    print(summary.to_text())
    return EXIT_FAIL if summary.partial else EXIT_OK


# --- replay ----------------------------------------------------------------------


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        header, records = read_records(args.log, TRAJECTORY_SCHEMA)
    except RecordFileError as exc:
        print(f"log error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run_config = header.get("config", {})
    if not run_config.get("no_gating", False):
        print(
            "replay requires a log from a no-gating run (full generations)",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    try:
        config = load_config(None, dict(run_config))
    except ConfigError as exc:
        print(f"log header config invalid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    policy = config.policy()
    try:
        report = replay_error_rates(
            records,
            policy=policy,
            rule_config=config.rule_config(),
            cutoff=args.cutoff,
            bootstrap_solution_tokens=config.bootstrap_solution_tokens,
            lambda_cost=policy.lambda_cost,
        )
    except ReplayError as exc:
        print(f"replay error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    savings = report.savings
    print(report.error_table())
    print()
    print(f"mean full cost      {savings.c_full:,.1f} tokens")
    print(f"mean gated cost     {savings.e_cost:,.1f} tokens")
    print(
        f"savings             {savings.savings:,.1f} tokens "
        f"({100 * savings.savings_fraction:.1f}%)"
    )
    print(
        "per-stage terms     "
        + ", ".join(f"S{i + 1}:{term:,.1f}" for i, term in enumerate(savings.per_stage_terms))
    )
    print(f"objective           {savings.objective:.6f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(dumps_record({"kind": "header", "schema": REPORT_SCHEMA}) + "\n")
            for row in report.rows:
                fh.write(dumps_record({"kind": "error_rates", **row.to_dict()}) + "\n")
            fh.write(dumps_record({"kind": "savings", **savings.to_dict()}) + "\n")
    return EXIT_OK


# --- verify-theory -----------------------------------------------------------------


def _models_from_file(path: str) -> list[StageModel]:
    data = json.loads(Path(path).read_text("utf-8"))
    if isinstance(data, dict):
        data = [data]
    models = []
    for entry in data:
        quality = {
            tuple(int(ch) for ch in key): float(value)
            for key, value in entry["quality"].items()
        }
        models.append(
            StageModel(
                delta_costs=tuple(int(c) for c in entry["delta_costs"]),
                continue_probs=tuple(float(p) for p in entry["continue_probs"]),
                quality=quality,
            )
        )
    return models


def cmd_verify_theory(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    if args.models:
        try:
            models = _models_from_file(args.models)
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            print(f"cannot load models: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    else:
        models = [random_stage_model(rng) for _ in range(args.random)]

    policies = [
        first_fail_policy(),
        never_stop_policy(),
        stop_at_stage_policy(1),
        stop_at_stage_policy(2),
        stop_at_stage_policy(3),
    ]
    everything = enumerate_policies() if args.all_policies else []

    failures = 0
    mc_models = max(1, len(models) // 50) if len(models) > 10 else len(models)
    for i, model in enumerate(models):
        try:
            exact = exact_expected_cost(model)
        except RuntimeError as exc:
            print(f"model {i}: ENUMERATION FAILURE: {exc}")
            failures += 1
            continue
        gap = exact.decomposition_gap()
        if gap > EXACT_RTOL * max(exact.c_full, 1.0):
            print(f"model {i}: decomposition gap {gap:g}")
            failures += 1
        before_final = 1.0 - np.prod(model.continue_probs)
        if before_final > 0 and exact.savings <= 0:
            print(f"model {i}: strict savings violated")
            failures += 1
        if exact.savings < exact.lower_bound - EXACT_RTOL * max(exact.c_full, 1.0):
            print(f"model {i}: savings below the final-stage lower bound")
            failures += 1
        for policy in policies + everything:
            checks = martingale_check(model, [policy])
            if checks[0].exact_gap > EXACT_RTOL:
                print(f"model {i}: optional stopping violated for {policy.name}")
                failures += 1
        if i < mc_models and args.trials > 0:
            mc = simulate_expected_cost(model, args.trials, seed=args.seed + i)
            if mc.standard_error and abs(mc.e_cost - exact.e_cost) > 4 * mc.standard_error:
                print(f"model {i}: Monte-Carlo cost outside 4 standard errors")
                failures += 1
            for check in martingale_check(
                model, policies, trials=args.trials, seed=args.seed + i
            ):
                in_se = check.mc_gap_in_se
                if in_se is not None and in_se > 4.0:
                    print(f"model {i}: Monte-Carlo stopping gap {in_se:.1f} SE ({check.policy})")
                    failures += 1
    print(
        f"checked {len(models)} models, "
        f"{len(policies) + len(everything)} stopping rules each: "
        + ("ALL IDENTITIES HOLD" if failures == 0 else f"{failures} FAILURES")
    )
    return EXIT_OK if failures == 0 else EXIT_FAIL


# --- dedup -------------------------------------------------------------------------


def _dedup_texts(path: str) -> list[tuple[str, str]]:
    """(id, text) pairs from a dataset file or a raw JSONL of texts."""
    raw = Path(path).read_text("utf-8")
    texts: list[tuple[str, str]] = []
    for i, line in enumerate(raw.splitlines()):
        line = line.strip()
        if not line:
            continue
        record = json.loads(line)
        if record.get("kind") == "header":
            continue
        if "problem" in record and "solution" in record:
            text = f"{record['problem']}\n\n{record['solution']}"
        elif "text" in record:
            text = record["text"]
        else:
            continue
        texts.append((str(record.get("id", i)), text))
    return texts


def cmd_dedup(args: argparse.Namespace) -> int:
    try:
        texts = _dedup_texts(args.dataset)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read dataset: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not texts:
        print("no records with text found", file=sys.stderr)
        return EXIT_CONFIG
    params = MinHashParams(jaccard_threshold=args.threshold)
    signatures = []
    for sample_id, text in texts:
        try:
            signatures.append((sample_id, minhash_signature(text, params)))
        except ValueError:
            signatures.append((sample_id, None))

    parent = list(range(len(signatures)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    flagged = 0
    for i in range(len(signatures)):
        sig_i = signatures[i][1]
        if sig_i is None:
            continue
        for j in range(i + 1, len(signatures)):
            sig_j = signatures[j][1]
            if sig_j is None:
                continue
            if estimated_jaccard(sig_i, sig_j) >= params.jaccard_threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
                flagged += 1
    clusters: dict[int, list[str]] = {}
    for i, (sample_id, _) in enumerate(signatures):
        clusters.setdefault(find(i), []).append(sample_id)
    dup_clusters = [ids for ids in clusters.values() if len(ids) > 1]
    print(f"{len(texts)} records, {len(dup_clusters)} near-duplicate cluster(s)")
    for ids in dup_clusters:
        print("  cluster: " + ", ".join(ids))
    return EXIT_OK


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagegate",
        description="Staged synthetic-data generation with in-flight rejection.",
    )
    parser.add_argument("--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="run the staged generation pipeline")
    generate.add_argument("prompts", help="prompts file (text lines or JSONL)")
    generate.add_argument("--config", default=None, help="JSON config file")
    generate.add_argument("--seed", type=int, default=None)
    generate.add_argument("--backend", choices=("sim", "http"), default=None)
    generate.add_argument("--no-gating", action="store_true",
                          help="full generation baseline: validate but never stop early")
    generate.add_argument("--cutoff", type=float, default=None)
    generate.add_argument("--target-accepted", type=int, default=None)
    generate.add_argument("--out-dir", default=None)
    generate.set_defaults(func=cmd_generate)

    replay = sub.add_parser("replay", help="re-validate a no-gating trajectory log")
    replay.add_argument("log", help="trajectory log from a --no-gating run")
    replay.add_argument("--cutoff", type=float, default=None,
                        help="override the checkpoint fraction for the sweep")
    replay.add_argument("--out", default=None, help="write a machine-readable report")
    replay.set_defaults(func=cmd_replay)

    verify = sub.add_parser("verify-theory", help="check savings and stopping identities")
    verify.add_argument("--models", default=None, help="JSON stage-model file")
    verify.add_argument("--random", type=int, default=100,
                        help="number of randomized models when no file is given")
    verify.add_argument("--trials", type=int, default=20000,
                        help="Monte-Carlo trials per sampled model (0 disables)")
    verify.add_argument("--seed", type=int, default=42)
    verify.add_argument("--all-policies", action="store_true",
                        help="exercise every enumerable stopping rule")
    verify.set_defaults(func=cmd_verify_theory)

    dedup = sub.add_parser("dedup", help="near-duplicate scan over a dataset file")
    dedup.add_argument("dataset")
    dedup.add_argument("--threshold", type=float, default=0.8)
    dedup.set_defaults(func=cmd_dedup)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
