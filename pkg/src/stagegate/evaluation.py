"""Final-stage evaluation: near-duplicate rejection and judge scoring.

A sample that survived the three gated stages is accepted only when the
product of the final binary checks is 1: the full-solution validation passed,
the sample is not a near duplicate of anything already kept, and a judge
model rates it at or above the acceptance threshold.

Near-duplicate detection uses MinHash signatures over character shingles.
The index is a linear scan, which is fine at the corpus sizes this package
targets; LSH banding is a known follow-up for much larger corpora.
"""

from __future__ import annotations

import logging
import re
import struct
import threading
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import Stage, ValidationReport
from .generators import BackendError, GeneratorBackend, StageRequest, generate_stage

logger = logging.getLogger(__name__)


class DegenerateTextError(ValueError):
    """Text too short to shingle; treated as a duplicate-check failure."""


# splitmix64 finalizer constants; a fixed bijective mixer over 64-bit words.
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)


def _mix64(values: np.ndarray) -> np.ndarray:
    z = values.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _MIX_1
    z ^= z >> np.uint64(27)
    z *= _MIX_2
    z ^= z >> np.uint64(31)
    return z


def _shingle_hashes(text: str, shingle_size: int) -> np.ndarray:
    """One 64-bit hash per character shingle, deterministic across runs."""
    codes = np.frombuffer(np.array(text, dtype=f"<U{len(text)}").tobytes(), dtype=np.uint32)
    codes = codes.astype(np.uint64)
    n = len(codes) - shingle_size + 1
    if n <= 0:
        raise DegenerateTextError(
            f"text of length {len(text)} is shorter than the shingle size {shingle_size}"
        )
    acc = np.zeros(n, dtype=np.uint64)
    for offset in range(shingle_size):
        # Position key keeps "ab"+"ba" style transpositions distinct.
        key = np.uint64(((offset + 1) * 0x9E3779B97F4A7C15) % 2**64)
        acc += _mix64(codes[offset : offset + n] + key)
    return _mix64(acc)


@dataclass(frozen=True)
class MinHashParams:
    num_hashes: int = 128
    shingle_size: int = 5
    jaccard_threshold: float = 0.8
    hash_seed: int = 0x5147

    def __post_init__(self) -> None:
        if self.num_hashes < 1 or self.shingle_size < 1:
            raise ValueError("num_hashes and shingle_size must be positive")
        if not 0 < self.jaccard_threshold < 1:
            raise ValueError("jaccard_threshold must lie in (0, 1)")

    def salts(self) -> np.ndarray:
        rng = np.random.default_rng(self.hash_seed)
        return rng.integers(1, 2**63, size=self.num_hashes, dtype=np.uint64)


def minhash_signature(text: str, params: MinHashParams) -> np.ndarray:
    """Per-hash minimum over the character shingles of ``text``.

    Deterministic given the parameter block's hash seed.  Raises
    :class:`DegenerateTextError` for text shorter than one shingle.
    """
    shingles = _shingle_hashes(text, params.shingle_size)
    salts = params.salts()
    # num_hashes x num_shingles; minimum along the shingle axis.
    table = _mix64(shingles[None, :] ^ salts[:, None])
    return table.min(axis=1)


def estimated_jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    if sig_a.shape != sig_b.shape:
        raise ValueError("signatures must have equal length")
    return float(np.mean(sig_a == sig_b))


class MinHashIndex:
    """Append-only signature store with a synchronized single-writer contract.

    Queries run against a snapshot of the stored block; insertion is
    serialized under a lock.
    """

    _MAGIC = b"SGMH"
    _VERSION = 1

    def __init__(self, params: MinHashParams | None = None, capacity: int = 1024):
        self.params = params or MinHashParams()
        self._lock = threading.Lock()
        self._store = np.empty((capacity, self.params.num_hashes), dtype=np.uint64)
        self._ids: list[str] = []
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(self._ids)

    def _grow(self) -> None:
        grown = np.empty((max(2 * len(self._store), 16), self.params.num_hashes), dtype=np.uint64)
        grown[: self._count] = self._store[: self._count]
        self._store = grown

    def closest(self, signature: np.ndarray) -> tuple[str | None, float]:
        """Best match among stored signatures as (sample id, estimated Jaccard)."""
        with self._lock:
            count = self._count
            block = self._store[:count]
            ids = list(self._ids)
        if count == 0:
            return None, 0.0
        sims = np.mean(block == signature[None, :], axis=1)
        best = int(np.argmax(sims))
        return ids[best], float(sims[best])

    def is_duplicate(self, signature: np.ndarray, sample_id: str) -> bool:
        """True when the estimated Jaccard against any stored entry clears the
        threshold; otherwise the signature is inserted under ``sample_id``."""
        _, best = self.closest(signature)
        if best >= self.params.jaccard_threshold:
            return True
        with self._lock:
            if self._count == len(self._store):
                self._grow()
            self._store[self._count] = signature
            self._ids.append(sample_id)
            self._count += 1
        return False

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        with self._lock:
            count = self._count
            block = self._store[:count].copy()
            ids = list(self._ids)
        header = struct.pack(
            "<4sHIId",
            self._MAGIC,
            self._VERSION,
            self.params.num_hashes,
            self.params.shingle_size,
            self.params.jaccard_threshold,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(struct.pack("<q", self.params.hash_seed))
            fh.write(struct.pack("<I", count))
            for sample_id in ids:
                raw = sample_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(block.tobytes())

    @classmethod
    def load(cls, path) -> "MinHashIndex":
        with open(path, "rb") as fh:
            magic, version, num_hashes, shingle_size, threshold = struct.unpack(
                "<4sHIId", fh.read(struct.calcsize("<4sHIId"))
            )
            if magic != cls._MAGIC:
                raise ValueError(f"not a signature snapshot: bad magic {magic!r}")
            if version != cls._VERSION:
                raise ValueError(f"unsupported snapshot version {version}")
            (hash_seed,) = struct.unpack("<q", fh.read(8))
            (count,) = struct.unpack("<I", fh.read(4))
            ids = []
            for _ in range(count):
                (length,) = struct.unpack("<I", fh.read(4))
                ids.append(fh.read(length).decode("utf-8"))
            params = MinHashParams(
                num_hashes=num_hashes,
                shingle_size=shingle_size,
                jaccard_threshold=threshold,
                hash_seed=hash_seed,
            )
            index = cls(params, capacity=max(count, 16))
            raw = fh.read(count * num_hashes * 8)
            block = np.frombuffer(raw, dtype=np.uint64).reshape(count, num_hashes)
            index._store[:count] = block
            index._ids = ids
            index._count = count
            return index


# --- judge ---------------------------------------------------------------------

JUDGE_RUBRIC_ASSET = "judge_rubric_v1.txt"
_RATING_RE = re.compile(r"\b([1-5])\b")


def load_judge_rubric() -> str:
    return resources.files("stagegate.assets").joinpath(JUDGE_RUBRIC_ASSET).read_text("utf-8")


def parse_judge_score(reply: str) -> int | None:
    match = _RATING_RE.search(reply)
    return int(match.group(1)) if match else None


@dataclass(frozen=True)
class JudgeVerdict:
    score: int | None
    accepted: bool
    rule_hit: str | None
    tokens: int
    reply: str = ""


def judge_sample(
    problem: str,
    solution: str,
    judge_backend: GeneratorBackend,
    *,
    prompt_index: int = 0,
    reject_below: int = 3,
    retries: int = 2,
) -> JudgeVerdict:
    """Score a problem-solution pair 1-5 and accept when the score clears the bar.

    Unparseable replies are retried; persistent failure rejects the sample
    with rule ``judge.unparseable``.  Backend failures reject with
    ``judge.backend_error``.
    """
    rubric = load_judge_rubric()
    instruction = rubric.format(problem=problem, solution=solution)
    tokens = 0
    reply = ""
    for _ in range(retries + 1):
        try:
            result = generate_stage(
                judge_backend,
                StageRequest(
                    stage=Stage.EVALUATION,
                    instruction=instruction,
                    prompt_index=prompt_index,
                    temperature=0.0,
                ),
            )
        except BackendError as exc:
            logger.warning("judge backend failed: %s", exc)
            return JudgeVerdict(None, False, "judge.backend_error", tokens, reply)
        tokens += result.tokens
        reply = result.text
        score = parse_judge_score(result.text)
        if score is not None:
            accepted = score >= reject_below
            return JudgeVerdict(
                score, accepted, None if accepted else "judge.low_score", tokens, reply
            )
    return JudgeVerdict(None, False, "judge.unparseable", tokens, reply)


def final_validator_product(
    solution_report: ValidationReport, duplicate: bool, judge_accepted: bool
) -> int:
    """Composite binary utility: 1 only when every final check passes."""
    return int(solution_report.all_passed and not duplicate and judge_accepted)
