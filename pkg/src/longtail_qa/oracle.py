"""Large-LM oracle abstraction: hint generation, answer scoring, caching.

Two interchangeable backends: a deterministic rule-based mock (tests,
acceptance, offline runs) and a remote HTTP text-generation service.
Training code only ever talks to the cache wrapper, which guarantees one
generation call per (example, instance) pair and persists results as
append-only JSON lines.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import OracleError
from .text import tokenize

NOISE_HINT = "noise"


@dataclass(frozen=True)
class Hint:
    text: str
    source_example_id: str


@dataclass
class ScoringDistribution:
    model_tag: str                    # one of lm / r1 / r2 / f
    probabilities: np.ndarray

    def validate(self) -> "ScoringDistribution":
        p = self.probabilities
        if self.model_tag not in ("lm", "r1", "r2", "f"):
            raise ValueError(f"unknown model tag {self.model_tag!r}")
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probabilities must be a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {p.sum()}, not 1")
        return self


def stable_softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    z = np.exp(s - s.max())
    return z / z.sum()


def _token_f1(a: str, b: str) -> float:
    ta, tb = tokenize(a), tokenize(b)
    if not ta or not tb:
        return 0.0
    overlap = sum((Counter(ta) & Counter(tb)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(ta), overlap / len(tb)
    return 2 * p * r / (p + r)


def _jaccard(a: str, b: str) -> float:
    sa, sb = set(tokenize(a)), set(tokenize(b))
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


class MockOracle:
    """Deterministic rule-based stand-in for the big LM.

    Hints: if the example's question shares any token with the query
    question, the hint is the example's answer; otherwise a fixed noise
    token.  Scores: log of a clipped blend of question similarity and
    answer overlap, so lexically closer examples score higher.
    """

    def __init__(self, hint_max_tokens: int = 32):
        self.hint_max_tokens = hint_max_tokens

    def generate_hint(self, example, context: str, question: str) -> str:
        if not question.strip():
            raise ValueError("question must be non-empty")
        if _jaccard(example.question, question) > 0.0:
            toks = example.answer.lower().split()
        else:
            toks = [NOISE_HINT]
        return " ".join(toks[: self.hint_max_tokens])

    def score_answer(self, example, context: str, question: str, answer: str) -> float:
        if not answer.strip():
            raise ValueError("answer must be non-empty")
        sim = 0.5 * _jaccard(example.question, question) + \
            0.5 * _token_f1(example.answer, answer)
        return float(np.log(np.clip(sim, 1e-6, 1.0)))


class RemoteOracle:
    """HTTP text-generation backend.  POSTs JSON to `endpoint`; any network
    or protocol problem surfaces as the retryable OracleError."""

    def __init__(self, endpoint: str, model: str, hint_max_tokens: int = 32,
                 timeout: float = 30.0):
        if not endpoint:
            raise ValueError("remote oracle requires an endpoint URL")
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.hint_max_tokens = hint_max_tokens
        self.timeout = timeout

    def _post(self, payload: dict) -> dict:
        import requests

        try:
            resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise OracleError(f"oracle backend unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise OracleError(f"oracle backend returned HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise OracleError("oracle backend returned non-JSON body") from exc

    def generate_hint(self, example, context: str, question: str) -> str:
        if not question.strip():
            raise ValueError("question must be non-empty")
        body = self._post({
            "model": self.model,
            "mode": "hint",
            "example": {"context": example.context, "question": example.question,
                        "answer": example.answer},
            "context": context,
            "question": question,
            "max_tokens": self.hint_max_tokens,
            "greedy": True,
        })
        text = str(body.get("text", "")).strip()
        if not text:
            raise OracleError("oracle backend returned an empty hint")
        return text

    def score_answer(self, example, context: str, question: str, answer: str) -> float:
        if not answer.strip():
            raise ValueError("answer must be non-empty")
        body = self._post({
            "model": self.model,
            "mode": "score",
            "example": {"context": example.context, "question": example.question,
                        "answer": example.answer},
            "context": context,
            "question": question,
            "answer": answer,
        })
        if "logprob" not in body:
            raise OracleError("oracle backend response lacks 'logprob'")
        return min(0.0, float(body["logprob"]))


def pair_key(example, instance) -> str:
    """Content hash of the (example, instance) conditioning pair."""
    h = hashlib.sha1()
    for part in (example.context, example.question, example.answer,
                 instance.context, instance.question):
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()


class OracleCache:
    """Insert-if-absent cache over an oracle backend.

    One JSONL record per (example, instance) pair; re-touching a pair to
    fill in the other field appends a superseding record (append-only log,
    last record wins on load).
    """

    def __init__(self, oracle, path: str | Path | None = None):
        self.oracle = oracle
        self.path = Path(path) if path else None
        self._hints: dict[str, str] = {}
        self._scores: dict[str, float] = {}
        self.generation_calls = 0
        self.score_calls = 0
        if self.path and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                key = rec["key_hash"]
                if rec.get("hint") is not None:
                    self._hints[key] = rec["hint"]
                if rec.get("score") is not None:
                    self._scores[key] = float(rec["score"])

    def _append(self, key: str, example, instance):
        if not self.path:
            return
        rec = {
            "key_hash": key,
            "example_id": example.uid,
            "instance_id": instance.uid,
            "hint": self._hints.get(key),
            "score": self._scores.get(key),
        }
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def hint(self, example, instance) -> Hint:
        key = pair_key(example, instance)
        if key not in self._hints:
            self.generation_calls += 1
            self._hints[key] = self.oracle.generate_hint(
                example, instance.context, instance.question)
            self._append(key, example, instance)
        return Hint(text=self._hints[key], source_example_id=example.uid)

    def score(self, example, instance) -> float:
        key = pair_key(example, instance)
        if key not in self._scores:
            self.score_calls += 1
            self._scores[key] = self.oracle.score_answer(
                example, instance.context, instance.question, instance.answer)
            self._append(key, example, instance)
        return self._scores[key]


def lm_distribution(candidates, instance, cache: OracleCache) -> ScoringDistribution:
    """Softmax over cached oracle log-probabilities for a candidate set."""
    if not candidates.examples:
        raise ValueError("candidate set is empty")
    scores = np.array([cache.score(e, instance) for e in candidates.examples])
    return ScoringDistribution("lm", stable_softmax(scores)).validate()
