"""Retrieve-then-rerank knowledge mining.

Stage-one candidate pools come from BM25 over the serialized training
instances.  The trainable side is a dual-encoder retriever (dot-product
scores) and a cross-encoder reranker (scalar head over a joint encoding
of example, hint, and query).  Encoders are bag-of-embedding + projection;
the scoring forms (dot product, scalar head) are the contract, the encoder
capacity is configurable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, concat
from .errors import PreconditionError
from .kernels import bm25_scores
from .nn import Embedding, Linear, Module
from .oracle import Hint, ScoringDistribution, stable_softmax
from .tasks import QAInstance
from .text import Vocab, serialize_instance, tokenize

HINT_SEPARATOR = " | "
BM25_K1 = 1.2
BM25_B = 0.75


def example_text(example: QAInstance) -> str:
    """Full rendering of an in-context example (source plus its answer)."""
    pair = serialize_instance(example)
    return f"{pair.source_text}\n{pair.target_text}"


def uid_sort_key(uid: str) -> tuple[str, int]:
    task, _, offset = uid.rpartition("#")
    return (task, int(offset)) if offset.isdigit() else (uid, 0)


@dataclass
class CandidateSet:
    instance_id: str
    examples: list[QAInstance]
    provenance: str                                  # bm25_pool | retrieved
    hints: list[Hint | None] = field(default_factory=list)
    scores: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.hints:
            self.hints = [None] * len(self.examples)

    def subset(self, idx: np.ndarray) -> "CandidateSet":
        return CandidateSet(
            instance_id=self.instance_id,
            examples=[self.examples[i] for i in idx],
            provenance=self.provenance,
            hints=[self.hints[i] for i in idx],
        )

    def require_hints(self):
        if any(h is None for h in self.hints):
            raise PreconditionError(
                f"hints missing for candidates of instance {self.instance_id}")


@dataclass(frozen=True)
class KnowledgePrompt:
    hints: tuple[str, ...]
    rendered_text: str

    @classmethod
    def from_hints(cls, hints) -> "KnowledgePrompt":
        hints = tuple(hints)
        return cls(hints=hints, rendered_text=HINT_SEPARATOR.join(hints))


EMPTY_KNOWLEDGE = KnowledgePrompt(hints=(), rendered_text="")


class BM25Index:
    """Immutable inverted index over serialized source+answer texts."""

    def __init__(self, pool: list[QAInstance], k1: float = BM25_K1, b: float = BM25_B):
        self.pool = list(pool)
        self.uids = [e.uid for e in self.pool]
        self.sort_keys = [uid_sort_key(u) for u in self.uids]
        self.k1 = k1
        self.b = b
        self.term_ids: dict[str, int] = {}
        per_doc: list[dict[int, int]] = []
        for e in self.pool:
            counts: dict[int, int] = {}
            for tok in tokenize(example_text(e)):
                t = self.term_ids.setdefault(tok, len(self.term_ids))
                counts[t] = counts.get(t, 0) + 1
            per_doc.append(counts)
        n_terms = len(self.term_ids)
        n_docs = len(self.pool)
        df = np.zeros(n_terms, dtype=np.int64)
        self.doc_len = np.array([sum(c.values()) for c in per_doc], dtype=np.float64)
        self.avgdl = float(self.doc_len.mean()) if n_docs else 1.0
        postings: list[list[tuple[int, int]]] = [[] for _ in range(n_terms)]
        for d, counts in enumerate(per_doc):
            for t, tf in counts.items():
                postings[t].append((d, tf))
                df[t] += 1
        ptr = np.zeros(n_terms + 1, dtype=np.int64)
        docs, tfs = [], []
        for t, plist in enumerate(postings):
            ptr[t + 1] = ptr[t] + len(plist)
            for d, tf in plist:
                docs.append(d)
                tfs.append(tf)
        self.post_ptr = ptr
        self.post_docs = np.array(docs, dtype=np.int64)
        self.post_tf = np.array(tfs, dtype=np.float64)
        self.idf = np.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))

    def scores(self, text: str) -> np.ndarray:
        q = np.array([self.term_ids[t] for t in tokenize(text) if t in self.term_ids],
                     dtype=np.int64)
        if q.size == 0:
            return np.zeros(len(self.pool), dtype=np.float64)
        return bm25_scores(self.post_ptr, self.post_docs, self.post_tf, self.idf,
                           self.doc_len, self.avgdl, q, self.k1, self.b)


def bm25_candidates(instance: QAInstance, index: BM25Index, c: int) -> CandidateSet:
    """Top-c pool instances by BM25 over the instance's source text.

    Self-excluded by uid; ties broken by (task_id, offset) ascending."""
    if c < 1:
        raise ValueError("candidate count must be at least 1")
    scores = index.scores(serialize_instance(instance).source_text)
    live = [i for i, uid in enumerate(index.uids) if uid != instance.uid]
    if len(live) < c:
        raise ValueError(
            f"training pool has {len(live)} usable instances, need {c}")
    live.sort(key=lambda i: (-scores[i], index.sort_keys[i]))
    return CandidateSet(
        instance_id=instance.uid,
        examples=[index.pool[i] for i in live[:c]],
        provenance="bm25_pool",
    )


def _pad(ids_list: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(1, max((len(i) for i in ids_list), default=1))
    ids = np.zeros((len(ids_list), T), dtype=np.int64)
    valid = np.zeros((len(ids_list), T), dtype=bool)
    for r, row in enumerate(ids_list):
        ids[r, : len(row)] = row
        valid[r, : len(row)] = True
    return ids, valid


class BagEncoder(Module):
    """Mean of token embeddings followed by a linear projection."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.emb = Embedding(vocab_size, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, ids_list: list[list[int]]) -> Tensor:
        ids, valid = _pad(ids_list)
        x = self.emb(ids)                                     # (B, T, d)
        weights = valid / np.maximum(valid.sum(axis=1, keepdims=True), 1)
        pooled = (x * weights[:, :, None]).sum(axis=1)        # (B, d)
        return self.proj(pooled)


class Retriever(Module):
    """Dual encoder: score(e) = E_X([c;q]) . E_D(e)."""

    def __init__(self, vocab: Vocab, dim: int, rng: np.random.Generator):
        self.query_encoder = BagEncoder(len(vocab), dim, rng)
        self.example_encoder = BagEncoder(len(vocab), dim, rng)
        self.vocab = vocab
        self.dim = dim

    def _query_ids(self, instance: QAInstance) -> list[int]:
        return self.vocab.encode(serialize_instance(instance).source_text)

    def _example_ids(self, example: QAInstance) -> list[int]:
        return self.vocab.encode(example_text(example))

    def score_examples(self, instance: QAInstance,
                       examples: list[QAInstance]) -> Tensor:
        q = self.query_encoder([self._query_ids(instance)])           # (1, d)
        d = self.example_encoder([self._example_ids(e) for e in examples])
        return (d @ q.swapaxes(0, 1)).reshape(len(examples))

    def encode_pool(self, pool: list[QAInstance]) -> np.ndarray:
        return self.example_encoder([self._example_ids(e) for e in pool]).data

    def query_encoding(self, instance: QAInstance) -> np.ndarray:
        return self.query_encoder([self._query_ids(instance)]).data[0]


def retrieve(instance: QAInstance, pool: list[QAInstance], l: int,
             retriever: Retriever,
             pool_encodings: np.ndarray | None = None) -> CandidateSet:
    """Exact top-l over the training pool by dual-encoder dot product.

    Self-excluded; ties broken by (task_id, offset) ascending."""
    if l < 1:
        raise ValueError("l must be at least 1")
    if pool_encodings is None:
        pool_encodings = retriever.encode_pool(pool)
    scores = pool_encodings @ retriever.query_encoding(instance)
    live = [i for i, e in enumerate(pool) if e.uid != instance.uid]
    if len(live) < l:
        raise ValueError(f"training pool has {len(live)} usable instances, need {l}")
    live.sort(key=lambda i: (-scores[i], uid_sort_key(pool[i].uid)))
    return CandidateSet(
        instance_id=instance.uid,
        examples=[pool[i] for i in live[:l]],
        provenance="retrieved",
    )


class Reranker(Module):
    """Cross encoder: joint representation of [example; hint; context;
    question] segments (with an elementwise interaction term) fed to a
    scalar head."""

    def __init__(self, vocab: Vocab, dim: int, rng: np.random.Generator):
        self.emb = Embedding(len(vocab), dim, rng)
        self.mix = Linear(3 * dim, dim, rng)
        self.head = Linear(dim, 1, rng)
        self.vocab = vocab
        self.dim = dim

    def _pool_segment(self, ids_list: list[list[int]]) -> Tensor:
        ids, valid = _pad(ids_list)
        x = self.emb(ids)
        weights = valid / np.maximum(valid.sum(axis=1, keepdims=True), 1)
        return (x * weights[:, :, None]).sum(axis=1)

    def score_pairs(self, instance: QAInstance, examples: list[QAInstance],
                    hints: list[Hint]) -> Tensor:
        source = serialize_instance(instance).source_text
        left = self._pool_segment(
            [self.vocab.encode(f"{example_text(e)}\n{h.text}")
             for e, h in zip(examples, hints)])
        right = self._pool_segment([self.vocab.encode(source)] * len(examples))
        rep = self.mix(concat([left, right, left * right], axis=1)).tanh()
        return self.head(rep).reshape(len(examples))


def rerank(instance: QAInstance, candidates: CandidateSet, l_tilde: int,
           reranker: Reranker) -> KnowledgePrompt:
    """Top-l_tilde hints by reranker score, rendered in descending score
    order (ties by candidate id)."""
    if l_tilde < 1:
        raise ValueError("l_tilde must be at least 1")
    if l_tilde > len(candidates.examples):
        raise ValueError("l_tilde exceeds the candidate count")
    candidates.require_hints()
    scores = reranker.score_pairs(instance, candidates.examples,
                                  candidates.hints).data
    order = sorted(range(len(scores)),
                   key=lambda i: (-scores[i], uid_sort_key(candidates.examples[i].uid)))
    return KnowledgePrompt.from_hints(
        candidates.hints[i].text for i in order[:l_tilde])


def ranker_distribution(model_tag: str, candidates: CandidateSet,
                        instance: QAInstance, retriever: Retriever | None = None,
                        reranker: Reranker | None = None) -> ScoringDistribution:
    """Softmax over raw ranker scores across the candidate set."""
    if not candidates.examples:
        raise ValueError("candidate set is empty")
    if model_tag == "r1":
        if retriever is None:
            raise ValueError("r1 distribution needs the retriever")
        raw = retriever.score_examples(instance, candidates.examples).data
    elif model_tag == "r2":
        if reranker is None:
            raise ValueError("r2 distribution needs the reranker")
        candidates.require_hints()
        raw = reranker.score_pairs(instance, candidates.examples,
                                   candidates.hints).data
    else:
        raise ValueError(f"unknown ranker tag {model_tag!r}")
    return ScoringDistribution(model_tag, stable_softmax(raw)).validate()


def write_candidate_cache(path, sets: dict[str, CandidateSet]):
    with open(path, "w", encoding="utf-8") as fh:
        for uid in sorted(sets):
            cs = sets[uid]
            fh.write(json.dumps({
                "instance_id": uid,
                "provenance": cs.provenance,
                "example_ids": [e.uid for e in cs.examples],
            }, sort_keys=True) + "\n")


def load_candidate_cache(path, pool_by_uid: dict[str, QAInstance]) -> dict[str, CandidateSet]:
    out: dict[str, CandidateSet] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[rec["instance_id"]] = CandidateSet(
                instance_id=rec["instance_id"],
                examples=[pool_by_uid[u] for u in rec["example_ids"]],
                provenance=rec["provenance"],
            )
    return out
