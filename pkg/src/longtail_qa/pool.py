"""Meta-prompt pool: key selection by cosine distance and the key loss.

The pool holds s trainable prompt sequences and s key vectors.  A frozen
query encoder maps (context, question) to a query vector; the closest
select_count keys pick which prompts are concatenated in front of the QA
model input.  The key loss pulls selected keys toward the query (margin
eta) while pushing selected keys apart (margin gamma, ordered pairs,
normalized by select_count^2).
"""

from __future__ import annotations

import hashlib
import zlib

import numpy as np

from .autograd import Tensor, gather_rows, parameter
from .nn import Module


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class FrozenQueryEncoder:
    """Deterministic hash-bucket embedding encoder with mean pooling.

    Stands in for a fixed pre-trained encoder: the table is seeded, never
    trained, and lives outside the autograd graph, so no loss can push
    gradient into it.
    """

    def __init__(self, dim: int = 64, buckets: int = 4096, seed: int = 7):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF0E])))
        self.table = rng.normal(0.0, 1.0, size=(buckets, dim))
        self.dim = dim
        self.buckets = buckets

    def _bucket(self, token: str) -> int:
        return zlib.crc32(token.encode("utf-8")) % self.buckets

    def __call__(self, context: str, question: str) -> np.ndarray:
        from .text import tokenize

        toks = tokenize(f"{question}\n{context}")
        if not toks:
            raise ValueError("query source text is empty")
        rows = np.array([self._bucket(t) for t in toks], dtype=np.int64)
        return self.table[rows].mean(axis=0)


def query_vector(context: str, question: str, frozen_encoder) -> np.ndarray:
    return frozen_encoder(context, question)


class MetaPromptPool(Module):
    def __init__(self, size: int, select_count: int, prompt_len: int,
                 d_model: int, key_dim: int, eta: float, gamma: float,
                 rng: np.random.Generator):
        if select_count > size:
            raise ValueError("select_count cannot exceed the pool size")
        raw = rng.normal(0.0, 1.0, size=(size, key_dim))
        self.keys = parameter(raw / np.linalg.norm(raw, axis=1, keepdims=True),
                              name="pool_keys")
        self.prompts = parameter(rng.normal(0.0, 0.1, size=(size, prompt_len, d_model)),
                                 name="pool_prompts")
        self.size = size
        self.select_count = select_count
        self.prompt_len = prompt_len
        self.d_model = d_model
        self.key_dim = key_dim
        self.eta = eta
        self.gamma = gamma

    # -- selection -----------------------------------------------------------

    def distances(self, x: np.ndarray) -> np.ndarray:
        keys = self.keys.data
        norms = np.linalg.norm(keys, axis=1) * np.linalg.norm(x)
        return 1.0 - (keys @ x) / norms

    def select(self, x: np.ndarray) -> np.ndarray:
        """Indices of the select_count closest keys, ascending index order;
        distance ties prefer the lower index."""
        d = self.distances(x)
        order = np.lexsort((np.arange(self.size), d))
        return np.sort(order[: self.select_count]).astype(np.int64)

    # -- loss ------------------------------------------------------------------

    def key_loss(self, x: np.ndarray, selected: np.ndarray) -> Tensor:
        if len(selected) != self.select_count:
            raise ValueError("selected index set has the wrong size")
        k = gather_rows(self.keys, selected)                      # (s~, d)
        knorm = ((k ** 2).sum(axis=1)) ** 0.5                     # (s~,)
        xnorm = float(np.linalg.norm(x))
        cos_q = (k @ x) / (knorm * xnorm)
        pull = ((1.0 - cos_q) - self.eta).relu().sum()

        pair_dot = k @ k.swapaxes(0, 1)                           # (s~, s~)
        outer = knorm.reshape(self.select_count, 1) * knorm.reshape(1, self.select_count)
        pair_dist = 1.0 - pair_dot / outer
        off_diag = 1.0 - np.eye(self.select_count)
        push = ((self.gamma - pair_dist).relu() * off_diag).sum()
        return pull + push * (1.0 / self.select_count ** 2)

    # -- composition -------------------------------------------------------------

    def compose(self, selected: np.ndarray) -> Tensor:
        """Concatenate the selected prompts (ascending index) into one
        (select_count * prompt_len, d_model) trainable sequence."""
        if len(selected) != self.select_count:
            raise ValueError("selected index set has the wrong size")
        sel = np.sort(np.asarray(selected, dtype=np.int64))
        return gather_rows(self.prompts, sel).reshape(
            self.select_count * self.prompt_len, self.d_model)

    # -- reporting ----------------------------------------------------------------

    def selection_frequency(self, instances, encoder) -> tuple[list[str], np.ndarray]:
        """Counts of prompt usage per task: rows sum to n_instances * select_count."""
        task_ids: list[str] = []
        rows: dict[str, np.ndarray] = {}
        for inst in instances:
            if inst.task_id not in rows:
                task_ids.append(inst.task_id)
                rows[inst.task_id] = np.zeros(self.size, dtype=np.int64)
            x = encoder(inst.context, inst.question)
            rows[inst.task_id][self.select(x)] += 1
        if not task_ids:
            return task_ids, np.zeros((0, self.size), dtype=np.int64)
        return task_ids, np.stack([rows[t] for t in task_ids])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.keys.data.tobytes())
        h.update(self.prompts.data.tobytes())
        return h.hexdigest()
