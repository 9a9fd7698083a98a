"""Task universe: instances, task specs, seen/unseen splits, Zipf manifests.

All sampling is driven by explicit seeds through ``numpy.random.Generator``
so re-running curation with the same arguments reproduces the manifest
byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMATS = ("extractive", "abstractive", "multiple_choice", "yes_no")
METRIC_KINDS = ("f1_overlap", "accuracy", "rouge_l", "bleu")

# Which metrics are admissible per format; abstractive tasks pick one of
# three depending on the dataset, every other format is fixed.
FORMAT_METRICS = {
    "extractive": ("f1_overlap",),
    "abstractive": ("rouge_l", "bleu", "f1_overlap"),
    "multiple_choice": ("accuracy",),
    "yes_no": ("f1_overlap",),
}

DEFAULT_METRIC = {
    "extractive": "f1_overlap",
    "abstractive": "f1_overlap",
    "multiple_choice": "accuracy",
    "yes_no": "f1_overlap",
}


@dataclass(frozen=True)
class QAInstance:
    task_id: str
    format: str
    context: str
    question: str
    answer: str
    options: tuple[str, ...] | None = None
    uid: str = ""

    def validate(self):
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}")
        if not self.answer:
            raise ValueError(f"instance {self.uid or '<anon>'} has an empty answer")
        if self.format == "multiple_choice":
            if not self.options:
                raise ValueError(f"multiple_choice instance {self.uid} has no options")
            if self.answer not in self.options:
                raise ValueError(
                    f"multiple_choice instance {self.uid}: answer not among options")
        return self


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    format: str
    metric_kind: str
    original_train_size: int
    split_sizes: dict = field(default_factory=dict)  # train/val/test counts

    def validate(self):
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}")
        if self.metric_kind not in FORMAT_METRICS[self.format]:
            raise ValueError(
                f"task {self.task_id}: metric {self.metric_kind!r} is not valid "
                f"for format {self.format!r}")
        if self.original_train_size < 0 or any(v < 0 for v in self.split_sizes.values()):
            raise ValueError(f"task {self.task_id}: negative split size")
        return self


@dataclass
class LongTailManifest:
    alpha: float
    seed: int
    seen_task_ids: list[str]           # rank order: descending sampled size
    unseen_task_ids: list[str]
    sampled_train_sizes: dict[str, int]
    train_indices: dict[str, list[int]]
    val_indices: dict[str, list[int]]

    def all_task_ids(self) -> list[str]:
        return list(self.seen_task_ids) + list(self.unseen_task_ids)

    def to_json(self) -> str:
        payload = {
            "alpha": self.alpha,
            "seed": self.seed,
            "seen_task_ids": self.seen_task_ids,
            "unseen_task_ids": self.unseen_task_ids,
            "sampled_train_sizes": self.sampled_train_sizes,
            "train_indices": self.train_indices,
            "val_indices": self.val_indices,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LongTailManifest":
        d = json.loads(text)
        return cls(
            alpha=float(d["alpha"]),
            seed=int(d["seed"]),
            seen_task_ids=list(d["seen_task_ids"]),
            unseen_task_ids=list(d["unseen_task_ids"]),
            sampled_train_sizes={k: int(v) for k, v in d["sampled_train_sizes"].items()},
            train_indices={k: list(map(int, v)) for k, v in d["train_indices"].items()},
            val_indices={k: list(map(int, v)) for k, v in d["val_indices"].items()},
        )

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LongTailManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def zipf_weights(n: int, alpha: float) -> np.ndarray:
    """Unnormalized rank weights r^(-alpha), r = 1..n."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    ranks = np.arange(1, n + 1, dtype=np.float64)
    return ranks ** (-float(alpha))


def split_seen_unseen(registry: list[TaskSpec], n_unseen: int,
                      seed: int) -> tuple[list[str], list[str]]:
    """Deterministically partition task ids into seen and unseen sets.

    Membership comes from a seeded permutation; both output lists keep
    registry order so downstream ranking stays stable.
    """
    ids = [t.task_id for t in registry]
    if n_unseen >= len(ids):
        raise ValueError(f"n_unseen={n_unseen} must be below the task count {len(ids)}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EE4])))
    perm = rng.permutation(len(ids))
    unseen = {ids[i] for i in perm[:n_unseen]}
    return [t for t in ids if t not in unseen], [t for t in ids if t in unseen]


def downsample_tasks(registry: list[TaskSpec], alpha: float, head_budget: int,
                     seed: int, unseen_task_ids=()) -> LongTailManifest:
    """Build a Zipf long-tail manifest over the seen tasks of `registry`.

    Registry order defines the rank order.  Rank 1 gets
    min(head_budget, original size); rank r gets floor(rank1 * r^-alpha),
    capped at its original size, at the previous rank's size (keeps the
    tail non-increasing when originals are not sorted), and floored at 1.
    Per-task validation draws max(1, train // 8) extra instances from the
    leftovers; a fully-sampled task gets whatever leftovers remain.
    """
    if not registry:
        raise ValueError("registry must not be empty")
    if head_budget < 1:
        raise ValueError("head_budget must be at least 1")
    unseen = set(unseen_task_ids)
    seen = [t for t in registry if t.task_id not in unseen]
    if not seen:
        raise ValueError("every task is unseen; nothing to sample")
    for t in seen:
        if t.original_train_size < 1:
            raise ValueError(f"seen task {t.task_id} has no training instances")

    weights = zipf_weights(len(seen), alpha)
    rank1 = min(head_budget, seen[0].original_train_size)
    sizes: dict[str, int] = {}
    prev = rank1
    for r, (spec, w) in enumerate(zip(seen, weights), start=1):
        raw = int(np.floor(rank1 * w))
        size = min(spec.original_train_size, prev, max(1, raw))
        sizes[spec.task_id] = size
        prev = size

    children = np.random.SeedSequence([seed, 0xD05A]).spawn(len(seen))
    train_idx: dict[str, list[int]] = {}
    val_idx: dict[str, list[int]] = {}
    for spec, child in zip(seen, children):
        rng = np.random.Generator(np.random.PCG64(child))
        n_train = sizes[spec.task_id]
        want_val = max(1, n_train // 8)
        n_val = min(want_val, spec.original_train_size - n_train)
        perm = rng.permutation(spec.original_train_size)
        train_idx[spec.task_id] = sorted(int(i) for i in perm[:n_train])
        val_idx[spec.task_id] = sorted(int(i) for i in perm[n_train:n_train + n_val])

    return LongTailManifest(
        alpha=float(alpha),
        seed=int(seed),
        seen_task_ids=[t.task_id for t in seen],
        unseen_task_ids=[t for t in (s.task_id for s in registry) if t in unseen],
        sampled_train_sizes=sizes,
        train_indices=train_idx,
        val_indices=val_idx,
    )


def load_instances_jsonl(path) -> list[QAInstance]:
    """Read QA instances from a JSON-lines file (one object per line)."""
    out: list[QAInstance] = []
    per_task: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                options = rec.get("options")
                inst = QAInstance(
                    task_id=rec["task_id"],
                    format=rec["format"],
                    context=rec["context"],
                    question=rec["question"],
                    answer=rec["answer"],
                    options=tuple(options) if options else None,
                    uid=f"{rec['task_id']}#{per_task.get(rec['task_id'], 0)}",
                ).validate()
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            per_task[inst.task_id] = per_task.get(inst.task_id, 0) + 1
            out.append(inst)
    return out


def build_registry(train_instances: list[QAInstance],
                   test_instances: list[QAInstance] = (),
                   metric_overrides: dict[str, str] | None = None) -> list[TaskSpec]:
    """Derive task specs from loaded instances (registry order = first sight)."""
    overrides = metric_overrides or {}
    order: list[str] = []
    fmt: dict[str, str] = {}
    counts: dict[str, int] = {}
    test_counts: dict[str, int] = {}
    for inst in train_instances:
        if inst.task_id not in fmt:
            order.append(inst.task_id)
            fmt[inst.task_id] = inst.format
        counts[inst.task_id] = counts.get(inst.task_id, 0) + 1
    for inst in test_instances:
        if inst.task_id not in fmt:
            order.append(inst.task_id)
            fmt[inst.task_id] = inst.format
        test_counts[inst.task_id] = test_counts.get(inst.task_id, 0) + 1
    return [
        TaskSpec(
            task_id=tid,
            format=fmt[tid],
            metric_kind=overrides.get(tid, DEFAULT_METRIC[fmt[tid]]),
            original_train_size=counts.get(tid, 0),
            split_sizes={"train": counts.get(tid, 0), "test": test_counts.get(tid, 0)},
        ).validate()
        for tid in order
    ]


def apply_manifest(manifest: LongTailManifest,
                   instances: list[QAInstance]) -> tuple[list[QAInstance], list[QAInstance]]:
    """Materialize (train_pool, val_pool) from per-task sampled indices."""
    by_task: dict[str, list[QAInstance]] = {}
    for inst in instances:
        by_task.setdefault(inst.task_id, []).append(inst)
    train: list[QAInstance] = []
    val: list[QAInstance] = []
    for tid in manifest.seen_task_ids:
        rows = by_task.get(tid, [])
        for i in manifest.train_indices.get(tid, []):
            train.append(rows[i])
        for i in manifest.val_indices.get(tid, []):
            val.append(rows[i])
    return train, val
