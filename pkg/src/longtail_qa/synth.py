"""Synthetic QA corpora with planted retrieval and clustering structure.

Two task families:

* ``extract`` tasks: the context embeds several (signal word, value word)
  pairs; the task's cluster decides which signal's value is the answer,
  and the question is the cluster's fixed template (the template never
  names the signal, so the rule must be learned).  Unseen tasks reuse the
  cluster templates, which is what makes them solvable zero-shot.
* ``code`` tasks: each task owns a tiny private codebook; the context and
  question carry the key and the answer is the mapped value.  Keys repeat
  across a task's instances, so retrieving a same-key example (and hinting
  its answer) solves the instance, while the model alone has almost no
  signal - this is the planted structure the knowledge miner exploits.

Run as a module to write a corpus:
``python -m longtail_qa.synth OUT_DIR --preset suite --seed 1``.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FILLERS = (
    "report page entry line note item file batch record sheet board panel "
    "column row cell draft memo list table chart extra plain fresh local"
).split()

VALUES = (
    "amber basil cedar ember garnet hazel indigo juniper "
    "maple olive quartz rowan"
).split()

SIGNALS = ("flagstone", "cueball", "markwell", "stampede")

TEMPLATES = (
    "which term follows the flag signal in this passage",
    "what word does the cue signal bring up",
    "name the token standing behind the mark signal",
    "report the entry tied to the stamp signal",
)


@dataclass
class TaskPlan:
    task_id: str
    kind: str                 # extract | code
    cluster: int = 0
    n_train: int = 0
    n_test: int = 8
    keys_per_task: int = 3
    unseen: bool = False
    format: str = "extractive"
    metric: str | None = None


def _extract_record(rng: np.random.Generator, plan: TaskPlan) -> dict:
    n_clusters_present = min(len(SIGNALS), 3)
    clusters = {plan.cluster}
    while len(clusters) < n_clusters_present:
        clusters.add(int(rng.integers(0, len(SIGNALS))))
    cluster_list = [int(c) for c in rng.permutation(sorted(clusters))]
    vals = {c: VALUES[int(rng.integers(0, len(VALUES)))] for c in cluster_list}
    words = [FILLERS[int(rng.integers(0, len(FILLERS)))] for _ in range(8)]
    # descending insertion points so no pair can split an earlier one
    spots = sorted((int(rng.integers(0, len(words) + 1))
                    for _ in cluster_list), reverse=True)
    for c, pos in zip(cluster_list, spots):
        words[pos:pos] = [SIGNALS[c], vals[c]]
    answer = vals[plan.cluster]
    record = {
        "task_id": plan.task_id,
        "format": plan.format,
        "context": " ".join(words),
        "question": TEMPLATES[plan.cluster],
        "answer": answer,
    }
    if plan.format == "multiple_choice":
        decoys = [vals[c] for c in clusters if c != plan.cluster][:2]
        while len(decoys) < 2:
            decoys.append(VALUES[int(rng.integers(0, len(VALUES)))])
        options = [answer] + decoys
        rng.shuffle(options)
        record["options"] = options
    elif plan.format == "yes_no":
        has = bool(rng.integers(0, 2))
        if not has:
            words = [w for w in words if w != SIGNALS[plan.cluster]]
            record["context"] = " ".join(words)
        record["question"] = f"does the {SIGNALS[plan.cluster]} signal appear here"
        record["answer"] = "yes" if has else "no"
    return record


def _code_records(rng: np.random.Generator, plan: TaskPlan,
                  n: int, keys: list[str], codebook: dict[str, str]) -> list[dict]:
    out = []
    for i in range(n):
        key = keys[i % len(keys)]
        words = [FILLERS[int(rng.integers(0, len(FILLERS)))] for _ in range(8)]
        pos = int(rng.integers(0, len(words) + 1))
        words[pos:pos] = ["entry", key]
        out.append({
            "task_id": plan.task_id,
            "format": "extractive",
            "context": " ".join(words),
            "question": f"what does the code {key} stand for",
            "answer": codebook[key],
        })
    return out


def generate_corpus(out_dir: str | Path, plans: list[TaskPlan], seed: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC0DE])))
    train_rows: list[dict] = []
    test_rows: list[dict] = []
    metrics: dict[str, str] = {}
    unseen: list[str] = []
    for plan in plans:
        if plan.metric:
            metrics[plan.task_id] = plan.metric
        if plan.unseen:
            unseen.append(plan.task_id)
        if plan.kind == "code":
            keys = [f"k{plan.task_id.replace('-', '')}x{i}"
                    for i in range(plan.keys_per_task)]
            codebook = {}
            for k in keys:
                codebook[k] = VALUES[int(rng.integers(0, len(VALUES)))]
            train_rows += _code_records(rng, plan, plan.n_train, keys, codebook)
            test_rows += _code_records(rng, plan, plan.n_test, keys, codebook)
        else:
            train_rows += [_extract_record(rng, plan) for _ in range(plan.n_train)]
            test_rows += [_extract_record(rng, plan) for _ in range(plan.n_test)]

    def dump(path: Path, rows: list[dict]):
        with open(path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    dump(out_dir / "train.jsonl", train_rows)
    dump(out_dir / "test.jsonl", test_rows)
    (out_dir / "tasks.json").write_text(json.dumps({
        "metrics": metrics,
        "unseen_task_ids": unseen,
    }, indent=1, sort_keys=True), encoding="utf-8")
    return out_dir


def suite_plans(extra_formats: bool = False) -> list[TaskPlan]:
    """Planted ablation suite: extract heads, code tails, unseen extracts."""
    plans = [
        TaskPlan("ex-head-a", "extract", cluster=0, n_train=260, n_test=12),
        TaskPlan("ex-head-b", "extract", cluster=1, n_train=130, n_test=12),
        TaskPlan("ex-mid-a", "extract", cluster=2, n_train=90, n_test=12),
        TaskPlan("ex-mid-b", "extract", cluster=0, n_train=70, n_test=12),
        TaskPlan("code-a", "code", n_train=22, n_test=12),
        TaskPlan("code-b", "code", n_train=20, n_test=12),
        TaskPlan("code-c", "code", n_train=18, n_test=12),
        TaskPlan("code-d", "code", n_train=16, n_test=12),
        TaskPlan("un-ex-a", "extract", cluster=0, n_test=12, unseen=True),
        TaskPlan("un-ex-b", "extract", cluster=1, n_test=12, unseen=True),
        TaskPlan("un-ex-c", "extract", cluster=2, n_test=12, unseen=True),
        TaskPlan("un-ex-d", "extract", cluster=1, n_test=12, unseen=True),
    ]
    if extra_formats:
        plans.insert(4, TaskPlan("ex-mc", "extract", cluster=1, n_train=60,
                                 n_test=12, format="multiple_choice"))
        plans.insert(5, TaskPlan("ex-yn", "extract", cluster=2, n_train=50,
                                 n_test=12, format="yes_no"))
    return plans


def stage1_plans() -> list[TaskPlan]:
    """Code-only corpus of 200 training instances for ranker pre-training."""
    return [
        TaskPlan(f"code-{i}", "code", n_train=40, n_test=8, keys_per_task=5)
        for i in range(5)
    ]


PRESETS = {
    "suite": suite_plans,
    "suite-formats": lambda: suite_plans(extra_formats=True),
    "stage1": stage1_plans,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="write a synthetic planted corpus")
    ap.add_argument("out_dir")
    ap.add_argument("--preset", choices=sorted(PRESETS), default="suite")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)
    generate_corpus(args.out_dir, PRESETS[args.preset](), args.seed)
    print(f"wrote corpus to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
