"""Plain-text report emission: curation tables, scoreboard curves, run bundles.

Everything is CSV/JSONL so any plotting tool can pick it up; nothing here
is interactive.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .tasks import LongTailManifest, TaskSpec
from .trainer import RunLog, RunPaths


def write_curation_report(path, manifest: LongTailManifest,
                          registry: list[TaskSpec], head_budget: int):
    """Per-task original vs sampled sizes (bar-chart data), alpha in the
    header line; deterministic bytes for identical inputs."""
    by_id = {t.task_id: t for t in registry}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# alpha={manifest.alpha} seed={manifest.seed} "
                 f"head_budget={head_budget}\n")
        w = csv.writer(fh)
        w.writerow(["task_id", "rank", "split", "original_size",
                    "sampled_size", "val_size"])
        for rank, tid in enumerate(manifest.seen_task_ids, start=1):
            w.writerow([tid, rank, "seen",
                        by_id[tid].original_train_size,
                        manifest.sampled_train_sizes[tid],
                        len(manifest.val_indices.get(tid, []))])
        for tid in manifest.unseen_task_ids:
            w.writerow([tid, "", "unseen",
                        by_id[tid].original_train_size, 0, 0])


def write_heatmap_csv(path, task_ids: list[str], matrix):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("task_id," + ",".join(f"p{i}" for i in range(matrix.shape[1])) + "\n")
        for tid, row in zip(task_ids, matrix):
            fh.write(tid + "," + ",".join(str(int(x)) for x in row) + "\n")


def write_report_bundle(paths: RunPaths) -> list[str]:
    """Export scoreboard curve and loss traces from the run log; report
    explicit gaps for whatever a partial run has not produced yet."""
    paths.prepare()
    gaps: list[str] = []
    if paths.runlog.exists():
        records = RunLog.read(paths.runlog)
        boards = [r for r in records if r.get("kind") == "scoreboard"]
        if boards:
            with open(paths.reports / "scoreboard_curve.csv", "w", newline="",
                      encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "v_r1", "v_r2", "v_f", "active_edges"])
                for b in boards:
                    w.writerow([b["epoch"], b["v_r1"], b["v_r2"], b["v_f"],
                                ";".join("->".join(e) for e in b["active_edges"])])
        else:
            gaps.append("no scoreboard entries in the run log")
        for stage in (1, 2):
            steps = [r for r in records
                     if r.get("kind") == "step" and r.get("stage") == stage]
            if not steps:
                gaps.append(f"no stage-{stage} training steps logged")
                continue
            names = sorted({k for r in steps for k in r["losses"]})
            with open(paths.reports / f"losses_stage{stage}.csv", "w", newline="",
                      encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "step"] + names)
                for r in steps:
                    w.writerow([r["epoch"], r["step"]] +
                               [r["losses"].get(nm, "") for nm in names])
        evals = [r for r in records if r.get("kind") == "stage1_eval"]
        if evals:
            with open(paths.reports / "stage1_heldout_kl.csv", "w", newline="",
                      encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "kl_r1", "kl_r2"])
                for r in evals:
                    w.writerow([r["epoch"], r["kl_r1"], r["kl_r2"]])
    else:
        gaps.append("run log missing")
    if not (paths.reports / "scores.csv").exists():
        gaps.append("score summary missing (run eval)")
    if not (paths.reports / "prompt_heatmap.csv").exists():
        gaps.append("prompt heat map missing (run eval on a prompt-pool run)")
    (paths.reports / "gaps.txt").write_text(
        "\n".join(gaps) + ("\n" if gaps else ""), encoding="utf-8")
    return gaps


def write_sweep_grid(out_dir, rows: list[dict]):
    """One row per sweep cell: alpha, unseen count, summary metrics."""
    path = Path(out_dir) / "sweep_grid.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "n_unseen", "a_seen", "a_unseen",
                    "head_at_m", "tail_at_n", "cell_dir"])
        for r in rows:
            w.writerow([r["alpha"], r["n_unseen"], f"{r['a_seen']:.4f}",
                        f"{r['a_unseen']:.4f}", f"{r['head_at_m']:.4f}",
                        f"{r['tail_at_n']:.4f}", r["cell_dir"]])
    return path


def summary_json(summary) -> str:
    return json.dumps({
        "a_seen": summary.a_seen,
        "a_unseen": summary.a_unseen,
        "head_at_m": summary.head_at_m,
        "tail_at_n": summary.tail_at_n,
        "m": summary.m,
        "n": summary.n,
        "per_task": summary.per_task,
    }, indent=1, sort_keys=True)
