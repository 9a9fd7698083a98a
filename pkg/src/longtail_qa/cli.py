"""Command-line surface: curate, pretrain-rankers, train, eval, report, sweep.

Exit codes: 0 success, 1 invalid input (bad flags, config, data), 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import copy
import sys
from pathlib import Path

from .config import ABLATIONS, apply_overrides, load_config
from .errors import OracleError, PreconditionError
from .metrics import ScoreSummary
from .reporting import (summary_json, write_curation_report, write_report_bundle,
                        write_sweep_grid)
from .tasks import LongTailManifest
from .trainer import (Corpus, RunPaths, curate, evaluate_suite, run_stage1,
                      run_stage2, write_run_config)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # invalid CLI input exits 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(self._invalid_exit(message))

    def _invalid_exit(self, message: str) -> int:
        print(f"error: {message}", file=sys.stderr)
        return 1


def _build_parser() -> _Parser:
    ap = _Parser(prog="ltqa", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("curate", "pretrain-rankers", "train", "eval", "report", "sweep"):
        sp = sub.add_parser(verb)
        sp.add_argument("--config", default=None, help="TOML config path")
        sp.add_argument("--out", default=None, help="run output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--ablation", choices=[a for a in ABLATIONS],
                        default=None)
    return ap


def _load(args) -> tuple[dict, RunPaths]:
    cfg = load_config(args.config)
    apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.out is not None:
        cfg["run"]["out_dir"] = args.out
    if args.ablation is not None:
        cfg["train"]["ablation"] = args.ablation
    return cfg, RunPaths(Path(cfg["run"]["out_dir"]))


def _manifest(cfg, corpus, paths: RunPaths) -> LongTailManifest:
    if paths.manifest.exists():
        return LongTailManifest.load(paths.manifest)
    manifest = curate(cfg, corpus)
    paths.prepare()
    manifest.save(paths.manifest)
    return manifest


def _cmd_curate(cfg, paths: RunPaths) -> int:
    corpus = Corpus.load(cfg["data"]["corpus_dir"])
    manifest = curate(cfg, corpus)
    paths.prepare()
    manifest.save(paths.manifest)
    write_curation_report(paths.reports / "curation.csv", manifest,
                          corpus.registry, int(cfg["data"]["head_budget"]))
    write_run_config(cfg, paths)
    total = sum(manifest.sampled_train_sizes.values())
    print(f"curated {len(manifest.seen_task_ids)} seen / "
          f"{len(manifest.unseen_task_ids)} unseen tasks, "
          f"{total} training instances -> {paths.manifest}")
    return 0


def _cmd_pretrain(cfg, paths: RunPaths) -> int:
    corpus = Corpus.load(cfg["data"]["corpus_dir"])
    manifest = _manifest(cfg, corpus, paths)
    write_run_config(cfg, paths)
    ckpt = run_stage1(cfg, corpus, manifest, paths, resume=True)
    print(f"stage-one rankers ready: {ckpt}")
    return 0


def _cmd_train(cfg, paths: RunPaths) -> int:
    corpus = Corpus.load(cfg["data"]["corpus_dir"])
    manifest = _manifest(cfg, corpus, paths)
    write_run_config(cfg, paths)
    ckpt = run_stage2(cfg, corpus, manifest, paths, resume=True)
    print(f"stage-two checkpoint: {ckpt}")
    return 0


def _print_summary(summary: ScoreSummary):
    print(f"a_seen={summary.a_seen:.2f} a_unseen={summary.a_unseen:.2f} "
          f"head@{summary.m}={summary.head_at_m:.2f} "
          f"tail@{summary.n}={summary.tail_at_n:.2f}")


def _cmd_eval(cfg, paths: RunPaths) -> int:
    corpus = Corpus.load(cfg["data"]["corpus_dir"])
    manifest = _manifest(cfg, corpus, paths)
    summary = evaluate_suite(cfg, corpus, manifest, paths)
    (paths.reports / "summary.json").write_text(summary_json(summary),
                                                encoding="utf-8")
    _print_summary(summary)
    return 0


def _cmd_report(cfg, paths: RunPaths) -> int:
    gaps = write_report_bundle(paths)
    print(f"report bundle in {paths.reports}")
    for g in gaps:
        print(f"  gap: {g}")
    return 0


def _cmd_sweep(cfg, paths: RunPaths) -> int:
    alphas = cfg["sweep"]["alphas"] or [cfg["data"]["alpha"]]
    unseen_counts = cfg["sweep"]["unseen_counts"] or [cfg["data"]["n_unseen"]]
    rows = []
    for alpha in alphas:
        for n_unseen in unseen_counts:
            cell = copy.deepcopy(cfg)
            cell["data"]["alpha"] = float(alpha)
            cell["data"]["n_unseen"] = int(n_unseen)
            cell_dir = paths.out / "sweep" / f"alpha{alpha}_unseen{n_unseen}"
            cell["run"]["out_dir"] = str(cell_dir)
            cell_paths = RunPaths(cell_dir).prepare()
            corpus = Corpus.load(cell["data"]["corpus_dir"])
            manifest = curate(cell, corpus)
            manifest.save(cell_paths.manifest)
            write_run_config(cell, cell_paths)
            if cell["train"]["ablation"] != "no-pk":
                run_stage1(cell, corpus, manifest, cell_paths, resume=True)
            run_stage2(cell, corpus, manifest, cell_paths, resume=True)
            summary = evaluate_suite(cell, corpus, manifest, cell_paths)
            (cell_paths.reports / "summary.json").write_text(
                summary_json(summary), encoding="utf-8")
            rows.append({"alpha": alpha, "n_unseen": n_unseen,
                         "a_seen": summary.a_seen, "a_unseen": summary.a_unseen,
                         "head_at_m": summary.head_at_m,
                         "tail_at_n": summary.tail_at_n,
                         "cell_dir": str(cell_dir)})
    paths.prepare()
    grid = write_sweep_grid(paths.out, rows)
    print(f"sweep grid: {grid}")
    return 0


_COMMANDS = {
    "curate": _cmd_curate,
    "pretrain-rankers": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg, paths = _load(args)
        return _COMMANDS[args.verb](cfg, paths)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PreconditionError, OracleError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
