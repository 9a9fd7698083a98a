"""Per-format QA scoring and the seen/unseen/head/tail aggregation.

All scorers return values in [0, 1]; aggregation reports them x100 the way
the score CSV does.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .kernels import lcs_length
from .tasks import LongTailManifest, METRIC_KINDS
from .text import normalize, tokenize


def f1_token_overlap(prediction: str, gold: str) -> float:
    """Bag-of-token F1 after normalization; empty prediction scores 0."""
    gold_toks = tokenize(gold)
    if not gold_toks:
        raise ValueError("gold answer must be non-empty")
    pred_toks = tokenize(prediction)
    if not pred_toks:
        return 0.0
    overlap = sum((Counter(pred_toks) & Counter(gold_toks)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_toks)
    recall = overlap / len(gold_toks)
    return 2.0 * precision * recall / (precision + recall)


def rouge_l(prediction: str, gold: str) -> float:
    """LCS F-measure over normalized tokens."""
    gold_toks = tokenize(gold)
    if not gold_toks:
        raise ValueError("gold answer must be non-empty")
    pred_toks = tokenize(prediction)
    if not pred_toks:
        return 0.0
    ids = {}
    enc = lambda toks: np.array([ids.setdefault(t, len(ids)) for t in toks],
                                dtype=np.int64)
    lcs = lcs_length(enc(pred_toks), enc(gold_toks))
    if lcs == 0:
        return 0.0
    precision = lcs / len(pred_toks)
    recall = lcs / len(gold_toks)
    return 2.0 * precision * recall / (precision + recall)


def _ngram_counts(toks: list[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(prediction: str, gold: str, max_order: int = 4) -> float:
    """BLEU with brevity penalty; add-one smoothing on orders >= 2."""
    gold_toks = tokenize(gold)
    if not gold_toks:
        raise ValueError("gold answer must be non-empty")
    pred_toks = tokenize(prediction)
    if not pred_toks:
        return 0.0
    log_precisions = []
    for n in range(1, max_order + 1):
        pred_ngrams = _ngram_counts(pred_toks, n)
        gold_ngrams = _ngram_counts(gold_toks, n)
        matches = sum((pred_ngrams & gold_ngrams).values())
        total = max(0, len(pred_toks) - n + 1)
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        else:
            p = (matches + 1.0) / (total + 1.0)
        log_precisions.append(np.log(p))
    brevity = 1.0 if len(pred_toks) >= len(gold_toks) else \
        float(np.exp(1.0 - len(gold_toks) / len(pred_toks)))
    return float(brevity * np.exp(np.mean(log_precisions)))


def map_to_option(prediction: str, options: tuple[str, ...]) -> str:
    """Snap free text onto the closest option by token F1 (generative models
    may emit option text rather than a letter); zero overlap leaves it as is."""
    best, best_f1 = prediction, 0.0
    for opt in options:
        try:
            f1 = f1_token_overlap(prediction, opt)
        except ValueError:
            continue
        if f1 > best_f1:
            best, best_f1 = opt, f1
    return best


def score_prediction(metric_kind: str, prediction: str, gold: str,
                     options: tuple[str, ...] | None = None) -> float:
    if metric_kind not in METRIC_KINDS:
        raise ValueError(f"unknown metric kind {metric_kind!r}")
    if metric_kind == "f1_overlap":
        return f1_token_overlap(prediction, gold)
    if metric_kind == "rouge_l":
        return rouge_l(prediction, gold)
    if metric_kind == "bleu":
        return bleu(prediction, gold)
    # accuracy: exact match after normalization, with option snapping first
    if options:
        prediction = map_to_option(prediction, options)
    return 1.0 if normalize(prediction) == normalize(gold) else 0.0


@dataclass
class ScoreSummary:
    per_task: dict[str, float]        # task_id -> score in [0, 100]
    a_seen: float
    a_unseen: float
    head_at_m: float
    tail_at_n: float
    m: int
    n: int


def aggregate(per_task: dict[str, float], manifest: LongTailManifest,
              m: int, n: int) -> ScoreSummary:
    """Average scores over seen/unseen tasks and over the m largest /
    n smallest seen tasks by sampled train size (ties by task id)."""
    missing = [t for t in manifest.all_task_ids() if t not in per_task]
    if missing:
        raise ValueError(f"per-task scores missing for: {', '.join(missing)}")
    seen = manifest.seen_task_ids
    if m > len(seen) or n > len(seen):
        raise ValueError(f"m={m}, n={n} exceed the seen-task count {len(seen)}")
    sizes = manifest.sampled_train_sizes
    by_size_desc = sorted(seen, key=lambda t: (-sizes[t], t))
    by_size_asc = sorted(seen, key=lambda t: (sizes[t], t))
    mean = lambda ids: float(np.mean([per_task[t] for t in ids])) if ids else float("nan")
    return ScoreSummary(
        per_task=dict(per_task),
        a_seen=mean(seen),
        a_unseen=mean(manifest.unseen_task_ids),
        head_at_m=mean(by_size_desc[:m]),
        tail_at_n=mean(by_size_asc[:n]),
        m=m,
        n=n,
    )


def write_score_csv(path, summary: ScoreSummary, manifest: LongTailManifest,
                    metric_kinds: dict[str, str]):
    """Rows per task plus a trailing summary block."""
    seen = set(manifest.seen_task_ids)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "metric", "score", "split", "sampled_size"])
        for tid in manifest.all_task_ids():
            w.writerow([
                tid,
                metric_kinds.get(tid, ""),
                f"{summary.per_task[tid]:.4f}",
                "seen" if tid in seen else "unseen",
                manifest.sampled_train_sizes.get(tid, 0),
            ])
        w.writerow([])
        w.writerow(["summary", "a_seen", f"{summary.a_seen:.4f}", "", ""])
        w.writerow(["summary", "a_unseen", f"{summary.a_unseen:.4f}", "", ""])
        w.writerow(["summary", f"head_at_{summary.m}", f"{summary.head_at_m:.4f}", "", ""])
        w.writerow(["summary", f"tail_at_{summary.n}", f"{summary.tail_at_n:.4f}", "", ""])
