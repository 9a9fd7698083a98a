"""Knowledge-distillation machinery.

Stage one distills the LM's candidate distribution into the retriever and
reranker.  Stage two evaluates the three models on a fixed validation
subsample (scoreboard) and runs mutual KD where each pair's KL term is
active only when the teacher's scoreboard value strictly exceeds the
student's.  Teachers are always stop-gradded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, clip_min
from .errors import PreconditionError
from .miner import KnowledgePrompt, uid_sort_key

MODEL_TAGS = ("r1", "r2", "f")
PROB_FLOOR = 1e-12


@dataclass
class Scoreboard:
    values: dict[str, float]          # r1 / r2 / f -> validation value
    evaluated_at: int                 # epoch index

    def validate(self) -> "Scoreboard":
        for tag in MODEL_TAGS:
            if tag not in self.values:
                raise ValueError(f"scoreboard is missing {tag}")
            if not np.isfinite(self.values[tag]):
                raise ValueError(f"scoreboard value for {tag} is not finite")
        return self


def _teacher_array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def kl_divergence(p_teacher, p_student):
    """KL(teacher || student) in nats; the teacher is stop-gradded, the
    student is floored at 1e-12 before the log.  Returns a Tensor when the
    student is a Tensor, otherwise a float."""
    t = _teacher_array(p_teacher)
    s_data = _teacher_array(p_student)
    if t.shape != s_data.shape:
        raise ValueError(f"distribution length mismatch: {t.shape} vs {s_data.shape}")
    mask = t > 0
    t_entropy = float(np.sum(t[mask] * np.log(t[mask])))
    if isinstance(p_student, Tensor):
        cross = (clip_min(p_student, PROB_FLOOR).log() * t).sum()
        return cross * (-1.0) + t_entropy
    return t_entropy - float(np.sum(t * np.log(np.maximum(s_data, PROB_FLOOR))))


def stage1_loss(p_lm, p_r1, p_r2):
    """KL(lm || r1) + KL(lm || r2); gradients reach only the rankers."""
    t = _teacher_array(p_lm)
    for p in (p_r1, p_r2):
        if _teacher_array(p).shape != t.shape:
            raise ValueError("stage-one distributions are misaligned")
    return kl_divergence(t, p_r1) + kl_divergence(t, p_r2)


def kd_edges(scoreboard: Scoreboard) -> list[tuple[str, str]]:
    """Ordered (teacher, student) pairs with strictly higher teacher value."""
    v = scoreboard.values
    return [(i, j) for i in MODEL_TAGS for j in MODEL_TAGS
            if i != j and v[i] > v[j]]


def mutual_kd_loss(p_r1, p_r2, p_f, scoreboard: Scoreboard, epoch: int,
                   edges: list[tuple[str, str]] | None = None):
    """Sum of gated KL terms over the active edges (Tensor, possibly 0).

    `edges` overrides the scoreboard gating (static / back-KD variants);
    by default the scoreboard must have been evaluated at `epoch`.
    """
    if edges is None:
        if scoreboard.evaluated_at != epoch:
            raise PreconditionError(
                f"scoreboard from epoch {scoreboard.evaluated_at} is stale "
                f"for epoch {epoch}")
        edges = kd_edges(scoreboard)
    dists = {"r1": p_r1, "r2": p_r2, "f": p_f}
    total = Tensor(0.0)
    for teacher, student in edges:
        total = total + kl_divergence(_teacher_array(dists[teacher]), dists[student])
    return total


def evaluate_models(val_instances, candidate_sets, retriever, reranker, qa_model,
                    prefix_fn, l_tilde: int, epoch: int) -> Scoreboard:
    """Scoreboard update: for each model, build its knowledge prompt from
    its own top hints, then average the QA model's gold log-likelihood.

    `candidate_sets` maps instance uid -> CandidateSet with hints filled;
    `prefix_fn` maps an instance to its composed soft prompt (or None).
    """
    if not val_instances:
        raise ValueError("validation set is empty")
    totals = {tag: 0.0 for tag in MODEL_TAGS}
    for inst in val_instances:
        cands = candidate_sets[inst.uid]
        cands.require_hints()
        prefix = prefix_fn(inst)
        raw = {
            "r1": retriever.score_examples(inst, cands.examples).data,
            "r2": reranker.score_pairs(inst, cands.examples, cands.hints).data,
            "f": qa_model.candidate_logprobs(inst, cands, prefix).data,
        }
        for tag in MODEL_TAGS:
            order = sorted(
                range(len(cands.examples)),
                key=lambda i: (-raw[tag][i], uid_sort_key(cands.examples[i].uid)))
            kp = KnowledgePrompt.from_hints(
                cands.hints[i].text for i in order[:l_tilde])
            totals[tag] += float(qa_model.answer_logprob(inst, prefix, kp).data)
    n = len(val_instances)
    return Scoreboard(values={t: totals[t] / n for t in MODEL_TAGS},
                      evaluated_at=epoch).validate()
