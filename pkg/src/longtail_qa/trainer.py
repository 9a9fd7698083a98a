"""Two-stage training orchestration, checkpointing, and evaluation.

Stage one pre-trains the retriever and reranker by distilling the LM
oracle's candidate distribution.  Stage two loops four phases per epoch:
key updates, QA-model + prompt updates, scoreboard evaluation, and gated
mutual KD over retriever, reranker, QA model, and prompts.

Determinism contract: every random draw comes from a generator derived
from (seed, phase tag, epoch), so reruns are bit-identical and resuming
from an epoch checkpoint reproduces the uninterrupted run.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import resolved_json
from .distill import (Scoreboard, evaluate_models, kd_edges, kl_divergence,
                      mutual_kd_loss, stage1_loss)
from .errors import PreconditionError
from .metrics import ScoreSummary, aggregate, score_prediction, write_score_csv
from .miner import (BM25Index, CandidateSet, EMPTY_KNOWLEDGE, Reranker, Retriever,
                    bm25_candidates, rerank, retrieve, uid_sort_key,
                    write_candidate_cache)
from .nn import AdamW
from .oracle import MockOracle, OracleCache, RemoteOracle, stable_softmax
from .pool import FrozenQueryEncoder, MetaPromptPool
from .qa import QAModel
from .autograd import softmax as softmax_t
from .tasks import (LongTailManifest, TaskSpec, apply_manifest, build_registry,
                    downsample_tasks, load_instances_jsonl, split_seen_unseen)
from .text import Vocab

STAGE1_PREFIX = "stage1_epoch"
STAGE2_PREFIX = "stage2_epoch"


def derive_rng(seed: int, *tags) -> np.random.Generator:
    parts = [int(seed)] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(parts)))


@dataclass
class RunPaths:
    out: Path

    def __post_init__(self):
        self.out = Path(self.out)

    @property
    def manifest(self) -> Path: return self.out / "manifest.json"

    @property
    def runlog(self) -> Path: return self.out / "runlog.jsonl"

    @property
    def scoreboard_log(self) -> Path: return self.out / "scoreboard.jsonl"

    @property
    def oracle_cache(self) -> Path: return self.out / "oracle_cache.jsonl"

    @property
    def candidates(self) -> Path: return self.out / "candidates.jsonl"

    @property
    def checkpoints(self) -> Path: return self.out / "checkpoints"

    @property
    def reports(self) -> Path: return self.out / "reports"

    @property
    def config_snapshot(self) -> Path: return self.out / "config.json"

    def prepare(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        self.reports.mkdir(parents=True, exist_ok=True)
        return self


class RunLog:
    """Append-only JSONL log of step losses and per-epoch scoreboards."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        if not append:
            self.path.write_text("", encoding="utf-8")

    def write(self, rec: dict):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def meta(self, **kw):
        self.write({"kind": "meta", **kw})

    def step(self, stage: int, epoch: int, step: int, losses: dict):
        self.write({"kind": "step", "stage": stage, "epoch": epoch,
                    "step": step, "losses": losses})

    def scoreboard(self, board: Scoreboard, edges):
        self.write({"kind": "scoreboard", "epoch": board.evaluated_at,
                    "v_r1": board.values["r1"], "v_r2": board.values["r2"],
                    "v_f": board.values["f"],
                    "active_edges": [list(e) for e in edges]})

    def stage1_eval(self, epoch: int, kl_r1: float, kl_r2: float):
        self.write({"kind": "stage1_eval", "epoch": epoch,
                    "kl_r1": kl_r1, "kl_r2": kl_r2})

    @staticmethod
    def read(path) -> list[dict]:
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return records

    @staticmethod
    def loss_sequence(records: list[dict], stage: int, name: str) -> list[float]:
        return [r["losses"][name] for r in records
                if r.get("kind") == "step" and r.get("stage") == stage
                and name in r.get("losses", {})]


@dataclass
class Corpus:
    train_instances: list
    test_instances: list
    registry: list[TaskSpec]
    metric_overrides: dict[str, str]
    unseen_hint: list[str] | None

    @classmethod
    def load(cls, corpus_dir) -> "Corpus":
        corpus_dir = Path(corpus_dir)
        train = load_instances_jsonl(corpus_dir / "train.jsonl")
        test_path = corpus_dir / "test.jsonl"
        test = load_instances_jsonl(test_path) if test_path.exists() else []
        overrides: dict[str, str] = {}
        unseen_hint = None
        sidecar = corpus_dir / "tasks.json"
        if sidecar.exists():
            extra = json.loads(sidecar.read_text(encoding="utf-8"))
            overrides = dict(extra.get("metrics", {}))
            if "unseen_task_ids" in extra:
                unseen_hint = list(extra["unseen_task_ids"])
        registry = build_registry(train, test, overrides)
        return cls(train, test, registry, overrides, unseen_hint)

    def metric_kinds(self) -> dict[str, str]:
        return {t.task_id: t.metric_kind for t in self.registry}


def curate(cfg: dict, corpus: Corpus) -> LongTailManifest:
    """Seen/unseen split plus Zipf downsampling; rank order is descending
    original size (ties by task id)."""
    data = cfg["data"]
    if corpus.unseen_hint is not None:
        unseen = list(corpus.unseen_hint)
    else:
        _, unseen = split_seen_unseen(corpus.registry, int(data["n_unseen"]),
                                      int(cfg["run"]["seed"]))
    ranked = sorted(corpus.registry,
                    key=lambda t: (-t.original_train_size, t.task_id))
    return downsample_tasks(ranked, float(data["alpha"]), int(data["head_budget"]),
                            int(cfg["run"]["seed"]), unseen_task_ids=unseen)


def make_oracle(cfg: dict):
    o = cfg["oracle"]
    if o["backend"] == "mock":
        return MockOracle(hint_max_tokens=int(o["hint_max_tokens"]))
    if o["backend"] == "remote":
        return RemoteOracle(o["endpoint"], o["model"],
                            hint_max_tokens=int(o["hint_max_tokens"]))
    raise ValueError(f"unknown oracle backend {o['backend']!r}")


class TrainingAssets:
    """Shared data plumbing: pools, vocab, BM25 pools, oracle cache."""

    def __init__(self, cfg: dict, corpus: Corpus, manifest: LongTailManifest,
                 paths: RunPaths):
        self.cfg = cfg
        self.corpus = corpus
        self.manifest = manifest
        self.paths = paths
        self.train_pool, self.val_pool = apply_manifest(manifest, corpus.train_instances)
        if not self.train_pool:
            raise ValueError("manifest selects no training instances")
        from .miner import example_text
        self.vocab = Vocab.build([example_text(e) for e in self.train_pool])
        self.query_encoder = FrozenQueryEncoder(
            dim=int(cfg["pool"]["key_dim"]), seed=int(cfg["run"]["seed"]))
        self.cache = OracleCache(make_oracle(cfg), paths.oracle_cache)
        self.bm25 = BM25Index(self.train_pool)
        self._candidates: dict[str, CandidateSet] = {}

    def candidate_set(self, inst) -> CandidateSet:
        if inst.uid not in self._candidates:
            c = int(self.cfg["miner"]["bm25_pool"])
            self._candidates[inst.uid] = bm25_candidates(inst, self.bm25, c)
        return self._candidates[inst.uid]

    def ensure_hints(self, inst, cands: CandidateSet):
        for i, (e, h) in enumerate(zip(cands.examples, cands.hints)):
            if h is None:
                cands.hints[i] = self.cache.hint(e, inst)

    def lm_probs(self, inst, cands: CandidateSet) -> np.ndarray:
        scores = np.array([self.cache.score(e, inst) for e in cands.examples])
        return stable_softmax(scores)

    def subsample(self, cands: CandidateSet, rng: np.random.Generator,
                  k: int) -> CandidateSet:
        n = len(cands.examples)
        if k >= n:
            return cands
        idx = np.sort(rng.choice(n, size=k, replace=False))
        return cands.subset(idx)

    def persist_candidates(self):
        write_candidate_cache(self.paths.candidates, self._candidates)


def build_pool(cfg: dict, seed: int) -> MetaPromptPool:
    p = cfg["pool"]
    return MetaPromptPool(
        size=int(p["size"]), select_count=int(p["select"]),
        prompt_len=int(p["prompt_len"]), d_model=int(cfg["model"]["d_model"]),
        key_dim=int(p["key_dim"]), eta=float(p["eta"]), gamma=float(p["gamma"]),
        rng=derive_rng(seed, "pool-init"))


def build_rankers(cfg: dict, vocab: Vocab, seed: int) -> tuple[Retriever, Reranker]:
    dim = int(cfg["miner"]["encoder_dim"])
    return (Retriever(vocab, dim, derive_rng(seed, "retriever-init")),
            Reranker(vocab, dim, derive_rng(seed, "reranker-init")))


def build_qa(cfg: dict, vocab: Vocab, seed: int) -> QAModel:
    m = cfg["model"]
    p = cfg["pool"]
    return QAModel(
        vocab, derive_rng(seed, "qa-init"), d_model=int(m["d_model"]),
        n_heads=int(m["n_heads"]), d_ff=int(m["d_ff"]), n_layers=int(m["n_layers"]),
        max_source_len=int(m["max_source_len"]),
        max_target_len=int(m["max_target_len"]),
        max_soft_prefix=int(p["select"]) * int(p["prompt_len"]))


# -- checkpoint io --------------------------------------------------------------


def save_checkpoint(path: Path, models: dict, optimizers: dict, meta: dict):
    arrays = {}
    for name, model in models.items():
        for i, a in enumerate(model.state_arrays()):
            arrays[f"{name}.p{i}"] = a
    opt_t = {}
    for name, opt in optimizers.items():
        opt_t[name] = opt.t
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"opt.{name}.m{i}"] = m
            arrays[f"opt.{name}.v{i}"] = v
    np.savez(path, **arrays)
    meta = dict(meta)
    meta["opt_t"] = opt_t
    Path(str(path) + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: Path) -> tuple[dict, dict]:
    data = np.load(path)
    arrays = {k: data[k] for k in data.files}
    meta = json.loads(Path(str(path) + ".meta.json").read_text(encoding="utf-8"))
    return arrays, meta


def restore_model(arrays: dict, name: str, model):
    rows = sorted((k for k in arrays if k.startswith(f"{name}.p")),
                  key=lambda k: int(k.split(".p")[1]))
    model.load_state_arrays([arrays[k] for k in rows])


def restore_optimizer(arrays: dict, meta: dict, name: str, opt: AdamW):
    ms = sorted((k for k in arrays if k.startswith(f"opt.{name}.m")),
                key=lambda k: int(k.rsplit(".m", 1)[1]))
    vs = sorted((k for k in arrays if k.startswith(f"opt.{name}.v")),
                key=lambda k: int(k.rsplit(".v", 1)[1]))
    opt.load_state_dict({"t": meta["opt_t"][name],
                         "m": [arrays[k] for k in ms],
                         "v": [arrays[k] for k in vs]})


def latest_checkpoint(paths: RunPaths, prefix: str) -> Path | None:
    best, best_epoch = None, -1
    for p in paths.checkpoints.glob(f"{prefix}*.npz"):
        try:
            epoch = int(p.stem.replace(prefix, ""))
        except ValueError:
            continue
        if epoch > best_epoch:
            best, best_epoch = p, epoch
    return best


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


# -- stage one -------------------------------------------------------------------


def held_out_kl(assets: TrainingAssets, retriever: Retriever, reranker: Reranker,
                instances) -> tuple[float, float]:
    """Mean KL(p_lm || p_r1) and KL(p_lm || p_r2) over held-out instances."""
    if not instances:
        raise ValueError("held-out set is empty")
    tot1 = tot2 = 0.0
    for inst in instances:
        cands = assets.candidate_set(inst)
        assets.ensure_hints(inst, cands)
        p_lm = assets.lm_probs(inst, cands)
        p_r1 = stable_softmax(retriever.score_examples(inst, cands.examples).data)
        p_r2 = stable_softmax(
            reranker.score_pairs(inst, cands.examples, cands.hints).data)
        tot1 += kl_divergence(p_lm, p_r1)
        tot2 += kl_divergence(p_lm, p_r2)
    return tot1 / len(instances), tot2 / len(instances)


def run_stage1(cfg: dict, corpus: Corpus, manifest: LongTailManifest,
               paths: RunPaths, resume: bool = False) -> Path:
    """Pre-train the rankers by distilling the oracle's distribution."""
    paths.prepare()
    seed = int(cfg["run"]["seed"])
    tr = cfg["train"]
    assets = TrainingAssets(cfg, corpus, manifest, paths)
    retriever, reranker = build_rankers(cfg, assets.vocab, seed)
    opt_r1 = AdamW(retriever.parameters(), lr=float(tr["learning_rate"]),
                   weight_decay=float(tr["weight_decay"]))
    opt_r2 = AdamW(reranker.parameters(), lr=float(tr["learning_rate"]),
                   weight_decay=float(tr["weight_decay"]))

    start_epoch = 0
    ckpt = latest_checkpoint(paths, STAGE1_PREFIX) if resume else None
    if ckpt is not None:
        arrays, meta = load_checkpoint(ckpt)
        restore_model(arrays, "retriever", retriever)
        restore_model(arrays, "reranker", reranker)
        restore_optimizer(arrays, meta, "r1", opt_r1)
        restore_optimizer(arrays, meta, "r2", opt_r2)
        start_epoch = int(meta["epoch"]) + 1

    log = RunLog(paths.runlog, append=start_epoch > 0)
    log.meta(stage=1, seed=seed, started=time.time(),
             n_train=len(assets.train_pool), resumed_from=start_epoch)

    val_rng = derive_rng(seed, "stage1-val")
    heldout = list(assets.val_pool)
    k = min(int(tr["val_subsample"]), len(heldout))
    if k and heldout:
        idx = np.sort(val_rng.choice(len(heldout), size=k, replace=False))
        heldout = [heldout[i] for i in idx]

    epochs = int(tr["epochs"])
    batch_size = int(tr["batch_size"])
    sub_k = int(tr["candidate_subsample"])

    if heldout and start_epoch == 0:
        kl1, kl2 = held_out_kl(assets, retriever, reranker, heldout)
        log.stage1_eval(0, kl1, kl2)

    n = len(assets.train_pool)
    for epoch in range(start_epoch, epochs):
        rng = derive_rng(seed, "stage1", epoch)
        order = rng.permutation(n)
        for step, batch in enumerate(_batches(order, batch_size)):
            total = None
            for i in batch:
                inst = assets.train_pool[int(i)]
                cands = assets.subsample(assets.candidate_set(inst), rng, sub_k)
                assets.ensure_hints(inst, cands)
                p_lm = assets.lm_probs(inst, cands)
                p_r1 = softmax_t(retriever.score_examples(inst, cands.examples))
                p_r2 = softmax_t(reranker.score_pairs(inst, cands.examples,
                                                      cands.hints))
                term = stage1_loss(p_lm, p_r1, p_r2)
                total = term if total is None else total + term
            loss = total * (1.0 / len(batch))
            opt_r1.zero_grad()
            opt_r2.zero_grad()
            loss.backward()
            opt_r1.step()
            opt_r2.step()
            log.step(1, epoch, step, {"l_lm": float(loss.data)})
        if heldout:
            kl1, kl2 = held_out_kl(assets, retriever, reranker, heldout)
            log.stage1_eval(epoch + 1, kl1, kl2)
        save_checkpoint(
            paths.checkpoints / f"{STAGE1_PREFIX}{epoch}.npz",
            {"retriever": retriever, "reranker": reranker},
            {"r1": opt_r1, "r2": opt_r2},
            {"stage": 1, "epoch": epoch, "seed": seed,
             "vocab": assets.vocab.words})
    assets.persist_candidates()
    return latest_checkpoint(paths, STAGE1_PREFIX)


# -- stage two -------------------------------------------------------------------


class Stage2System:
    """Models plus per-model optimizers for the joint stage."""

    def __init__(self, cfg: dict, assets: TrainingAssets, seed: int,
                 use_pm: bool, use_pk: bool):
        tr = cfg["train"]
        lr = float(tr["learning_rate"])
        wd = float(tr["weight_decay"])
        self.pool = build_pool(cfg, seed) if use_pm else None
        self.qa = build_qa(cfg, assets.vocab, seed)
        self.retriever, self.reranker = (build_rankers(cfg, assets.vocab, seed)
                                         if use_pk else (None, None))
        self.opt_keys = AdamW([self.pool.keys], lr=lr, weight_decay=wd) \
            if use_pm else None
        self.opt_prompts = AdamW([self.pool.prompts], lr=lr, weight_decay=wd) \
            if use_pm else None
        self.opt_qa = AdamW(self.qa.parameters(), lr=lr, weight_decay=wd)
        self.opt_r1 = AdamW(self.retriever.parameters(), lr=lr, weight_decay=wd) \
            if use_pk else None
        self.opt_r2 = AdamW(self.reranker.parameters(), lr=lr, weight_decay=wd) \
            if use_pk else None

    def models(self) -> dict:
        out = {"qa": self.qa}
        if self.pool is not None:
            out["pool"] = self.pool
        if self.retriever is not None:
            out["retriever"] = self.retriever
            out["reranker"] = self.reranker
        return out

    def optimizers(self) -> dict:
        out = {"qa": self.opt_qa}
        if self.opt_keys is not None:
            out["keys"] = self.opt_keys
            out["prompts"] = self.opt_prompts
        if self.opt_r1 is not None:
            out["r1"] = self.opt_r1
            out["r2"] = self.opt_r2
        return out


def _knowledge_prompt(cfg, assets, system, inst):
    """Training-time P_k: retriever narrows the instance's BM25 pool, hints
    come from the cache, the reranker keeps the top few."""
    cands = assets.candidate_set(inst)
    l = min(int(cfg["miner"]["retrieve"]), len(cands.examples))
    scores = system.retriever.score_examples(inst, cands.examples).data
    order = sorted(range(len(scores)),
                   key=lambda i: (-scores[i], uid_sort_key(cands.examples[i].uid)))
    sub = cands.subset(np.array(order[:l], dtype=np.int64))
    assets.ensure_hints(inst, sub)
    l_tilde = min(int(cfg["miner"]["rerank"]), len(sub.examples))
    return rerank(inst, sub, l_tilde, system.reranker)


def _prefix(system, assets, inst, trainable: bool):
    if system.pool is None:
        return None
    x = assets.query_encoder(inst.context, inst.question)
    composed = system.pool.compose(system.pool.select(x))
    return composed if trainable else composed.detach()


def run_stage2(cfg: dict, corpus: Corpus, manifest: LongTailManifest,
               paths: RunPaths, resume: bool = False) -> Path:
    """Joint training of keys, QA model, prompts, and rankers."""
    paths.prepare()
    seed = int(cfg["run"]["seed"])
    tr = cfg["train"]
    ablation = tr["ablation"]
    use_pm = ablation != "no-pm"
    use_pk = ablation != "no-pk"
    use_mkd = use_pk and ablation != "no-mkd"
    interleaved = tr["key_update_mode"] == "interleaved"

    assets = TrainingAssets(cfg, corpus, manifest, paths)
    system = Stage2System(cfg, assets, seed, use_pm, use_pk)

    start_epoch = 0
    static_board = None
    ckpt = latest_checkpoint(paths, STAGE2_PREFIX) if resume else None
    if ckpt is not None:
        arrays, meta = load_checkpoint(ckpt)
        for name, model in system.models().items():
            restore_model(arrays, name, model)
        for name, opt in system.optimizers().items():
            restore_optimizer(arrays, meta, name, opt)
        start_epoch = int(meta["epoch"]) + 1
        if meta.get("static_board") is not None:
            static_board = Scoreboard(values=meta["static_board"],
                                      evaluated_at=int(meta["static_board_epoch"]))
    elif use_pk:
        s1 = latest_checkpoint(paths, STAGE1_PREFIX)
        if s1 is None:
            raise PreconditionError(
                f"stage-one checkpoint not found under {paths.checkpoints}; "
                f"run pretrain-rankers first")
        arrays, _ = load_checkpoint(s1)
        restore_model(arrays, "retriever", system.retriever)
        restore_model(arrays, "reranker", system.reranker)

    log = RunLog(paths.runlog, append=start_epoch > 0 or paths.runlog.exists())
    log.meta(stage=2, seed=seed, started=time.time(), ablation=ablation,
             n_train=len(assets.train_pool), resumed_from=start_epoch)

    # Fixed, seeded validation subsample, identical across epochs and resumes.
    val_rng = derive_rng(seed, "stage2-val")
    val_sub = list(assets.val_pool)
    k = min(int(tr["val_subsample"]), len(val_sub))
    if k and val_sub:
        idx = np.sort(val_rng.choice(len(val_sub), size=k, replace=False))
        val_sub = [val_sub[i] for i in idx]
    if use_pk and not val_sub:
        raise ValueError("stage two needs a non-empty validation set")

    def val_candidates() -> dict[str, CandidateSet]:
        out = {}
        for inst in val_sub:
            cands = assets.candidate_set(inst)
            assets.ensure_hints(inst, cands)
            out[inst.uid] = cands
        return out

    l_tilde = int(cfg["miner"]["rerank"])
    epochs = int(tr["epochs"])
    batch_size = int(tr["batch_size"])
    sub_k = int(tr["candidate_subsample"])
    w_keys = float(tr["loss_weight_keys"])
    w_qa = float(tr["loss_weight_qa"])
    w_mkd = float(tr["loss_weight_mkd"])
    n = len(assets.train_pool)

    if ablation == "static-mkd" and use_pk and static_board is None:
        static_board = evaluate_models(
            val_sub, val_candidates(), system.retriever, system.reranker,
            system.qa, lambda i: _prefix(system, assets, i, trainable=False),
            l_tilde, epoch=0)

    for epoch in range(start_epoch, epochs):
        # (a) meta-prompt keys
        if use_pm and not interleaved:
            rng = derive_rng(seed, "s2-keys", epoch)
            for step, batch in enumerate(_batches(rng.permutation(n), batch_size)):
                total = None
                for i in batch:
                    inst = assets.train_pool[int(i)]
                    x = assets.query_encoder(inst.context, inst.question)
                    term = system.pool.key_loss(x, system.pool.select(x))
                    total = term if total is None else total + term
                loss = total * (w_keys / len(batch))
                system.opt_keys.zero_grad()
                loss.backward()
                system.opt_keys.step()
                log.step(2, epoch, step, {"l_m": float(loss.data)})

        # (b) QA model and prompts
        rng = derive_rng(seed, "s2-f", epoch)
        for step, batch in enumerate(_batches(rng.permutation(n), batch_size)):
            insts = [assets.train_pool[int(i)] for i in batch]
            if use_pm and interleaved:
                total = None
                for inst in insts:
                    x = assets.query_encoder(inst.context, inst.question)
                    term = system.pool.key_loss(x, system.pool.select(x))
                    total = term if total is None else total + term
                loss_m = total * (w_keys / len(insts))
                system.opt_keys.zero_grad()
                loss_m.backward()
                system.opt_keys.step()
                log.step(2, epoch, step, {"l_m": float(loss_m.data)})
            prefixes = [_prefix(system, assets, inst, trainable=True)
                        for inst in insts] if use_pm else None
            kps = [_knowledge_prompt(cfg, assets, system, inst)
                   for inst in insts] if use_pk else None
            loss = system.qa.qa_loss(insts, prefixes, kps) * w_qa
            system.opt_qa.zero_grad()
            if use_pm:
                system.opt_prompts.zero_grad()
            loss.backward()
            system.opt_qa.step()
            if use_pm:
                system.opt_prompts.step()
            log.step(2, epoch, step, {"l_f": float(loss.data)})

        # (c) scoreboard
        board = None
        if use_pk:
            board = evaluate_models(
                val_sub, val_candidates(), system.retriever, system.reranker,
                system.qa, lambda i: _prefix(system, assets, i, trainable=False),
                l_tilde, epoch=epoch)
            gating = static_board if ablation == "static-mkd" else board
            edges = ([("f", "r1"), ("f", "r2")] if ablation == "back-kd"
                     else kd_edges(gating))
            log.scoreboard(board, edges)
            with open(paths.scoreboard_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({
                    "epoch": epoch, "v_r1": board.values["r1"],
                    "v_r2": board.values["r2"], "v_f": board.values["f"],
                    "active_edges": [list(e) for e in edges]},
                    sort_keys=True) + "\n")

        # (d) adaptive mutual KD
        if use_mkd and board is not None:
            if ablation == "back-kd":
                edges_override = [("f", "r1"), ("f", "r2")]
            elif ablation == "static-mkd":
                edges_override = kd_edges(static_board)
            else:
                edges_override = None
            active = edges_override if edges_override is not None else kd_edges(board)
            if active:
                rng = derive_rng(seed, "s2-mkd", epoch)
                for step, batch in enumerate(_batches(rng.permutation(n),
                                                      batch_size)):
                    total = None
                    for i in batch:
                        inst = assets.train_pool[int(i)]
                        sub = assets.subsample(assets.candidate_set(inst), rng,
                                               sub_k)
                        assets.ensure_hints(inst, sub)
                        p_r1 = softmax_t(
                            system.retriever.score_examples(inst, sub.examples))
                        p_r2 = softmax_t(system.reranker.score_pairs(
                            inst, sub.examples, sub.hints))
                        prefix = (_prefix(system, assets, inst, trainable=True)
                                  if use_pm else None)
                        p_f, _ = system.qa.qa_candidate_distribution(
                            inst, sub, prefix)
                        term = mutual_kd_loss(p_r1, p_r2, p_f, board, epoch,
                                              edges=edges_override)
                        total = term if total is None else total + term
                    loss = total * (w_mkd / len(batch))
                    for opt in (system.opt_r1, system.opt_r2, system.opt_qa,
                                system.opt_prompts):
                        if opt is not None:
                            opt.zero_grad()
                    loss.backward()
                    for opt in (system.opt_r1, system.opt_r2, system.opt_qa,
                                system.opt_prompts):
                        if opt is not None:
                            opt.step()
                    log.step(2, epoch, step, {"l_mkd": float(loss.data)})

        meta = {"stage": 2, "epoch": epoch, "seed": seed, "ablation": ablation,
                "vocab": assets.vocab.words,
                "pool_hash": system.pool.content_hash() if use_pm else "",
                "scoreboard": board.values if board else None,
                "scoreboard_epoch": board.evaluated_at if board else None,
                "static_board": static_board.values if static_board else None,
                "static_board_epoch":
                    static_board.evaluated_at if static_board else None}
        save_checkpoint(paths.checkpoints / f"{STAGE2_PREFIX}{epoch}.npz",
                        system.models(), system.optimizers(), meta)
    assets.persist_candidates()
    return latest_checkpoint(paths, STAGE2_PREFIX)


# -- evaluation ---------------------------------------------------------------------


def evaluate_suite(cfg: dict, corpus: Corpus, manifest: LongTailManifest,
                   paths: RunPaths,
                   checkpoint: Path | None = None) -> ScoreSummary:
    """Predict on every test instance, score per task, aggregate, export."""
    paths.prepare()
    ckpt = checkpoint or latest_checkpoint(paths, STAGE2_PREFIX)
    if ckpt is None:
        raise PreconditionError(f"no stage-two checkpoint under {paths.checkpoints}")
    arrays, meta = load_checkpoint(ckpt)
    ablation = cfg["train"]["ablation"]
    use_pm = ablation != "no-pm" and any(k.startswith("pool.") for k in arrays)
    use_pk = ablation != "no-pk" and any(k.startswith("retriever.") for k in arrays)

    assets = TrainingAssets(cfg, corpus, manifest, paths)
    vocab = Vocab(list(meta["vocab"])[len(Vocab.SPECIALS):])
    assets.vocab = vocab
    system = Stage2System(cfg, assets, int(meta["seed"]), use_pm, use_pk)
    for name, model in system.models().items():
        restore_model(arrays, name, model)
    if use_pm:
        found = system.pool.content_hash()
        if found != meta.get("pool_hash"):
            raise ValueError(
                "prompt-pool hash mismatch: checkpoint metadata declares "
                f"{meta.get('pool_hash')!r} but the loaded pool hashes to "
                f"{found!r}; refusing to evaluate a mismatched pool/model pair")

    pool_enc = (system.retriever.encode_pool(assets.train_pool)
                if use_pk else None)
    l = int(cfg["miner"]["retrieve"])
    l_tilde = int(cfg["miner"]["rerank"])
    per_task_scores: dict[str, list[float]] = {}
    metric_kinds = corpus.metric_kinds()
    predictions = []
    for inst in corpus.test_instances:
        prefix = _prefix(system, assets, inst, trainable=False) if use_pm else None
        kp = EMPTY_KNOWLEDGE
        if use_pk:
            l_eff = min(l, len(assets.train_pool) - 1)
            cands = retrieve(inst, assets.train_pool, l_eff, system.retriever,
                             pool_encodings=pool_enc)
            assets.ensure_hints(inst, cands)
            kp = rerank(inst, cands, min(l_tilde, l_eff), system.reranker)
        pred = system.qa.predict(inst, prefix, kp)
        score = score_prediction(metric_kinds[inst.task_id], pred, inst.answer,
                                 inst.options)
        per_task_scores.setdefault(inst.task_id, []).append(score)
        predictions.append({"uid": inst.uid, "prediction": pred,
                            "gold": inst.answer, "score": score})
    per_task = {t: 100.0 * float(np.mean(v)) for t, v in per_task_scores.items()}
    summary = aggregate(per_task, manifest, int(cfg["metrics"]["head_m"]),
                        int(cfg["metrics"]["tail_n"]))
    write_score_csv(paths.reports / "scores.csv", summary, manifest, metric_kinds)
    with open(paths.reports / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for rec in predictions:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if use_pm:
        task_ids, matrix = system.pool.selection_frequency(
            corpus.test_instances, assets.query_encoder)
        with open(paths.reports / "prompt_heatmap.csv", "w", encoding="utf-8") as fh:
            fh.write("task_id," + ",".join(
                f"p{i}" for i in range(system.pool.size)) + "\n")
            for tid, row in zip(task_ids, matrix):
                fh.write(tid + "," + ",".join(str(int(x)) for x in row) + "\n")
    return summary


def write_run_config(cfg: dict, paths: RunPaths):
    paths.prepare()
    paths.config_snapshot.write_text(resolved_json(cfg), encoding="utf-8")
