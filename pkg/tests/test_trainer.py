import json

import numpy as np
import pytest

from longtail_qa.config import load_config
from longtail_qa.miner import example_text
from longtail_qa.nn import AdamW
from longtail_qa.synth import TaskPlan, generate_corpus
from longtail_qa.tasks import LongTailManifest
from longtail_qa.trainer import (Corpus, RunLog, RunPaths, build_qa, curate,
                                 derive_rng, evaluate_suite, latest_checkpoint,
                                 run_stage1, run_stage2)
from longtail_qa.errors import PreconditionError


def tiny_cfg(out_dir, corpus_dir, seed=7, epochs=2):
    cfg = load_config(None)
    cfg["run"]["seed"] = seed
    cfg["run"]["out_dir"] = str(out_dir)
    cfg["data"]["corpus_dir"] = str(corpus_dir)
    cfg["data"]["alpha"] = 1.2
    cfg["data"]["head_budget"] = 24
    cfg["pool"].update(size=6, select=2, prompt_len=2, key_dim=16)
    cfg["miner"].update(bm25_pool=12, retrieve=8, rerank=2, encoder_dim=16)
    cfg["model"].update(d_model=16, n_heads=2, d_ff=32, n_layers=1,
                        max_source_len=48, max_target_len=4)
    cfg["train"].update(epochs=epochs, batch_size=8, learning_rate=3e-3,
                        candidate_subsample=6, val_subsample=10)
    cfg["metrics"].update(head_m=1, tail_n=2)
    return cfg


def tiny_corpus(tmp_path, seed=3):
    plans = [
        TaskPlan("ex-a", "extract", cluster=0, n_train=30, n_test=4),
        TaskPlan("ex-b", "extract", cluster=1, n_train=22, n_test=4),
        TaskPlan("code-a", "code", n_train=16, n_test=4),
        TaskPlan("code-b", "code", n_train=14, n_test=4),
        TaskPlan("un-a", "extract", cluster=0, n_test=4, unseen=True),
    ]
    corpus_dir = tmp_path / "corpus"
    generate_corpus(corpus_dir, plans, seed)
    return corpus_dir


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer")
    corpus_dir = tiny_corpus(root)
    corpus = Corpus.load(corpus_dir)
    return root, corpus_dir, corpus


def test_curate_respects_unseen_hint_and_is_reproducible(workspace):
    root, corpus_dir, corpus = workspace
    cfg = tiny_cfg(root / "r0", corpus_dir)
    m1 = curate(cfg, corpus)
    m2 = curate(cfg, corpus)
    assert m1.to_json() == m2.to_json()
    assert m1.unseen_task_ids == ["un-a"]
    assert m1.seen_task_ids[0] == "ex-a"          # largest original ranks first
    sizes = [m1.sampled_train_sizes[t] for t in m1.seen_task_ids]
    assert sizes == sorted(sizes, reverse=True)
    assert sum(sizes) > 0


def test_stage1_runs_logs_and_checkpoints(workspace):
    root, corpus_dir, corpus = workspace
    cfg = tiny_cfg(root / "r1", corpus_dir, epochs=2)
    paths = RunPaths(root / "r1").prepare()
    manifest = curate(cfg, corpus)
    manifest.save(paths.manifest)
    ckpt = run_stage1(cfg, corpus, manifest, paths)
    assert ckpt is not None and ckpt.exists()
    records = RunLog.read(paths.runlog)
    steps = RunLog.loss_sequence(records, 1, "l_lm")
    assert len(steps) > 0 and all(np.isfinite(s) for s in steps)
    evals = [r for r in records if r["kind"] == "stage1_eval"]
    assert [e["epoch"] for e in evals] == [0, 1, 2]
    assert paths.candidates.exists()
    # distillation should visibly reduce the held-out KL on this planted corpus
    assert evals[-1]["kl_r1"] < evals[0]["kl_r1"]


def test_stage1_deterministic_across_runs(workspace):
    root, corpus_dir, corpus = workspace
    traces = []
    for name in ("d1", "d2"):
        cfg = tiny_cfg(root / name, corpus_dir, epochs=1)
        paths = RunPaths(root / name).prepare()
        manifest = curate(cfg, corpus)
        manifest.save(paths.manifest)
        run_stage1(cfg, corpus, manifest, paths)
        traces.append(RunLog.loss_sequence(RunLog.read(paths.runlog), 1, "l_lm"))
    assert traces[0] == traces[1]


def test_zero_epoch_stage1_leaves_models_at_init(workspace):
    root, corpus_dir, corpus = workspace
    cfg = tiny_cfg(root / "z0", corpus_dir)
    cfg["train"]["epochs"] = 0
    paths = RunPaths(root / "z0").prepare()
    manifest = curate(cfg, corpus)
    manifest.save(paths.manifest)
    assert run_stage1(cfg, corpus, manifest, paths) is None
    assert latest_checkpoint(paths, "stage1_epoch") is None
    # initialization itself is deterministic given the seed
    qa1 = build_qa(cfg, __import__("longtail_qa.text", fromlist=["Vocab"]).Vocab(
        ["w"]), seed=7)
    qa2 = build_qa(cfg, __import__("longtail_qa.text", fromlist=["Vocab"]).Vocab(
        ["w"]), seed=7)
    for a, b in zip(qa1.state_arrays(), qa2.state_arrays()):
        np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def full_run(workspace):
    root, corpus_dir, corpus = workspace
    cfg = tiny_cfg(root / "full", corpus_dir, epochs=2)
    paths = RunPaths(root / "full").prepare()
    manifest = curate(cfg, corpus)
    manifest.save(paths.manifest)
    run_stage1(cfg, corpus, manifest, paths)
    run_stage2(cfg, corpus, manifest, paths)
    return cfg, paths, manifest, corpus


def test_stage2_logs_all_losses_and_scoreboards(full_run):
    cfg, paths, manifest, corpus = full_run
    records = RunLog.read(paths.runlog)
    for name in ("l_m", "l_f"):
        assert RunLog.loss_sequence(records, 2, name), f"missing {name}"
    boards = [r for r in records if r["kind"] == "scoreboard"]
    assert [b["epoch"] for b in boards] == [0, 1]   # one per stage-two epoch
    for b in boards:
        assert b["v_r1"] <= 0 and b["v_r2"] <= 0 and b["v_f"] <= 0
    assert paths.scoreboard_log.exists()
    lines = paths.scoreboard_log.read_text().strip().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "v_r1", "v_r2", "v_f", "active_edges"}


def test_stage2_requires_stage1(workspace):
    root, corpus_dir, corpus = workspace
    cfg = tiny_cfg(root / "nostage1", corpus_dir, epochs=1)
    paths = RunPaths(root / "nostage1").prepare()
    manifest = curate(cfg, corpus)
    manifest.save(paths.manifest)
    with pytest.raises(PreconditionError, match="stage-one"):
        run_stage2(cfg, corpus, manifest, paths)


def test_evaluate_suite_covers_all_tasks_and_exports(full_run):
    cfg, paths, manifest, corpus = full_run
    summary = evaluate_suite(cfg, corpus, manifest, paths)
    assert set(summary.per_task) == set(manifest.all_task_ids())
    assert (paths.reports / "scores.csv").exists()
    assert (paths.reports / "predictions.jsonl").exists()
    heat = (paths.reports / "prompt_heatmap.csv").read_text().splitlines()
    assert heat[0].startswith("task_id,p0")
    # each row sums to instances * select_count
    per_task_counts = {}
    for inst in corpus.test_instances:
        per_task_counts[inst.task_id] = per_task_counts.get(inst.task_id, 0) + 1
    for line in heat[1:]:
        cells = line.split(",")
        assert sum(map(int, cells[1:])) == \
            per_task_counts[cells[0]] * cfg["pool"]["select"]


def test_evaluate_refuses_tampered_pool_hash(full_run):
    cfg, paths, manifest, corpus = full_run
    ckpt = latest_checkpoint(paths, "stage2_epoch")
    meta_path = str(ckpt) + ".meta.json"
    meta = json.loads(open(meta_path).read())
    original = meta["pool_hash"]
    meta["pool_hash"] = "tampered"
    with open(meta_path, "w") as fh:
        json.dump(meta, fh)
    try:
        with pytest.raises(ValueError, match="pool hash mismatch|hash mismatch"):
            evaluate_suite(cfg, corpus, manifest, paths)
    finally:
        meta["pool_hash"] = original
        with open(meta_path, "w") as fh:
            json.dump(meta, fh)


def test_resume_matches_uninterrupted_run(workspace):
    root, corpus_dir, corpus = workspace

    def scoreboards(paths):
        return [r for r in RunLog.read(paths.runlog) if r["kind"] == "scoreboard"]

    # uninterrupted three epochs
    cfg_a = tiny_cfg(root / "resA", corpus_dir, epochs=3)
    paths_a = RunPaths(root / "resA").prepare()
    manifest = curate(cfg_a, corpus)
    manifest.save(paths_a.manifest)
    run_stage1(cfg_a, corpus, manifest, paths_a)
    run_stage2(cfg_a, corpus, manifest, paths_a)

    # same seed and identical stage one; stop stage two after two epochs,
    # then resume for the third
    cfg_b = tiny_cfg(root / "resB", corpus_dir, epochs=3)
    paths_b = RunPaths(root / "resB").prepare()
    manifest.save(paths_b.manifest)
    run_stage1(cfg_b, corpus, manifest, paths_b)
    cfg_b["train"]["epochs"] = 2
    run_stage2(cfg_b, corpus, manifest, paths_b)
    cfg_b["train"]["epochs"] = 3
    run_stage2(cfg_b, corpus, manifest, paths_b, resume=True)

    a, b = scoreboards(paths_a), scoreboards(paths_b)
    assert len(a) == 3 and len(b) == 3
    for key in ("v_r1", "v_r2", "v_f"):
        assert a[2][key] == pytest.approx(b[2][key], abs=1e-6)
    # loss sequences of the final epoch agree bitwise
    la = [r for r in RunLog.read(paths_a.runlog)
          if r.get("kind") == "step" and r.get("epoch") == 2]
    lb = [r for r in RunLog.read(paths_b.runlog)
          if r.get("kind") == "step" and r.get("epoch") == 2]
    assert [r["losses"] for r in la] == [r["losses"] for r in lb]


def test_stage1_resume_is_idempotent_when_complete(workspace):
    root, corpus_dir, corpus = workspace
    cfg = tiny_cfg(root / "idem", corpus_dir, epochs=1)
    paths = RunPaths(root / "idem").prepare()
    manifest = curate(cfg, corpus)
    manifest.save(paths.manifest)
    run_stage1(cfg, corpus, manifest, paths)
    trace1 = RunLog.loss_sequence(RunLog.read(paths.runlog), 1, "l_lm")
    run_stage1(cfg, corpus, manifest, paths, resume=True)   # nothing left to do
    trace2 = RunLog.loss_sequence(RunLog.read(paths.runlog), 1, "l_lm")
    assert trace1 == trace2


def test_no_pk_stage2_matches_hand_rolled_loop(workspace):
    """Knowledge mining off: stage two is key updates plus plain prompt-tuned
    fine-tuning; an inline loop with the same seeds reproduces it bitwise."""
    root, corpus_dir, corpus = workspace
    cfg = tiny_cfg(root / "plain", corpus_dir, epochs=1)
    cfg["train"]["ablation"] = "no-pk"
    paths = RunPaths(root / "plain").prepare()
    manifest = curate(cfg, corpus)
    manifest.save(paths.manifest)
    ckpt = run_stage2(cfg, corpus, manifest, paths)
    arrays, _meta = __import__(
        "longtail_qa.trainer", fromlist=["load_checkpoint"]
    ).load_checkpoint(ckpt)

    from longtail_qa.trainer import (Stage2System, TrainingAssets, _batches,
                                     _prefix)
    seed = cfg["run"]["seed"]
    assets = TrainingAssets(cfg, corpus, manifest, RunPaths(root / "plain-manual"))
    system = Stage2System(cfg, assets, seed, use_pm=True, use_pk=False)
    n = len(assets.train_pool)
    bs = cfg["train"]["batch_size"]
    # phase (a): key updates
    rng = derive_rng(seed, "s2-keys", 0)
    for batch in _batches(rng.permutation(n), bs):
        total = None
        for i in batch:
            inst = assets.train_pool[int(i)]
            x = assets.query_encoder(inst.context, inst.question)
            term = system.pool.key_loss(x, system.pool.select(x))
            total = term if total is None else total + term
        loss = total * (1.0 / len(batch))
        system.opt_keys.zero_grad()
        loss.backward()
        system.opt_keys.step()
    # phase (b): qa model + prompts, no knowledge prompts
    rng = derive_rng(seed, "s2-f", 0)
    for batch in _batches(rng.permutation(n), bs):
        insts = [assets.train_pool[int(i)] for i in batch]
        prefixes = [_prefix(system, assets, inst, trainable=True)
                    for inst in insts]
        loss = system.qa.qa_loss(insts, prefixes, None)
        system.opt_qa.zero_grad()
        system.opt_prompts.zero_grad()
        loss.backward()
        system.opt_qa.step()
        system.opt_prompts.step()

    trained = {f"qa.p{i}": a for i, a in enumerate(system.qa.state_arrays())}
    trained.update({f"pool.p{i}": a
                    for i, a in enumerate(system.pool.state_arrays())})
    for key, manual in trained.items():
        np.testing.assert_array_equal(arrays[key], manual,
                                      err_msg=f"mismatch in {key}")
