import json
import os
from pathlib import Path

import pytest

from longtail_qa import cli
from longtail_qa.config import (ENV_ORACLE_ENDPOINT, apply_overrides,
                                load_config)
from longtail_qa.synth import TaskPlan, generate_corpus

from test_trainer import tiny_corpus

TINY_TOML = """
[run]
seed = 11

[data]
alpha = 1.2
head_budget = 24

[pool]
size = 6
select = 2
prompt_len = 2
key_dim = 16

[miner]
bm25_pool = 12
retrieve = 8
rerank = 2
encoder_dim = 16

[model]
d_model = 16
n_heads = 2
d_ff = 32
n_layers = 1
max_source_len = 48
max_target_len = 4

[train]
epochs = 1
batch_size = 8
learning_rate = 3e-3
candidate_subsample = 6
val_subsample = 8

[metrics]
head_m = 1
tail_n = 2
"""


def test_defaults_carry_reference_hyperparameters():
    cfg = load_config(None)
    assert cfg["pool"]["size"] == 30
    assert cfg["pool"]["select"] == 5
    assert cfg["pool"]["eta"] == 0.15
    assert cfg["pool"]["gamma"] == 0.3
    assert cfg["pool"]["prompt_len"] == 10
    assert cfg["miner"]["bm25_pool"] == 512
    assert cfg["miner"]["retrieve"] == 64
    assert cfg["miner"]["rerank"] == 4
    assert cfg["train"]["learning_rate"] == 1e-4
    assert cfg["train"]["batch_size"] == 32
    assert cfg["train"]["epochs"] == 5
    assert cfg["train"]["val_subsample"] == 256
    assert cfg["data"]["alpha"] == 2.0
    assert cfg["data"]["n_unseen"] == 22
    assert cfg["metrics"]["head_m"] == 3 and cfg["metrics"]["tail_n"] == 4


def test_config_file_and_unknown_keys(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    cfg = load_config(path)
    assert cfg["pool"]["size"] == 6
    assert cfg["train"]["epochs"] == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[nope]\nx = 1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(bad)


def test_overrides_parse_types_and_reject_unknown():
    cfg = load_config(None)
    apply_overrides(cfg, ["train.epochs=9", "data.alpha=3.5",
                          "oracle.backend=\"mock\"",
                          "train.key_update_mode=interleaved"])
    assert cfg["train"]["epochs"] == 9
    assert cfg["data"]["alpha"] == 3.5
    assert cfg["train"]["key_update_mode"] == "interleaved"
    with pytest.raises(ValueError, match="unknown config key"):
        apply_overrides(cfg, ["train.nonexistent=1"])
    with pytest.raises(ValueError, match="key=value"):
        apply_overrides(cfg, ["oops"])


def test_validation_rules():
    cfg = load_config(None)
    with pytest.raises(ValueError, match="ablation"):
        apply_overrides(cfg, ["train.ablation=bogus"])
    cfg = load_config(None)
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["pool.select=99"])
    cfg = load_config(None)
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["train.candidate_subsample=9999"])


def test_env_var_sets_oracle_endpoint(monkeypatch):
    monkeypatch.setenv(ENV_ORACLE_ENDPOINT, "http://example.test:9")
    cfg = load_config(None)
    assert cfg["oracle"]["endpoint"] == "http://example.test:9"


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus_dir = tiny_corpus(root, seed=5)
    cfg_path = root / "cfg.toml"
    cfg_path.write_text(TINY_TOML, encoding="utf-8")
    return root, corpus_dir, cfg_path


def _run(args):
    return cli.main(args)


def test_cli_unknown_verb_exits_1(capsys):
    assert _run(["frobnicate"]) == 1


def test_cli_missing_config_file_exits_1(tmp_path):
    assert _run(["curate", "--config", str(tmp_path / "nope.toml"),
                 "--out", str(tmp_path / "o")]) == 1


def test_cli_bad_override_exits_1(cli_workspace, tmp_path):
    root, corpus_dir, cfg_path = cli_workspace
    code = _run(["curate", "--config", str(cfg_path),
                 "--out", str(tmp_path / "o"),
                 "--override", f"data.corpus_dir={corpus_dir}",
                 "--override", "bad.key=1"])
    assert code == 1


def test_cli_curate_is_byte_identical(cli_workspace, tmp_path):
    root, corpus_dir, cfg_path = cli_workspace
    out1, out2 = tmp_path / "c1", tmp_path / "c2"
    for out in (out1, out2):
        code = _run(["curate", "--config", str(cfg_path), "--out", str(out),
                     "--override", f"data.corpus_dir={corpus_dir}"])
        assert code == 0
    m1 = (out1 / "manifest.json").read_bytes()
    m2 = (out2 / "manifest.json").read_bytes()
    assert m1 == m2
    report = (out1 / "reports" / "curation.csv").read_text(encoding="utf-8")
    assert report.splitlines()[0].startswith("# alpha=1.2")
    assert (out1 / "reports" / "curation.csv").read_bytes() == \
        (out2 / "reports" / "curation.csv").read_bytes()


@pytest.fixture(scope="module")
def cli_full_run(cli_workspace, tmp_path_factory):
    root, corpus_dir, cfg_path = cli_workspace
    out = tmp_path_factory.mktemp("cli-run")
    common = ["--config", str(cfg_path), "--out", str(out),
              "--override", f"data.corpus_dir={corpus_dir}"]
    assert _run(["curate", *common]) == 0
    assert _run(["pretrain-rankers", *common]) == 0
    assert _run(["train", *common]) == 0
    assert _run(["eval", *common]) == 0
    return out


def test_cli_full_pipeline_outputs(cli_full_run):
    out = cli_full_run
    assert (out / "checkpoints").glob("stage2_epoch*.npz")
    summary = json.loads((out / "reports" / "summary.json").read_text())
    assert set(summary) >= {"a_seen", "a_unseen", "head_at_m", "tail_at_n"}
    assert (out / "reports" / "scores.csv").exists()
    assert (out / "reports" / "prompt_heatmap.csv").exists()


def test_cli_report_bundle_and_gaps(cli_full_run, tmp_path):
    out = cli_full_run
    assert _run(["report", "--out", str(out)]) == 0
    assert (out / "reports" / "scoreboard_curve.csv").exists()
    assert (out / "reports" / "losses_stage2.csv").exists()

    empty = tmp_path / "emptyrun"
    empty.mkdir()
    assert _run(["report", "--out", str(empty)]) == 0
    gaps = (empty / "reports" / "gaps.txt").read_text()
    assert "run log missing" in gaps


def test_cli_eval_without_training_exits_2(cli_workspace, tmp_path):
    root, corpus_dir, cfg_path = cli_workspace
    out = tmp_path / "notrain"
    code = _run(["eval", "--config", str(cfg_path), "--out", str(out),
                 "--override", f"data.corpus_dir={corpus_dir}"])
    assert code == 2


def test_cli_ablation_flag_runs_without_code_edits(cli_workspace,
                                                   tmp_path_factory):
    root, corpus_dir, cfg_path = cli_workspace
    out = tmp_path_factory.mktemp("cli-abl")
    common = ["--config", str(cfg_path), "--out", str(out),
              "--override", f"data.corpus_dir={corpus_dir}",
              "--ablation", "no-pk"]
    assert _run(["curate", *common]) == 0
    assert _run(["train", *common]) == 0
    assert _run(["eval", *common]) == 0
    summary = json.loads((out / "reports" / "summary.json").read_text())
    assert len(summary["per_task"]) == 5      # no tasks go missing


def test_cli_sweep_emits_per_cell_summaries(cli_workspace, tmp_path_factory):
    root, corpus_dir, cfg_path = cli_workspace
    out = tmp_path_factory.mktemp("cli-sweep")
    code = _run(["sweep", "--config", str(cfg_path), "--out", str(out),
                 "--override", f"data.corpus_dir={corpus_dir}",
                 "--override", "sweep.alphas=[1.0, 2.0]",
                 "--override", "train.val_subsample=6"])
    assert code == 0
    cells = sorted(p.name for p in (out / "sweep").iterdir())
    assert len(cells) == 2
    for cell in cells:
        assert (out / "sweep" / cell / "reports" / "summary.json").exists()
    grid = (out / "sweep_grid.csv").read_text().splitlines()
    assert len(grid) == 3                     # header + 2 cells
