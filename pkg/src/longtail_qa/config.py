"""Run configuration: TOML file over defaults, dotted-path overrides.

Defaults carry the reference hyperparameters: pool of 30 prompts with 5
selected, margins 0.15/0.3, prompt length 10, candidate pool 512, retrieve
64, rerank 4, AdamW at 1e-4, batch 32, five epochs.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import tomli

ABLATIONS = ("none", "no-pm", "no-pk", "no-mkd", "static-mkd", "back-kd")

DEFAULTS: dict = {
    "run": {
        "seed": 42,
        "out_dir": "runs/default",
    },
    "data": {
        "corpus_dir": "data",
        "alpha": 2.0,
        "head_budget": 1000,
        "n_unseen": 22,
    },
    "pool": {
        "size": 30,
        "select": 5,
        "prompt_len": 10,
        "eta": 0.15,
        "gamma": 0.3,
        "key_dim": 64,
    },
    "miner": {
        "bm25_pool": 512,
        "retrieve": 64,
        "rerank": 4,
        "encoder_dim": 64,
    },
    "oracle": {
        "backend": "mock",
        "endpoint": "",
        "model": "",
        "hint_max_tokens": 32,
    },
    "model": {
        "d_model": 64,
        "n_heads": 4,
        "d_ff": 128,
        "n_layers": 2,
        "max_source_len": 96,
        "max_target_len": 8,
    },
    "train": {
        "epochs": 5,
        "batch_size": 32,
        "learning_rate": 1e-4,
        "weight_decay": 0.0,
        "candidate_subsample": 64,
        "loss_weight_keys": 1.0,
        "loss_weight_qa": 1.0,
        "loss_weight_mkd": 1.0,
        "key_update_mode": "sequential",   # or "interleaved"
        "val_subsample": 256,
        "ablation": "none",
    },
    "metrics": {
        "head_m": 3,
        "tail_n": 4,
    },
    "sweep": {
        "alphas": [1.0, 2.0, 3.0],
        "unseen_counts": [],
    },
}

ENV_ORACLE_ENDPOINT = "LTQA_ORACLE_ENDPOINT"


def _merge(base: dict, extra: dict, path: str = ""):
    for key, val in extra.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ValueError(f"config key {here} must be a table")
            _merge(base[key], val, here)
        else:
            base[key] = val


def load_config(path: str | Path | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "rb") as fh:
            _merge(cfg, tomli.load(fh))
    endpoint = os.environ.get(ENV_ORACLE_ENDPOINT)
    if endpoint:
        cfg["oracle"]["endpoint"] = endpoint
    validate_config(cfg)
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply repeatable --override section.key=value pairs in place."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ValueError(f"override names unknown config key: {dotted}")
            node = node[p]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node or isinstance(node[leaf], dict):
            raise ValueError(f"override names unknown config key: {dotted}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[leaf] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    if cfg["train"]["ablation"] not in ABLATIONS:
        raise ValueError(f"unknown ablation {cfg['train']['ablation']!r}; "
                         f"choose from {', '.join(ABLATIONS)}")
    if cfg["train"]["key_update_mode"] not in ("sequential", "interleaved"):
        raise ValueError("key_update_mode must be sequential or interleaved")
    if cfg["pool"]["select"] > cfg["pool"]["size"]:
        raise ValueError("pool.select cannot exceed pool.size")
    if cfg["train"]["candidate_subsample"] > cfg["miner"]["bm25_pool"]:
        raise ValueError("candidate_subsample cannot exceed miner.bm25_pool")
    if cfg["miner"]["rerank"] >= cfg["miner"]["retrieve"]:
        raise ValueError("miner.rerank must be smaller than miner.retrieve")
    if cfg["train"]["epochs"] < 1:
        raise ValueError("train.epochs must be at least 1")


def resolved_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True)


def save_resolved(cfg: dict, path):
    Path(path).write_text(resolved_json(cfg), encoding="utf-8")
