"""Run configuration: nested defaults, dotted-key overrides, digests."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key or malformed override; message names the offender."""


DEFAULTS: dict = {
    "seed": 1,
    "data": {
        "noise_sigma": 0.03,
        "pool": 16384,
        "per_class": 384,
        "jitter": 0.02,
    },
    "head": {
        "method": "energy",
        "width": 256,
        "depth": 3,
        "context_dim": 16,
        "noise_dim": 2,
        "wiring": "noise_as_input",
        "m": 2,
        "t_diff": 100,
    },
    "train": {
        "steps": 1400,
        "batch": 128,
        "lr": 1e-3,
        "warmup": 200,
        "weight_decay": 0.0,
    },
    "mar": {
        "seq_len": 16,
        "hidden_dim": 64,
        "n_blocks": 4,
        "n_heads": 4,
        "head_kind": "energy",
        "head_width": 128,
        "head_depth": 3,
        "m": 2,
        "wiring": "noise_as_input",
        "mask_lo": 0.70,
        "mask_hi": 1.00,
        "p_drop": 0.10,
    },
    "mar_train": {
        "steps": 700,
        "batch": 32,
        "lr": 1e-3,
        "warmup": 100,
        "weight_decay": 0.0,
        "lambda": 0.0,
        "frozen_backbone": False,
        "init_from_teacher": False,
    },
    "decode": {
        "iterations": 8,
        "cfg_scale": 4.0,
        "schedule": "cosine",
        "n_seq": 48,
        "guided": True,
    },
    "metrics": {
        "n": 2048,
        "bandwidth": "median",
    },
    "compare": {
        "seeds": [1, 2, 3, 4, 5],
        "sample_n": 2048,
        "multi_steps": [4, 100],
        "steps_by_method": {
            "energy": 1400, "diffusion": 1400, "flow": 1400,
            "shortcut": 1700, "meanflow": 2100,
        },
    },
    "sweep": {
        "seeds": [1, 2, 3, 4, 5],
        "eval_per_class": 40,
    },
}


def _walk_assign(tree: dict, defaults: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node, ref = tree, defaults
    for key in parts[:-1]:
        if not isinstance(ref, dict) or key not in ref:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node.setdefault(key, {})
        ref = ref[key]
    leaf = parts[-1]
    if not isinstance(ref, dict) or leaf not in ref:
        raise ConfigError(f"unknown config key {dotted!r}")
    if isinstance(ref[leaf], dict) and not isinstance(value, dict):
        raise ConfigError(f"config key {dotted!r} expects a table")
    node[leaf] = value


def _merge_checked(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge_checked(base[key], value, dotted + ".")
        else:
            base[key] = value


def parse_override(text: str) -> tuple[str, object]:
    """'a.b=value' with the value parsed as JSON, falling back to a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(overrides: list[str] | None = None,
                   config_file: str | None = None) -> dict:
    """Defaults <- file <- --set overrides; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_file:
        loaded = json.loads(Path(config_file).read_text())
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_file}: top level must be an object")
        _merge_checked(cfg, loaded)
    for text in overrides or []:
        key, value = parse_override(text)
        _walk_assign(cfg, DEFAULTS, key, value)
    return cfg


def config_digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_run_config(out_dir, cfg: dict) -> str:
    """Persists the resolved config + digest into a run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg)
    (out / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    (out / "config.digest").write_text(digest + "\n")
    return digest
