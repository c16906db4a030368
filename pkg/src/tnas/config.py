"""Flat ``key = value`` run configuration with strict validation.

Unknown keys are errors (ablation hygiene: a typo must not silently fall
back to a default). Every key has a default; the exhaustive list below is
the contract. Types: int, float, bool (true/false), str.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields

from .engine import EngineError, SearchConfig

__all__ = ["ConfigError", "parse_config", "load_config", "resolve", "config_hash", "dump_config", "KEY_TABLE"]


class ConfigError(ValueError):
    """Bad configuration file: unknown keys, bad types, bad values."""


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (python type, help)
KEY_TABLE = {
    "data_count": (int, "number of synthetic training images"),
    "holdout_count": (int, "held-out images for validation PSNR"),
    "image_h": (int, "high-resolution image height"),
    "image_w": (int, "high-resolution image width"),
    "scale": (int, "super-resolution upscaling factor"),
    "blocks": (int, "residual blocks in the supernet chain"),
    "cells_per_block": (int, "searchable cells inside each block"),
    "base_width": (int, "full channel width of every cell"),
    "t1": (int, "pretrain epochs"),
    "t2": (int, "search epochs"),
    "t3": (int, "final training epochs"),
    "lr_w": (float, "learning rate for network weights (step-decayed)"),
    "lr_arch": (float, "learning rate for architecture logits (constant)"),
    "batch_size": (int, "images per optimization step"),
    "patch_size": (int, "low-resolution crop size during training"),
    "lambda_flops": (float, "efficiency-term weight per GFLOP"),
    "lambda_order": (float, "path ordering-penalty strength, in [0,1]"),
    "omega_cell_path": (float, "efficiency-gradient weight for op/path logits"),
    "omega_width": (float, "efficiency-gradient weight for width logits"),
    "gumbel_tau_start": (float, "initial width-sampling temperature"),
    "gumbel_tau_end": (float, "final width-sampling temperature"),
    "hinge_order": (_bool, "use the hinge ordering penalty instead of telescoping"),
    "per_node_tail": (_bool, "apply the tail per node and fuse outputs"),
    "train_mode": (str, "final training mode: from_search or from_scratch"),
    "softmax_baseline": (_bool, "swap sparse normalization for softmax"),
    "dtype": (str, "float64 (tests/default) or float32 (faster training)"),
    "seed": (int, "master seed; data/init/teacher/run streams derive from it"),
    "flops_h": (int, "input height for FLOPs accounting"),
    "flops_w": (int, "input width for FLOPs accounting"),
}


def parse_config(text):
    """Parse flat key = value text; returns a raw dict of typed values."""
    values = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEY_TABLE:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        conv = KEY_TABLE[key][0]
        try:
            values[key] = conv(val)
        except ValueError:
            problems.append(f"line {lineno}: key {key!r} expects {conv.__name__}, got {val!r}")
    if problems:
        raise ConfigError("; ".join(problems))
    return values


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def resolve(values, overrides=None):
    """Raw dict + CLI overrides -> validated SearchConfig."""
    merged = dict(values)
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    try:
        cfg = SearchConfig(**merged)
        cfg.validate()
    except TypeError as e:
        raise ConfigError(str(e)) from None
    except EngineError as e:
        raise ConfigError(str(e)) from None
    return cfg


def dump_config(cfg, exclude=()):
    """Canonical text form (sorted keys); parsing it back is the identity."""
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        if f.name in exclude:
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg, exclude=()):
    return hashlib.sha256(dump_config(cfg, exclude).encode()).hexdigest()[:16]


# fields that only influence the final-training phase: a search or pretrain
# checkpoint is still valid upstream when they differ
FINAL_ONLY_FIELDS = frozenset({"t3", "train_mode"})

# fields that first act during search: a pretrain checkpoint stays valid
# across them, which is what lets one pretrained supernet serve a whole
# ablation sweep
SEARCH_ONLY_FIELDS = FINAL_ONLY_FIELDS | frozenset({
    "t2", "lambda_flops", "lambda_order", "omega_cell_path", "omega_width",
    "lr_arch", "gumbel_tau_start", "gumbel_tau_end", "hinge_order",
})
