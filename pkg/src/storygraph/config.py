"""Flat key=value configuration with environment overrides.

Files use one ``key = value`` per line, ``#`` comments. Any key can also
be set through the environment as ``STORYGRAPH_<KEY>`` (uppercased);
environment values win over file values, and explicit overrides win over
both.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping

from .embedding import EmbeddingConfig
from .model import HgtConfig
from .textnorm import DEFAULT_RULES, TagRules

ENV_PREFIX = "STORYGRAPH_"

DEFAULTS: dict[str, object] = {
    # model (the four published names first)
    "attention_heads": 4,
    "epochs": 500,
    "conv_layers": 2,
    "hidden_channels": 128,
    "learning_rate": 0.005,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "task": "regression",
    "model": "hgt",
    "input_mode": "full",
    "seed": 0,
    "repeats": 10,
    "check_activations": False,
    "dtype": "float32",  # float64 for gradient checking
    # embedding
    "embed_dim": 100,
    "embed_window": 5,
    "embed_negatives": 5,
    "embed_epochs": 5,
    "embed_min_n": 3,
    "embed_max_n": 6,
    "embed_buckets": 100000,
    "embed_learning_rate": 0.05,
    "embed_scope": "train",
    # splits and graph
    "valid_fraction": 0.0,
    "reverse_edges": True,
    # text segmentation: extra_code_tags is a semicolon-separated list of
    # regexes, each matched case-insensitively as its own code-span family
    "sentence_delimiters": ".!?;",
    "extra_code_tags": "",
}


class ConfigError(Exception):
    pass


def _coerce(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config_file(path: str | Path) -> dict[str, object]:
    settings: dict[str, object] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{line_no}: expected key = value")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
        settings[key] = _coerce(key, raw)
    return settings


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    out: dict[str, object] = {}
    for key in DEFAULTS:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            out[key] = _coerce(key, environ[env_key])
    return out


def resolve(
    config_file: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
    overrides: Mapping[str, object] | None = None,
) -> dict[str, object]:
    """Defaults, then file, then environment, then explicit overrides."""
    settings = dict(DEFAULTS)
    if config_file is not None:
        settings.update(parse_config_file(config_file))
    settings.update(env_overrides(environ))
    if overrides:
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            if value is not None:
                settings[key] = value
    return settings


def hgt_config(settings: Mapping[str, object]) -> HgtConfig:
    return HgtConfig(
        layers=settings["conv_layers"],
        heads=settings["attention_heads"],
        hidden=settings["hidden_channels"],
        epochs=settings["epochs"],
        task=settings["task"],
        learning_rate=settings["learning_rate"],
        beta1=settings["adam_beta1"],
        beta2=settings["adam_beta2"],
        eps=settings["adam_eps"],
        input_dim=settings["embed_dim"],
        seed=settings["seed"],
        check_activations=settings["check_activations"],
        dtype=settings["dtype"],
    )


def tag_rules(settings: Mapping[str, object]) -> TagRules:
    patterns = list(DEFAULT_RULES.tag_patterns)
    families = set(DEFAULT_RULES.code_families)
    extra = str(settings.get("extra_code_tags", "")).strip()
    if extra:
        for i, pattern in enumerate(p.strip() for p in extra.split(";")):
            if not pattern:
                continue
            family = f"extra{i}"
            patterns.append((family, pattern))
            families.add(family)
    return TagRules(tuple(patterns), frozenset(families),
                    str(settings["sentence_delimiters"]))


def embedding_config(settings: Mapping[str, object]) -> EmbeddingConfig:
    return EmbeddingConfig(
        dim=settings["embed_dim"],
        window=settings["embed_window"],
        negatives=settings["embed_negatives"],
        epochs=settings["embed_epochs"],
        min_n=settings["embed_min_n"],
        max_n=settings["embed_max_n"],
        bucket_count=settings["embed_buckets"],
        learning_rate=settings["embed_learning_rate"],
        seed=settings["seed"],
    )
