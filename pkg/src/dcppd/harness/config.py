"""Declarative experiment configuration with a flat, dotted key namespace.

A config file is one JSON object whose keys come from :data:`SCHEMA`, for
example ``{"data.n_train": 200, "gen.stage2_epochs": 4}``. Unknown keys and
wrongly typed values are rejected; missing keys take their defaults.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Any, Mapping

from ..backbone import BackboneConfig, large_preset
from ..discriminator import OptimConfig
from ..generator import GenConfig
from ..synthdata import DatasetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    doc: str


SCHEMA: dict[str, Key] = {
    "data.n_train": Key(int, 2000, "training phantoms"),
    "data.n_eval": Key(int, 500, "held-out phantoms"),
    "data.seed": Key(int, 11, "dataset seed; item seeds derive from (seed, index)"),
    "data.report_style": Key(str, "structured", "structured, or unstructured (shuffled sentences in one section)"),
    "data.write_volumes": Key(bool, False, "also write volumes/*.npy (otherwise regenerated from item seeds)"),
    "backbone.preset": Key(str, "toy", "toy, or large (384-dim tokens over 256^3 inputs)"),
    "backbone.visual_scale": Key(int, 2, "hierarchy scale whose tokens feed the vision projector"),
    "probe.lr": Key(float, 1e-3, "probe Adam learning rate"),
    "probe.epochs": Key(int, 1000, "probe epochs"),
    "probe.batch_size": Key(int, 256, "probe batch size"),
    "gen.batch_size": Key(int, 32, "generator batch size"),
    "gen.pretrain_epochs": Key(int, 12, "decoder pretraining epochs"),
    "gen.pretrain_lr": Key(float, 2e-3, "decoder pretraining learning rate"),
    "gen.ppl_threshold": Key(float, 3.0, "maximum held-out perplexity after pretraining"),
    "gen.stage1_epochs": Key(int, 8, "projector alignment epochs"),
    "gen.stage1_lr": Key(float, 1e-3, "projector alignment learning rate"),
    "gen.stage2_epochs": Key(int, 10, "cue-conditioned fine-tuning epochs"),
    "gen.stage2_lr": Key(float, 1e-3, "cue-conditioned fine-tuning learning rate"),
    "gen.lora_rank": Key(int, 16, "adapter rank"),
    "gen.lora_alpha": Key(float, 32.0, "adapter scale numerator (scale = alpha / rank)"),
    "gen.cue_sets": Key(list, ["QS1"], "question sets rendered into cue prompts"),
    "gen.max_len": Key(int, 64, "maximum generated tokens"),
    "gen.n_queries": Key(int, 8, "projector query tokens"),
    "train.dropout": Key(float, 0.3, "prompt dropout rate p"),
    "train.cue_source": Key(str, "gt", "cues seen during stage 2: gt, probe or noisy"),
    "train.noisy_flip": Key(float, 0.1, "flip rate when train.cue_source is noisy"),
    "eval.cue_source": Key(str, "none", "test-time cues: none, probe, noisy or gt"),
    "eval.noisy_flip": Key(float, 0.02, "flip rate of the emulated stronger cue source (below the probe error)"),
    "eval.n": Key(int, 300, "eval phantoms used for generation"),
    "eval.batch_size": Key(int, 64, "generation batch size"),
    "seeds": Key(list, [0, 1, 2], "training seeds"),
    "output_dir": Key(str, "runs", "root of run directories (not part of the config hash)"),
}

CUE_SOURCES = ("none", "probe", "noisy", "gt")
# test-time settings in table order, with their row labels
TEST_SETTINGS = (("none", "No DCP"), ("probe", "DCP-1"), ("noisy", "DCP-2"), ("gt", "GT-DCP"))
_UNHASHED = ("output_dir",)


class ExperimentConfig(Mapping):
    """Immutable mapping of dotted keys to validated values."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged = {}
        for name, key in SCHEMA.items():
            merged[name] = _coerce(name, key, values.get(name, key.default))
        _check(merged)
        self._values = merged

    def __getitem__(self, name: str):
        return self._values[name]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with keys overridden; dots in keys are written as double underscores."""
        d = dict(self._values)
        for k, v in changes.items():
            d[k.replace("__", ".")] = v
        return ExperimentConfig(d)

    def updated(self, values: Mapping[str, Any]) -> "ExperimentConfig":
        return ExperimentConfig({**self._values, **values})

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, list) else v) for k, v in self._values.items()}

    def canonical_json(self) -> str:
        hashed = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return json.dumps(hashed, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    # -- component configs -------------------------------------------------------------

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(structured=self["data.report_style"] == "structured")

    def backbone_config(self) -> BackboneConfig:
        return large_preset() if self["backbone.preset"] == "large" else BackboneConfig()

    def probe_optim(self, seed: int = 0) -> OptimConfig:
        return OptimConfig(lr=self["probe.lr"], epochs=self["probe.epochs"],
                           batch_size=self["probe.batch_size"], seed=seed)

    def gen_config(self, seed: int, no_image: bool = False) -> GenConfig:
        return GenConfig(
            batch_size=self["gen.batch_size"], pretrain_epochs=self["gen.pretrain_epochs"],
            pretrain_lr=self["gen.pretrain_lr"], ppl_threshold=self["gen.ppl_threshold"],
            stage1_epochs=self["gen.stage1_epochs"], stage1_lr=self["gen.stage1_lr"],
            stage2_epochs=self["gen.stage2_epochs"], stage2_lr=self["gen.stage2_lr"],
            lora_rank=self["gen.lora_rank"], lora_alpha=self["gen.lora_alpha"],
            cue_sets=tuple(self["gen.cue_sets"]), max_len=self["gen.max_len"], no_image=no_image, seed=seed,
        )


def _coerce(name: str, key: Key, value):
    if key.type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if key.type is list and isinstance(value, tuple):
        value = list(value)
    if key.type is not bool and isinstance(value, bool) or not isinstance(value, key.type):
        raise ConfigError(f"{name} must be {key.type.__name__}, got {value!r}")
    return value


def _check(v: dict) -> None:
    if v["data.n_train"] < 2 or v["data.n_eval"] < 1:
        raise ConfigError("need at least 2 training and 1 eval phantom")
    if not 1 <= v["eval.n"] <= v["data.n_eval"]:
        raise ConfigError(f"eval.n must lie in [1, data.n_eval={v['data.n_eval']}]")
    if v["data.report_style"] not in ("structured", "unstructured"):
        raise ConfigError("data.report_style must be structured or unstructured")
    if v["backbone.preset"] not in ("toy", "large"):
        raise ConfigError("backbone.preset must be toy or large")
    if v["train.cue_source"] not in ("gt", "probe", "noisy"):
        raise ConfigError("train.cue_source must be gt, probe or noisy")
    if v["eval.cue_source"] not in CUE_SOURCES:
        raise ConfigError(f"eval.cue_source must be one of {CUE_SOURCES}")
    for k in ("train.dropout", "train.noisy_flip", "eval.noisy_flip"):
        if not 0.0 <= v[k] <= 1.0:
            raise ConfigError(f"{k} must lie in [0, 1]")
    if not v["seeds"] or not all(isinstance(s, int) and not isinstance(s, bool) for s in v["seeds"]):
        raise ConfigError("seeds must be a non-empty list of integers")
    if not set(v["gen.cue_sets"]) <= {"QS1", "QS2", "QS3"} or not v["gen.cue_sets"]:
        raise ConfigError("gen.cue_sets must be a non-empty subset of QS1, QS2, QS3")


def load_config(path: os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold one JSON object")
    return ExperimentConfig(raw)


def schema_markdown() -> str:
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for name, key in SCHEMA.items():
        rows.append(f"| `{name}` | `{json.dumps(key.default)}` | {key.doc} |")
    return "\n".join(rows)
