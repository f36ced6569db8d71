"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment. Every key below is optional and
falls back to its default; unknown keys are an error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import SynthDatasetSpec
from .flops import LossConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dataset
    train_samples: int = 6144
    val_samples: int = 1024
    noise: float = 0.05
    data_seed: int = 1234
    data_dir: str = ""
    # model
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_ratio: float = 4.0
    classes: int = 8
    reduction_order: str = "LTMP"
    importance_score: str = "mean_column"
    topk: int = 8
    merge_mode: str = "weighted"
    # pretraining
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    # threshold fine-tuning
    ltmp_batch_size: int = 64
    lr_prune: float = 1e-4
    lr_merge: float = 1e-3
    lam: float = 10.0
    r_target: float = 0.7
    tau: float = 0.1
    # evaluation / analysis
    checkpoint: str = "pretrain.ckpt"
    eval_mode: str = "inference"
    eval_split: str = "val"
    analysis_samples: int = 256
    viz_index: int = 0
    viz_scale: int = 8

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{f: getattr(self, f) for f in ModelConfig.field_names()})

    def dataset_spec(self) -> SynthDatasetSpec:
        # validated on demand: flops-report may describe models with more classes
        try:
            return SynthDatasetSpec(
                classes=self.classes, image_size=self.image_size, train_samples=self.train_samples,
                val_samples=self.val_samples, noise=self.noise, seed=self.data_seed,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(phase="pretrain", epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, seed=self.seed)

    def ltmp_config(self) -> TrainConfig:
        return TrainConfig(phase="ltmp", epochs=1, batch_size=self.ltmp_batch_size, lr_prune=self.lr_prune,
                           lr_merge=self.lr_merge, lam=self.lam, r_target=self.r_target, seed=self.seed,
                           reduction_order=self.reduction_order)

    def loss_config(self) -> LossConfig:
        return LossConfig(r_target=self.r_target, lam=self.lam, tau=self.tau)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return value


def parse_pairs(pairs, base: dict | None = None, source: str = "--set") -> dict:
    values = dict(base or {})
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"{source}: expected key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def read_config_text(text: str, source: str = "config") -> dict:
    lines = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line))
    values = {}
    for lineno, line in lines:
        values = parse_pairs([line], values, source=f"{source}:{lineno}")
    return values


def load_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        values = read_config_text(Path(path).read_text(encoding="utf-8"), source=str(path))
    values = parse_pairs(overrides, values)
    try:
        cfg = RunConfig(**values)
        cfg.model_config()
        cfg.loss_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg
