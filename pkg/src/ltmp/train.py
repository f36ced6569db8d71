"""Backbone pretraining, threshold-only fine-tuning and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, model_digest
from .core import NonFiniteError
from .data import Dataset, to_float
from .flops import LossConfig, reg_loss, total_loss
from .model import LTMPViT, ModelConfig

log = logging.getLogger(__name__)

Logger = Callable[[dict], None]

# Reference setting at ImageNet scale. On the toy model merge similarities sit
# in a narrow band just below 1 and prune scores around 1/65, so the toy
# defaults in TrainConfig use a 10x ratio instead.
REFERENCE_LR_PRUNE = 5e-6
REFERENCE_LR_MERGE = 5e-3


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 20
    # None picks the phase default: 32 for pretraining, 64 for threshold training
    batch_size: int | None = None
    lr: float = 1e-3
    weight_decay: float = 0.05
    lr_prune: float = 1e-4
    lr_merge: float = 1e-3
    lam: float = 10.0
    r_target: float = 0.7
    seed: int = 0
    reduction_order: str = "LTMP"
    # pretraining only; threshold fine-tuning and evaluation always run in float64
    precision: str = "float32"

    def __post_init__(self):
        if self.phase not in ("pretrain", "ltmp"):
            raise ValueError(f"phase must be 'pretrain' or 'ltmp', got {self.phase!r}")
        if self.batch_size is None:
            self.batch_size = 32 if self.phase == "pretrain" else 64
        for name in ("batch_size",):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "lr_prune", "lr_merge"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {self.precision!r}")


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_loss(loss: torch.Tensor, where: str) -> None:
    if not math.isfinite(float(loss.detach())):
        raise TrainingDiverged(f"non-finite loss ({float(loss.detach())}) at {where}; lower the learning rate")


def pretrain_backbone(train: Dataset, val: Dataset, cfg: ModelConfig, tcfg: TrainConfig,
                      logger: Logger | None = None) -> Checkpoint:
    """Train every backbone weight with cross-entropy, no token reduction."""
    torch.manual_seed(tcfg.seed)
    cfg = cfg.replace(reduction_order="none")
    dtype = _DTYPES[tcfg.precision]
    model = LTMPViT(cfg, dtype=dtype)
    model.init_weights(tcfg.seed)
    params = [p for _, p in model.backbone_parameters()]
    model.thresholds.requires_grad_(False)
    decay = [p for p in params if p.dim() >= 2]
    no_decay = [p for p in params if p.dim() < 2]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": tcfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=tcfg.lr,
    )
    steps_per_epoch = math.ceil(len(train) / tcfg.batch_size) if len(train) else 0
    total = max(1, tcfg.epochs * steps_per_epoch)
    warmup = min(steps_per_epoch, total // 10)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: (s + 1) / warmup if s < warmup else 0.5 * (1 + math.cos(math.pi * (s - warmup) / max(1, total - warmup)))
    )
    rng = np.random.default_rng(tcfg.seed)
    x_all = to_float(train.images).to(dtype)
    y_all = torch.from_numpy(train.labels)
    history = []
    step = 0
    for epoch in range(tcfg.epochs):
        model.train()
        loss_sum, correct = 0.0, 0
        for idx in _batches(len(train), tcfg.batch_size, rng):
            try:
                out = model(x_all[idx], mode="train")
            except NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {e}; lower the learning rate") from e
            loss = F.cross_entropy(out.logits, y_all[idx])
            _check_loss(loss, f"epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            loss_sum += float(loss.detach()) * len(idx)
            correct += int((out.logits.argmax(-1) == y_all[idx]).sum())
        val_acc = evaluate(model, val, mode="train")["top1"] if len(val) else float("nan")
        rec = {"phase": "pretrain", "epoch": epoch, "step": step, "loss": loss_sum / len(train),
               "train_acc": correct / len(train), "val_acc": val_acc}
        log.info("pretrain epoch %d loss %.4f train %.4f val %.4f", epoch, rec["loss"], rec["train_acc"], val_acc)
        history.append(rec)
        if logger:
            logger(rec)
    meta = {"phase": "pretrain", "seed": tcfg.seed, "step": step, "epochs": tcfg.epochs,
            "val_acc": history[-1]["val_acc"] if history else None,
            "final_loss": history[-1]["loss"] if history else None}
    return Checkpoint.from_model(model, meta)


def ltmp_finetune(ckpt: Checkpoint, train: Dataset, tcfg: TrainConfig, tau: float = 0.1,
                  logger: Logger | None = None) -> tuple[Checkpoint, list[dict]]:
    """One epoch of SGD on the thresholds only, under the budget-aware loss.

    Thresholds start at merge=1, prune=0, which with strict comparisons
    reproduces the unreduced backbone. Returns the new checkpoint and the
    per-step trajectory.
    """
    loss_cfg = LossConfig(r_target=tcfg.r_target, lam=tcfg.lam, tau=tau)
    if len(train) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(tcfg.seed)
    model = ckpt.to_model(reduction_order=tcfg.reduction_order)
    model.thresholds.tau = loss_cfg.tau
    with torch.no_grad():
        model.thresholds.merge.fill_(1.0)
        model.thresholds.prune.fill_(0.0)
    for _, p in model.backbone_parameters():
        p.requires_grad_(False)
    before = model_digest(model)
    opt = torch.optim.SGD(
        [{"params": [model.thresholds.prune], "lr": tcfg.lr_prune},
         {"params": [model.thresholds.merge], "lr": tcfg.lr_merge}],
        momentum=0.0,
    )
    rng = np.random.default_rng(tcfg.seed)
    x_all = to_float(train.images)
    y_all = torch.from_numpy(train.labels)
    trajectory = []
    for step, idx in enumerate(_batches(len(train), tcfg.batch_size, rng)):
        out = model(x_all[idx], mode="train")
        ce = F.cross_entropy(out.logits, y_all[idx])
        # budget penalised per sample, then averaged
        reg = reg_loss(out.r_flops, loss_cfg.r_target).mean()
        loss = total_loss(ce, reg, loss_cfg.lam)
        _check_loss(loss, f"ltmp step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = {
            "phase": "ltmp", "step": step, "ce": float(ce.detach()), "reg": float(reg.detach()),
            "loss": float(loss.detach()), "r_flops": float(out.r_flops.detach().mean()),
            "theta_merge": model.thresholds.merge.detach().tolist(),
            "theta_prune": model.thresholds.prune.detach().tolist(),
        }
        trajectory.append(rec)
        if logger:
            logger(rec)
    after = model_digest(model)
    if before != after:
        raise AssertionError("backbone parameters changed during threshold fine-tuning")
    meta = dict(ckpt.metadata)
    meta.update({"phase": "ltmp", "ltmp_seed": tcfg.seed, "ltmp_steps": len(trajectory),
                 "r_target": tcfg.r_target, "lam": tcfg.lam, "backbone_sha256": after,
                 "final_batch_r_flops": trajectory[-1]["r_flops"]})
    return Checkpoint.from_model(model, meta), trajectory


@torch.no_grad()
def evaluate(model: LTMPViT | Checkpoint, ds: Dataset, mode: str = "inference", batch_size: int = 256) -> dict:
    """Top-1 accuracy, mean per-sample reduction factor and kept tokens per layer.

    ``inference`` runs one image at a time with tokens physically removed;
    ``train`` runs masked batches. Both produce the same predictions.
    """
    if isinstance(model, Checkpoint):
        model = model.to_model()
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x_all = to_float(ds.images)
    n_tok = model.cfg.n_tokens
    preds, rs, kept = [], [], []
    if mode == "inference":
        for i in range(len(ds)):
            out = model(x_all[i:i + 1], mode="inference")
            preds.append(out.logits.argmax(-1))
            rs.append(out.r_flops)
            kept.append(out.mbar * n_tok)
    elif mode == "train":
        for start in range(0, len(ds), batch_size):
            out = model(x_all[start:start + batch_size], mode="train")
            preds.append(out.logits.argmax(-1))
            rs.append(out.r_flops)
            kept.append(out.mbar * n_tok)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pred = torch.cat(preds).numpy()
    r = torch.cat(rs).numpy()
    tokens = torch.cat(kept).numpy()
    return {
        "mode": mode,
        "samples": int(len(ds)),
        "top1": float((pred == ds.labels).mean()),
        "r_flops": float(r.mean()),
        "tokens_per_layer": [float(v) for v in np.rint(tokens).mean(axis=0)],
    }
