"""
How much do thresholds depend on the data order?
================================================

Threshold fine-tuning sees each training image once, in an order drawn from
the seed. Running it with five seeds on the same backbone shows the spread
in accuracy and achieved budget. The range is reported, not judged.

Usage: ``python3 demos/04_seed_variance.py [checkpoint] [r_target]``. Without
a checkpoint a small backbone is pretrained first.
"""

import sys

import numpy as np

from ltmp import evaluate, load_checkpoint, ltmp_finetune, pretrain_backbone
from ltmp.config import RunConfig
from ltmp.data import generate

target = float(sys.argv[2]) if len(sys.argv) > 2 else 0.7
if len(sys.argv) > 1:
    cfg = RunConfig()
    ckpt = load_checkpoint(sys.argv[1])
    train, val = generate(cfg.dataset_spec())
else:
    cfg = RunConfig(train_samples=3072, val_samples=512, epochs=10)
    train, val = generate(cfg.dataset_spec())
    ckpt = pretrain_backbone(train, val, cfg.model_config(), cfg.pretrain_config())

rows = []
for seed in range(5):
    tcfg = cfg.ltmp_config()
    tcfg.r_target, tcfg.seed = target, seed
    tuned, _ = ltmp_finetune(ckpt, train, tcfg, tau=cfg.tau)
    m = evaluate(tuned, val, mode="train")
    rows.append((m["top1"], m["r_flops"]))
    print(f"seed {seed}: top-1 {m['top1']:.4f}  r_FLOPs {m['r_flops']:.4f}")

acc, r = np.array(rows).T
print(f"top-1 range {acc.min():.4f} .. {acc.max():.4f} (mean {acc.mean():.4f}, std {acc.std(ddof=1):.4f})")
print(f"r_FLOPs range {r.min():.4f} .. {r.max():.4f}")
