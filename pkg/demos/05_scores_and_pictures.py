"""
Where do merging and pruning disagree?
======================================

Pruning ranks tokens by how much attention they receive; merging ranks them
by how close their key is to some other token. If the two rankings were the
same, one mechanism would be redundant. The Kendall tau per block measures
the overlap. Then, per block, the number of tokens each mechanism removes,
and a picture of one image as it shrinks.

Usage: ``python3 demos/05_scores_and_pictures.py [checkpoint] [out_dir]``.
"""

import sys
from pathlib import Path

from ltmp import load_checkpoint, ltmp_finetune, pretrain_backbone
from ltmp.analysis import correlation_report, format_correlation, format_k_distribution, k_distribution_report
from ltmp.config import RunConfig
from ltmp.data import generate
from ltmp.viz import visualize_tokens

out_dir = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
if len(sys.argv) > 1:
    cfg = RunConfig()
    train, val = generate(cfg.dataset_spec())
    ckpt = load_checkpoint(sys.argv[1])
else:
    cfg = RunConfig(train_samples=3072, val_samples=512, epochs=10)
    train, val = generate(cfg.dataset_spec())
    ckpt = pretrain_backbone(train, val, cfg.model_config(), cfg.pretrain_config())

if ckpt.metadata.get("phase") != "ltmp":
    ckpt, _ = ltmp_finetune(ckpt, train, cfg.ltmp_config(), tau=cfg.tau)
model = ckpt.to_model()
subset = val.subset(slice(0, 128))

print(format_correlation(correlation_report(model, subset, k=cfg.topk)))
print(format_k_distribution(k_distribution_report(model, subset)))

paths = visualize_tokens(model, val.images[0], out_dir)
print("wrote", ", ".join(p.name for p in paths), "and strip.ppm to", out_dir)
