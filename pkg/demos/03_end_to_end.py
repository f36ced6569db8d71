"""
From synthetic shapes to a reduced model
========================================

The whole pipeline in one script: render a dataset, pretrain the small ViT
without any reduction, then learn only the 2L thresholds for one epoch under
a FLOPs budget and compare accuracy.

By default this uses a shrunken dataset and fewer epochs so it finishes in a
few minutes; the backbone then stops well short of the full run's accuracy.
Pass ``--full`` for the default configuration (about ten minutes of
pretraining on one CPU core).
"""

import sys
import time

from ltmp import evaluate, ltmp_finetune, pretrain_backbone
from ltmp.config import RunConfig
from ltmp.data import class_name, generate

full = "--full" in sys.argv
cfg = RunConfig() if full else RunConfig(train_samples=3072, val_samples=512, epochs=10)

train, val = generate(cfg.dataset_spec())
print(f"{len(train)} training / {len(val)} validation images, classes:",
      ", ".join(class_name(c) for c in range(cfg.classes)))

###############################################################################
# Pretraining updates every backbone weight; no tokens are removed.

t0 = time.perf_counter()
ckpt = pretrain_backbone(train, val, cfg.model_config(), cfg.pretrain_config(),
                         logger=lambda r: print(f"  epoch {r['epoch']:2d} loss {r['loss']:.3f} val {r['val_acc']:.3f}"))
print(f"pretrained in {time.perf_counter() - t0:.0f}s")
base = evaluate(ckpt.to_model(reduction_order="none"), val, mode="train")
print(f"baseline top-1 {base['top1']:.3f}")

###############################################################################
# Threshold fine-tuning: the backbone is frozen, one pass over the data.
# The budget loss pulls the per-sample r_FLOPs toward the target while the
# cross-entropy term resists removing useful tokens.

for target in (0.9, 0.7, 0.5):
    tcfg = cfg.ltmp_config()
    tcfg.r_target = target
    tuned, traj = ltmp_finetune(ckpt, train, tcfg, tau=cfg.tau)
    m = evaluate(tuned, val, mode="train")
    print(f"target {target}: r_FLOPs {m['r_flops']:.3f}, top-1 {m['top1']:.3f}, "
          f"tokens per block {[round(t) for t in m['tokens_per_layer']]}")
    print("  merge thresholds", [round(float(t), 4) for t in tuned.theta_merge])
    print("  prune thresholds", [round(float(t), 5) for t in tuned.theta_prune])

###############################################################################
# Inference at batch size one physically drops tokens and gives the same
# predictions as the masked batch evaluation above.

m_inf = evaluate(tuned, val.subset(slice(0, 64)), mode="inference")
m_train = evaluate(tuned, val.subset(slice(0, 64)), mode="train")
print("first 64 images, inference vs masked top-1:", m_inf["top1"], m_train["top1"])
