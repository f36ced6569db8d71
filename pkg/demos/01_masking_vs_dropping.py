"""
Masking tokens versus dropping them
===================================

A batched forward pass cannot physically remove tokens, because every image
keeps a different number. During training the model therefore keeps a fixed
buffer and zeroes removed tokens out of the attention softmax. At batch size
one they can really be gathered away. This script shows both paths agree.
"""

import torch

from ltmp import LTMPViT, ModelConfig

torch.manual_seed(0)
cfg = ModelConfig()
model = LTMPViT(cfg)
model.init_weights(seed=3)

# hand-picked thresholds: merge pairs with cosine > 0.9, prune tokens whose
# importance is below half the uniform share 1/N
merge = torch.full((cfg.blocks,), 0.9, dtype=torch.float64)
prune = torch.full((cfg.blocks,), 0.5 / cfg.n_tokens, dtype=torch.float64)

image = torch.rand(1, cfg.image_size, cfg.image_size, cfg.in_chans, dtype=torch.float64)

with torch.no_grad():
    masked = model(image, mode="train", thresholds=(merge, prune), collect=True)
    dropped = model(image, mode="inference", thresholds=(merge, prune))

print("logits (masked): ", masked.logits[0, :4].numpy())
print("logits (dropped):", dropped.logits[0, :4].numpy())
print("max abs difference:", float((masked.logits - dropped.logits).abs().max()))

###############################################################################
# Tokens kept after each block, and what happened to them

kept = (masked.mbar[0] * cfg.n_tokens).round().int().tolist()
print("tokens kept per block:", kept)
print("r_FLOPs:", round(float(masked.r_flops[0]), 4))

trace = masked.trace(cfg.n_tokens)
for layer in range(cfg.blocks):
    rec = trace.record(0, layer)
    owner = rec["owner"]
    merged = sum(1 for i, o in enumerate(owner) if o >= 0 and o != i)
    pruned = sum(1 for o in owner if o < 0)
    print(f"block {layer + 1}: {merged} patches folded into others, {pruned} pruned so far")
