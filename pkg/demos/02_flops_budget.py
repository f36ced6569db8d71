"""
Counting block FLOPs
====================

The budget the thresholds are trained toward is expressed as the fraction of
transformer-block FLOPs that survive reduction. Attention scales with the
token count before the block's reduction, the MLP with the count after it.
"""

from ltmp.flops import phi_block, phi_head, phi_patch_embed, r_flops

# a DeiT-S sized model: 197 tokens of width 384, 12 blocks
msa, mlp, blk = phi_block(197, 384)
print(f"attention {msa:,}  mlp {mlp:,}  block {blk:,}")
print(f"12 blocks: {12 * blk / 1e9:.3f} GFLOPs (multiply-accumulates)")
print(f"patch embedding {phi_patch_embed(196, 16, 3, 384):,}, head {phi_head(384, 1000):,}")

###############################################################################
# Reduction factors for a few keep schedules (fraction of tokens alive after
# each block, with the leading 1 for the input)

schedules = {
    "nothing removed": [1.0] * 13,
    "half after block 1": [1.0] + [0.5] * 12,
    "linear decay to 30%": [1.0] + [1 - 0.7 * l / 12 for l in range(1, 13)],
    "everything after block 6": [1.0] * 7 + [1 / 197] * 6,
}
for name, m in schedules.items():
    print(f"{name:26s} r_FLOPs = {float(r_flops(m, 197, 384)):.3f}")

###############################################################################
# The toy model used throughout the package: 65 tokens, width 64, 4 blocks

msa, mlp, blk = phi_block(65, 64)
print(f"toy block: attention {msa:,}  mlp {mlp:,}  total for 4 blocks {4 * blk:,}")
