"""Small vision transformer with learned-threshold token merging and pruning.

Two execution modes share one set of weights:

* ``train``: every sample keeps a fixed-length token buffer. Removed tokens
  stay in place with mask 0, are frozen, and are excluded from attention by
  the masked softmax. Masks carry straight-through gradients to the
  thresholds.
* ``inference``: batch size 1, removed tokens are physically dropped.

Both modes give the same logits up to float rounding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import torch
from torch import nn

from . import core
from .flops import r_flops
from .reduction import (
    ThresholdSet,
    bipartite_similarity,
    build_trace,
    importance_scores,
    merge_tokens,
    ste_mask,
    topk_mask,
)

REDUCTION_ORDERS = (
    "LTMP", "LTPM", "merge_only", "prune_only", "topk_merge", "topk_prune", "topk_both", "none",
)
IMPORTANCE_SCORES = ("mean_column", "class_attention")
MERGE_MODES = ("weighted", "pairwise")

_STEPS = {
    "LTMP": ("merge", "prune"),
    "LTPM": ("prune", "merge"),
    "merge_only": ("merge",),
    "prune_only": ("prune",),
    "topk_merge": ("merge",),
    "topk_prune": ("prune",),
    "topk_both": ("merge", "prune"),
    "none": (),
}


@dataclass
class ModelConfig:
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

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.reduction_order not in REDUCTION_ORDERS:
            raise ValueError(f"reduction_order must be one of {REDUCTION_ORDERS}, got {self.reduction_order!r}")
        if self.importance_score not in IMPORTANCE_SCORES:
            raise ValueError(f"importance_score must be one of {IMPORTANCE_SCORES}")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")
        if self.topk < 0:
            raise ValueError("topk must be non-negative")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TokenState:
    """Tokens flowing through the blocks.

    ``mask`` is the differentiable keep mask, ``alive`` its hard boolean
    counterpart; ``ids`` maps buffer positions to original token indices
    (identity in train mode).
    """

    tokens: torch.Tensor   # [B, N, d]
    mask: torch.Tensor     # [B, N]
    alive: torch.Tensor    # [B, N] bool
    sizes: torch.Tensor    # [B, N]
    pruned: torch.Tensor   # [B, N] bool
    ids: torch.Tensor      # [N]


@dataclass
class AttentionCache:
    q: torch.Tensor  # [B, H, N, dh]
    k: torch.Tensor
    v: torch.Tensor
    logits: torch.Tensor  # [B, H, N, N]
    attn: torch.Tensor    # masked softmax, [B, H, N, N]


def attention_with_mask(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor):
    """Multi-head attention where masked tokens are invisible as keys.

    ``mask`` is ``[B, N]``. Returns per-head outputs ``S V`` and the cache.
    """
    logits = core.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    attn = core.masked_softmax(logits, mask[:, None, None, :])
    out = core.matmul(attn, v)
    return out, AttentionCache(q, k, v, logits, attn)


class LayerNorm(nn.Module):
    def __init__(self, d: int, dtype=core.DTYPE):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))

    def forward(self, x):
        return core.layer_norm(x, self.weight, self.bias)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, dtype=core.DTYPE):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d, dtype=dtype)
        self.proj = nn.Linear(d, d, dtype=dtype)

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out, cache = attention_with_mask(qkv[0], qkv[1], qkv[2], mask)
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out), cache


class Mlp(nn.Module):
    def __init__(self, d: int, hidden: int, dtype=core.DTYPE):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, d, dtype=dtype)

    def forward(self, x):
        return self.fc2(core.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype=core.DTYPE):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d, dtype)
        self.attn = Attention(d, cfg.heads, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.mlp = Mlp(d, int(d * cfg.mlp_ratio), dtype)


@dataclass
class ForwardOutput:
    logits: torch.Tensor          # [B, classes]
    mbar: torch.Tensor            # [B, L + 1], kept fraction with mbar[:, 0] = 1
    r_flops: torch.Tensor         # [B]
    decisions: list[dict] = field(default_factory=list)
    scores: list[dict] = field(default_factory=list)
    states: list[TokenState] = field(default_factory=list)

    def trace(self, n_tokens: int, sample_offset: int = 0):
        return build_trace(self.decisions, n_tokens, sample_offset)


class LTMPViT(nn.Module):
    """Pre-norm ViT with a merge/prune stage between attention and MLP."""

    def __init__(self, cfg: ModelConfig, tau: float = 0.1, dtype=core.DTYPE):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_size**2 * cfg.in_chans, d, dtype=dtype)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d, dtype=dtype))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_tokens, d, dtype=dtype))
        self.blocks = nn.ModuleList(Block(cfg, dtype) for _ in range(cfg.blocks))
        self.norm = LayerNorm(d, dtype)
        self.head = nn.Linear(d, cfg.classes, dtype=dtype)
        self.thresholds = ThresholdSet(cfg.blocks, tau=tau, dtype=dtype)

    # --- parameters ---------------------------------------------------------

    def init_weights(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.backbone_parameters():
                if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
                    p.fill_(1.0)
                elif name.endswith(".bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype).clamp_(-2, 2) * 0.02)

    def backbone_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("thresholds.")]

    # --- forward ------------------------------------------------------------

    def embed(self, images: torch.Tensor) -> TokenState:
        """Patchify ``[B, H, W, C]`` images, project, add positions, prepend CLS."""
        cfg = self.cfg
        if images.dim() == 3:
            images = images[None]
        b, h, w, c = images.shape
        if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.in_chans):
            raise ValueError(
                f"image shape {(h, w, c)} does not match config "
                f"{(cfg.image_size, cfg.image_size, cfg.in_chans)}"
            )
        p, g = cfg.patch_size, cfg.grid
        patches = images.reshape(b, g, p, g, p, c).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * c)
        x = self.patch_embed(patches.to(self.pos_embed.dtype)) + self.pos_embed[:, 1:]
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1)
        n = x.shape[1]
        return TokenState(
            tokens=x,
            mask=torch.ones(b, n, dtype=x.dtype),
            alive=torch.ones(b, n, dtype=torch.bool),
            sizes=torch.ones(b, n, dtype=x.dtype),
            pruned=torch.zeros(b, n, dtype=torch.bool),
            ids=torch.arange(n),
        )

    def forward(self, images: torch.Tensor, mode: str = "train", relaxed: bool = False,
                order: str | None = None, thresholds: tuple | None = None, topk: int | None = None,
                collect: bool = False, keep_states: bool = False) -> ForwardOutput:
        """Run the model.

        ``order`` overrides ``cfg.reduction_order``; ``thresholds`` overrides
        the learned ``(merge, prune)`` values and may be per sample
        (``[B, L]``); ``topk`` overrides ``cfg.topk``. ``collect`` records
        decisions and scores for traces and analysis.
        """
        if mode not in ("train", "inference"):
            raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
        order = order or self.cfg.reduction_order
        if order not in REDUCTION_ORDERS:
            raise ValueError(f"unknown reduction order {order!r}")
        if thresholds is None:
            thresholds = (self.thresholds.merge, self.thresholds.prune)
        th_merge, th_prune = (torch.as_tensor(t, dtype=self.pos_embed.dtype) for t in thresholds)
        if th_merge.shape[-1] != self.cfg.blocks or th_prune.shape[-1] != self.cfg.blocks:
            raise ValueError(f"expected {self.cfg.blocks} thresholds per kind")

        st = self.embed(images)
        if mode == "inference" and st.tokens.shape[0] != 1:
            raise ValueError("inference mode runs one image at a time")
        n0 = st.tokens.shape[1]
        mbar = [torch.ones(st.tokens.shape[0], dtype=st.tokens.dtype)]
        out = ForwardOutput(logits=None, mbar=None, r_flops=None)
        for l, blk in enumerate(self.blocks):
            st = self._block(l, blk, st, mode, relaxed, order, self.cfg.topk if topk is None else topk,
                             th_merge[..., l], th_prune[..., l], out if collect else None)
            mbar.append(st.mask.sum(dim=-1) / n0)
            if keep_states:
                out.states.append(st)
        cls = self.norm(st.tokens[:, 0])
        out.logits = self.head(cls)
        out.mbar = torch.stack(mbar, dim=-1)
        out.r_flops = r_flops(out.mbar, n0, self.cfg.embed_dim)
        return out

    def _block(self, l, blk, st: TokenState, mode, relaxed, order, k, th_merge, th_prune, out):
        x = st.tokens
        alive3 = st.alive[..., None]
        h, cache = blk.attn(blk.norm1(x), st.mask)
        x = torch.where(alive3, x + h, x)
        st = TokenState(x, st.mask, st.alive, st.sizes, st.pruned, st.ids)
        st = self._reduce(st, cache, relaxed, order, k, th_merge, th_prune, out)
        if mode == "inference":
            keep = torch.nonzero(st.alive[0]).flatten()
            st = TokenState(
                tokens=st.tokens[:, keep], mask=st.mask[:, keep], alive=st.alive[:, keep],
                sizes=st.sizes[:, keep], pruned=torch.zeros(1, keep.numel(), dtype=torch.bool),
                ids=st.ids[keep],
            )
        x = st.tokens
        x = torch.where(st.alive[..., None], x + blk.mlp(blk.norm2(x)), x)
        return TokenState(x, st.mask, st.alive, st.sizes, st.pruned, st.ids)

    def _reduce(self, st: TokenState, cache: AttentionCache, relaxed, order, k, th_merge, th_prune, out):
        cfg = self.cfg
        tau = self.thresholds.tau
        topk = order.startswith("topk")
        x, sizes, alive, pruned = st.tokens, st.sizes, st.alive, st.pruned
        b, n = alive.shape
        not_cls = torch.arange(n) != 0
        if th_merge.dim() == 1:
            th_merge, th_prune = th_merge[:, None], th_prune[:, None]

        # keep-factor of this block for every token a masking module touched
        block_keep = torch.ones_like(st.mask)
        touched = torch.zeros_like(alive)
        merge_src = torch.zeros_like(alive)
        merge_dst = torch.zeros(b, n, dtype=torch.long)
        prune = torch.zeros_like(alive)

        steps = _STEPS[order]
        imp = None
        if "prune" in steps or out is not None:
            imp = importance_scores(cache.attn, alive, cfg.importance_score)
        record = {"importance": imp.detach(), "alive": alive.clone()} if out is not None else None
        for step in steps:
            if step == "merge":
                sim = bipartite_similarity(cache.k, alive)
                cand = sim.set_a
                if record is not None and "similarity" not in record:
                    record["similarity"] = sim.score.detach()
                    record["set_a"] = cand.clone()
                if topk:
                    src = topk_mask(sim.score, cand, k, largest=True)
                    keep = (~src).to(x.dtype)
                else:
                    score = torch.where(cand, sim.score, torch.zeros_like(sim.score))
                    src = cand & (score > th_merge)
                    keep = 1 - ste_mask(score, th_merge, tau, relaxed)
                block_keep = torch.where(cand, block_keep * keep, block_keep)
                touched = touched | cand
                # merged contents follow hard decisions only
                x, sizes = merge_tokens(x, sizes, src, sim.partner, cfg.merge_mode)
                merge_src = merge_src | src
                merge_dst = torch.where(src, sim.partner, merge_dst)
                alive = alive & ~src
            else:
                cand = alive & not_cls
                if topk:
                    drop = topk_mask(imp, cand, k, largest=False)
                    keep = (~drop).to(x.dtype)
                else:
                    drop = cand & ~(imp > th_prune)
                    keep = ste_mask(imp, th_prune, tau, relaxed)
                block_keep = torch.where(cand, block_keep * keep, block_keep)
                touched = touched | cand
                prune = prune | drop
                alive = alive & ~drop

        mask = torch.where(touched, block_keep, st.mask)
        if out is not None:
            out.decisions.append({
                "ids": st.ids.clone(), "merge_src": merge_src, "merge_dst": merge_dst, "prune": prune,
            })
            out.scores.append(record)
        return TokenState(x, mask, alive, sizes, pruned | prune, st.ids)
