"""Token scoring, threshold masking and the merge/prune operators.

Every operator works on a batch of fixed-length token buffers ``[B, N, ...]``
together with a boolean ``alive`` buffer. Inference mode calls the same code
with a single all-alive sample and then physically gathers the survivors, so
both execution modes share the decision logic. Index 0 is always the CLS
token.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.1


class ThresholdSet(nn.Module):
    """The two learnable thresholds per block plus the STE temperature."""

    def __init__(self, blocks: int, tau: float = DEFAULT_TAU, merge_init: float = 1.0,
                 prune_init: float = 0.0, dtype: torch.dtype = torch.float64):
        super().__init__()
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.merge = nn.Parameter(torch.full((blocks,), float(merge_init), dtype=dtype))
        self.prune = nn.Parameter(torch.full((blocks,), float(prune_init), dtype=dtype))
        self.tau = float(tau)

    def __len__(self) -> int:
        return self.merge.numel()

    def extra_repr(self) -> str:
        return f"blocks={len(self)}, tau={self.tau}"


# --- threshold masking ------------------------------------------------------

def threshold_mask(s, theta):
    """Hard keep mask: 1 where ``s > theta`` (strict), else 0."""
    if isinstance(s, torch.Tensor):
        return (s > theta).to(s.dtype)
    return (np.asarray(s, dtype=np.float64) > theta).astype(np.float64)


def ste_mask(s: torch.Tensor, theta: torch.Tensor, tau: float, relaxed: bool = False) -> torch.Tensor:
    """Threshold mask with a sigmoid straight-through gradient.

    The forward value is the hard step ``s > theta``; the backward pass
    differentiates ``sigmoid((s - theta) / tau)``. With ``relaxed=True`` the
    sigmoid itself is returned, which is the smooth surrogate the gradient
    refers to.
    """
    soft = torch.sigmoid((s - theta) / tau)
    if relaxed:
        return soft
    hard = (s > theta).to(soft.dtype)
    return hard + (soft - soft.detach())


def threshold_mask_ste_grad(s: float, theta: float, tau: float) -> tuple[float, float]:
    """Analytic ``(dM/ds, dM/dtheta)`` of the sigmoid surrogate."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    z = (s - theta) / tau
    # tanh form of the sigmoid; no overflow for large |z|
    th = np.tanh(z / 2)
    d = 0.25 * (1.0 + th) * (1.0 - th) / tau
    return float(d), float(-d)


def update_mask(prev_mask, new_decisions, alive=None):
    """Write new decisions only into entries that are still alive.

    ``alive`` defaults to ``prev_mask == 1``; removed tokens keep their
    previous (zero) entry, so masks can only shrink.
    """
    if isinstance(prev_mask, torch.Tensor):
        if alive is None:
            alive = prev_mask == 1
        return torch.where(alive, new_decisions, prev_mask)
    prev = np.asarray(prev_mask, dtype=np.float64)
    new = np.asarray(new_decisions, dtype=np.float64)
    if alive is None:
        alive = prev == 1
    return np.where(alive, new, prev)


# --- scores -----------------------------------------------------------------

def class_attention_scores(attn: torch.Tensor) -> torch.Tensor:
    """Attention of the CLS row to every token, summed over heads.

    ``attn`` is the (masked) softmax ``[..., H, N, N]``; returns ``[..., N]``.
    """
    return attn[..., 0, :].sum(dim=-2)


def mean_column_attention_scores(attn: torch.Tensor, alive: torch.Tensor | None = None) -> torch.Tensor:
    """How much all kept tokens attend to each token, averaged over heads and rows."""
    heads, n = attn.shape[-3], attn.shape[-2]
    if alive is None:
        alive = torch.ones(attn.shape[:-3] + (n,), dtype=torch.bool)
    rows = alive.to(attn.dtype)[..., None, :, None]
    n_kept = alive.sum(dim=-1, keepdim=True).to(attn.dtype)
    return (attn * rows).sum(dim=(-3, -2)) / (heads * n_kept)


def importance_scores(attn: torch.Tensor, alive: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "mean_column":
        return mean_column_attention_scores(attn, alive)
    if kind == "class_attention":
        return class_attention_scores(attn)
    raise ValueError(f"unknown importance score {kind!r}")


class Similarity(NamedTuple):
    score: torch.Tensor    # [B, N]; -inf outside set A
    partner: torch.Tensor  # [B, N] buffer index of the best set-B match
    set_a: torch.Tensor    # [B, N] bool, set-A tokens that have a partner


def bipartite_partition(alive: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Alternate kept tokens into sets A (odd rank) and B (even rank).

    Ranks count kept tokens in buffer order with CLS at rank 0, so the first
    kept patch lands in A. CLS belongs to B but is never a destination, so it
    is left out of the returned B.
    """
    rank = torch.cumsum(alive.long(), dim=-1) - 1
    idx = torch.arange(alive.shape[-1])
    set_a = alive & (rank % 2 == 1)
    set_b = alive & (rank % 2 == 0) & (idx != 0)
    return set_a, set_b


def bipartite_similarity(keys: torch.Tensor, alive: torch.Tensor) -> Similarity:
    """Best cosine similarity of each set-A token to any set-B token.

    ``keys`` is ``[B, H, N, dh]`` (averaged over heads here) or already
    ``[B, N, dh]``. Zero-norm keys get similarity -1 so they never merge.
    """
    if keys.dim() == 4:
        keys = keys.mean(dim=1)
    set_a, set_b = bipartite_partition(alive)
    # divide by the largest entry first so tiny keys do not underflow when squared
    scale = keys.abs().amax(dim=-1)
    zero = scale == 0
    if bool((zero & alive).any()):
        log.warning("zero-norm key vector(s); similarity set to -1")
    keys = keys / torch.where(zero, torch.ones_like(scale), scale)[..., None]
    norm = keys.norm(dim=-1)
    kn = keys / torch.where(zero, torch.ones_like(norm), norm)[..., None]
    cos = (kn @ kn.transpose(-1, -2)).clamp(-1.0, 1.0)
    cos = torch.where(zero[..., :, None] | zero[..., None, :], torch.full_like(cos, -1.0), cos)
    cos = cos.masked_fill(~set_b[..., None, :], float("-inf"))
    score, partner = cos.max(dim=-1)
    set_a = set_a & set_b.any(dim=-1, keepdim=True)
    score = torch.where(set_a, score, torch.full_like(score, float("-inf")))
    return Similarity(score, partner, set_a)


# --- reduction operators ----------------------------------------------------

def topk_mask(scores: torch.Tensor, candidates: torch.Tensor, k: int, largest: bool = True) -> torch.Tensor:
    """Select ``k`` candidates per row; ties go to the lower index.

    ``k`` is clamped to the number of candidates in each row.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    fill = float("-inf") if largest else float("inf")
    key = torch.where(candidates, scores.detach(), torch.full_like(scores, fill))
    order = torch.sort(key, dim=-1, descending=largest, stable=True).indices
    rank = torch.empty_like(order)
    rank.scatter_(-1, order, torch.arange(order.shape[-1]).expand_as(order).contiguous())
    k_eff = candidates.sum(dim=-1, keepdim=True).clamp(max=k)
    return candidates & (rank < k_eff)


def topk_select(scores, k: int, largest: bool = True) -> set[int]:
    """Indices of the ``k`` largest (or smallest) scores; lower index wins ties."""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    s = torch.as_tensor(np.asarray(scores, dtype=np.float64))
    if k > s.numel():
        raise ValueError(f"k={k} exceeds the {s.numel()} available scores")
    sel = topk_mask(s[None], torch.ones(1, s.numel(), dtype=torch.bool), k, largest)[0]
    return set(int(i) for i in torch.nonzero(sel).flatten())


def merge_tokens(x: torch.Tensor, sizes: torch.Tensor, src: torch.Tensor, partner: torch.Tensor,
                 mode: str = "weighted") -> tuple[torch.Tensor, torch.Tensor]:
    """Average every source token into its partner.

    ``weighted`` keeps size-weighted means, so a destination always holds the
    true mean of the patches it represents; ``pairwise`` applies
    ``(x_d + x_s) / 2`` one source at a time in buffer order. Returns the new
    token values and sizes; sources keep their entries and are expected to be
    masked out by the caller.
    """
    if not bool(src.any()):
        return x, sizes
    if mode == "weighted":
        n = x.shape[-2]
        w = sizes * src.to(sizes.dtype)
        onehot = torch.nn.functional.one_hot(partner, n).to(x.dtype) * src[..., None].to(x.dtype)
        route = onehot.transpose(-1, -2)  # [B, dst, src]
        add_x = route @ (w[..., None] * x)
        add_s = (route @ w[..., None])[..., 0]
        new_sizes = sizes + add_s
        merged = ((sizes[..., None] * x) + add_x) / new_sizes[..., None]
        x = torch.where((add_s > 0)[..., None], merged, x)
        return x, new_sizes
    if mode == "pairwise":
        x = x.clone()
        sizes = sizes.clone()
        for b, s in torch.nonzero(src).tolist():
            d = int(partner[b, s])
            x[b, d] = (x[b, d] + x[b, s]) / 2
            sizes[b, d] = sizes[b, d] + sizes[b, s]
        return x, sizes
    raise ValueError(f"unknown merge mode {mode!r}")


# --- traces -----------------------------------------------------------------

@dataclass
class ReductionTrace:
    """Per-sample, per-layer record of what each block removed.

    ``owner[i]`` gives, for original token ``i``, the buffer index of the
    token that currently represents it, or -1 once it has been pruned.
    """

    records: list[dict] = field(default_factory=list)

    def layers(self) -> int:
        return 1 + max((r["layer"] for r in self.records), default=-1)

    def samples(self) -> int:
        return 1 + max((r["sample"] for r in self.records), default=-1)

    def counts(self) -> tuple[np.ndarray, np.ndarray]:
        """``(merged, pruned)`` count arrays of shape ``[samples, layers]``."""
        merged = np.zeros((self.samples(), self.layers()), dtype=np.int64)
        pruned = np.zeros_like(merged)
        for r in self.records:
            merged[r["sample"], r["layer"]] = r["merged"]
            pruned[r["sample"], r["layer"]] = r["pruned"]
        return merged, pruned

    def record(self, sample: int, layer: int) -> dict:
        for r in self.records:
            if r["sample"] == sample and r["layer"] == layer:
                return r
        raise KeyError((sample, layer))

    def extend(self, other: "ReductionTrace", sample_offset: int = 0) -> None:
        for r in other.records:
            self.records.append({**r, "sample": r["sample"] + sample_offset})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "ReductionTrace":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


def build_trace(decisions: list[dict], n_tokens: int, sample_offset: int = 0) -> ReductionTrace:
    """Assemble a trace from the per-block decision tensors of a forward."""
    if not decisions:
        return ReductionTrace()
    batch = decisions[0]["merge_src"].shape[0]
    trace = ReductionTrace()
    for b in range(batch):
        owner = np.arange(n_tokens)
        for layer, dec in enumerate(decisions):
            ids = dec["ids"].numpy()
            src = dec["merge_src"][b].numpy()
            dst = dec["merge_dst"][b].numpy()
            pr = dec["prune"][b].numpy()
            assignments = []
            for s in np.nonzero(src)[0]:
                s_id, d_id = int(ids[s]), int(ids[dst[s]])
                assignments.append([s_id, d_id])
                owner[owner == s_id] = d_id
            pruned_ids = [int(ids[p]) for p in np.nonzero(pr)[0]]
            for p in pruned_ids:
                owner[owner == p] = -1
            trace.records.append({
                "sample": b + sample_offset,
                "layer": layer,
                "merged": len(assignments),
                "pruned": len(pruned_ids),
                "kept": int(len(set(owner[owner >= 0].tolist()))),
                "assignments": assignments,
                "pruned_ids": pruned_ids,
                "owner": owner.tolist(),
            })
    return trace
