"""FLOPs cost model, differentiable reduction factor and the budget loss.

FLOPs are counted as multiply-adds. ``n`` always denotes the full token
count of the unreduced model, CLS included.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch


def phi_msa(n, d):
    return 4 * n * d**2 + 2 * n**2 * d


def phi_mlp(n, d):
    return 8 * n * d**2


def phi_block(n, d):
    """``(msa, mlp, block)`` multiply-adds of one transformer block on ``n`` tokens."""
    if isinstance(n, (int, float)) and n < 0:
        raise ValueError(f"n_tokens must be >= 0, got {n}")
    msa, mlp = phi_msa(n, d), phi_mlp(n, d)
    return msa, mlp, msa + mlp


def phi_patch_embed(n_patches: int, patch_size: int, in_chans: int, d: int) -> int:
    return n_patches * patch_size**2 * in_chans * d


def phi_head(d: int, classes: int) -> int:
    # one classification head applied to the CLS token only
    return d * classes


def r_flops(mbar, n: int, d: int):
    """Fraction of baseline block FLOPs left after reduction.

    ``mbar`` holds the kept fractions ``[m0, m1, ..., mL]`` along the last
    axis with ``m0 = 1``; block ``l`` runs attention on ``m_{l-1} n`` tokens
    and its MLP on ``m_l n`` tokens. Differentiable when ``mbar`` is a tensor.
    """
    if not isinstance(mbar, torch.Tensor):
        mbar = torch.as_tensor(mbar, dtype=torch.float64)
    blocks = mbar.shape[-1] - 1
    if blocks < 1:
        raise ValueError("mbar needs the leading m0 entry plus one entry per block")
    before, after = mbar[..., :-1], mbar[..., 1:]
    num = 2 * before * n * d**2 + (before * n) ** 2 * d + 4 * after * n * d**2
    den = 6 * n * d**2 + n**2 * d
    return (num / den).sum(dim=-1) / blocks


def r_flops_exact(mbar, n_patches: int, patch_size: int, in_chans: int, d: int, classes: int):
    """Reduction factor including patch-embedding and head FLOPs.

    The head term sits outside the block sum: a single classification head
    on the CLS token, whose cost does not depend on the kept tokens.
    """
    if not isinstance(mbar, torch.Tensor):
        mbar = torch.as_tensor(mbar, dtype=torch.float64)
    n = n_patches + 1
    blocks = mbar.shape[-1] - 1
    pe = phi_patch_embed(n_patches, patch_size, in_chans, d)
    head = phi_head(d, classes)
    total = pe + blocks * phi_block(n, d)[2] + head
    before, after = mbar[..., :-1], mbar[..., 1:]
    blk = (phi_msa(before * n, d) + phi_mlp(after * n, d)).sum(dim=-1)
    return (pe + blk + head) / total


def reg_loss(r, r_target):
    """Squared distance between the achieved and the target reduction factor."""
    return (r_target - r) ** 2


def total_loss(ce, reg, lam):
    return ce + lam * reg


@dataclass
class LossConfig:
    r_target: float = 1.0
    lam: float = 10.0
    tau: float = 0.1

    def __post_init__(self):
        if not 0 < self.r_target <= 1:
            raise ValueError(f"r_target must lie in (0, 1], got {self.r_target}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class FlopsReport:
    n: int
    d: int
    mbar: list[float]
    phi_msa: list[float] = field(default_factory=list)
    phi_mlp: list[float] = field(default_factory=list)
    phi_block: list[float] = field(default_factory=list)
    r_flops: float = 1.0
    total: float = 0.0
    baseline_total: float = 0.0

    @classmethod
    def from_mbar(cls, mbar, n: int, d: int) -> "FlopsReport":
        m = [float(v) for v in torch.as_tensor(mbar, dtype=torch.float64).flatten()]
        msa = [float(phi_msa(m[i] * n, d)) for i in range(len(m) - 1)]
        mlp = [float(phi_mlp(m[i + 1] * n, d)) for i in range(len(m) - 1)]
        blk = [a + b for a, b in zip(msa, mlp)]
        return cls(
            n=n, d=d, mbar=m, phi_msa=msa, phi_mlp=mlp, phi_block=blk,
            r_flops=float(r_flops(torch.tensor(m), n, d)),
            total=float(sum(blk)),
            baseline_total=float((len(m) - 1) * phi_block(n, d)[2]),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)
