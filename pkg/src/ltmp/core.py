"""Dense tensor kernels and reverse-mode gradients.

All kernels take and return ``torch.Tensor`` objects and record onto the
torch autograd graph, which serves as the reverse-mode engine. Every kernel
rejects non-finite results so NaN/Inf never propagates silently.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

DTYPE = torch.float64
LN_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces or receives NaN/Inf values."""


def _check_finite(t: torch.Tensor, name: str) -> torch.Tensor:
    # a sum is finite iff every term is (barring overflow, which is also an error)
    if not math.isfinite(float(t.detach().sum())):
        raise NonFiniteError(f"{name}: non-finite values in tensor of shape {tuple(t.shape)}")
    return t


def as_tensor(data, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    return torch.as_tensor(data, dtype=dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``a @ b`` with shape validation."""
    if a.dim() < 2 or b.dim() < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner extents disagree: {tuple(a.shape)} @ {tuple(b.shape)} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    return _check_finite(a @ b, "matmul")


def softmax_rows(a: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, shifted by the row max."""
    _check_finite(a, "softmax_rows input")
    shifted = a - a.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def masked_softmax(a: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row softmax where column ``j`` is weighted by ``mask[..., j]``.

    ``S_ij = exp(A_ij) m_j / sum_k exp(A_ik) m_k``. Columns with ``m_j == 0``
    come out exactly zero, so the result equals a plain softmax over the
    surviving columns re-embedded with zeros. ``mask`` broadcasts against
    the column axis of ``a``.
    """
    _check_finite(a, "masked_softmax input")
    dead = mask <= 0
    row_max = a.detach().masked_fill(dead, -math.inf).amax(dim=-1, keepdim=True)
    if not math.isfinite(float(row_max.sum())):
        raise NonFiniteError("masked_softmax: a row has no live column")
    # dead columns get exponent 0 so exp() cannot overflow before the zero weight
    e = torch.exp((a - row_max).masked_fill(dead, 0.0)) * mask
    denom = e.sum(dim=-1, keepdim=True)
    assert bool((denom > 0).all()), "masked_softmax: zero denominator"
    return _check_finite(e / denom, "masked_softmax")


def layer_norm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LN_EPS
) -> torch.Tensor:
    """Per-token normalization over the trailing (embedding) axis, then affine."""
    if x.shape[-1] < 1:
        raise ValueError("layer_norm needs d >= 1")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps) * gamma + beta
    return _check_finite(out, "layer_norm")


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form
    return F.gelu(x, approximate="none")


def grad(loss: torch.Tensor, trainables: Iterable[torch.Tensor] | Mapping[str, torch.Tensor]):
    """Gradients of a scalar ``loss`` with respect to each trainable.

    Accepts a sequence (returns a list) or a name->tensor mapping (returns a
    dict). Trainables the loss does not depend on get an exact zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {tuple(loss.shape)}")
    _check_finite(loss, "loss")
    if isinstance(trainables, Mapping):
        names = list(trainables)
        tensors = [trainables[k] for k in names]
    else:
        names = None
        tensors = list(trainables)
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True, retain_graph=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    if names is not None:
        return dict(zip(names, grads))
    return grads
