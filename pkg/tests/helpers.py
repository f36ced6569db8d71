"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import torch

from ltmp.model import LTMPViT, ModelConfig

TOY = ModelConfig()


def random_model(seed: int, cfg: ModelConfig = TOY, scale: float = 0.3) -> LTMPViT:
    """Model with weights large enough that attention is far from uniform."""
    model = LTMPViT(cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.backbone_parameters():
            noise = torch.randn(p.shape, generator=g, dtype=p.dtype)
            if "norm" in name and name.endswith("weight"):
                p.copy_(1 + 0.1 * noise)
            else:
                p.copy_(scale * noise)
    return model


def random_images(seed: int, batch: int, cfg: ModelConfig = TOY) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, cfg.image_size, cfg.image_size, cfg.in_chans, generator=g, dtype=torch.float64)


def random_thresholds(seed: int, cfg: ModelConfig = TOY, batch: int | None = None):
    """Merge thresholds across the cosine range, prune thresholds around 1/n."""
    rng = np.random.default_rng(seed)
    shape = (cfg.blocks,) if batch is None else (batch, cfg.blocks)
    merge = rng.uniform(-0.2, 1.0, size=shape)
    prune = rng.uniform(0.0, 2.0 / cfg.n_tokens, size=shape)
    return torch.from_numpy(merge), torch.from_numpy(prune)


def rel_err(a, b) -> float:
    a = torch.as_tensor(a, dtype=torch.float64).detach()
    b = torch.as_tensor(b, dtype=torch.float64).detach()
    scale = max(float(a.abs().max()), float(b.abs().max()))
    return float((a - b).abs().max()) / scale if scale > 0 else 0.0


# --- oracles ----------------------------------------------------------------

def naive_matmul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def reduced_softmax(a, keep):
    """Softmax over the kept columns only, re-embedded with zeros."""
    a = np.asarray(a, dtype=np.float64)
    cols = [j for j, k in enumerate(keep) if k]
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        row = [math.exp(a[i, j]) for j in cols]
        total = sum(row)
        for j, v in zip(cols, row):
            out[i, j] = v / total
    return out


def brute_kendall(x, y) -> float:
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = (x[i] > x[j]) - (x[i] < x[j])
            dy = (y[i] > y[j]) - (y[i] < y[j])
            if dx == 0 and dy == 0:
                tx += 1
                ty += 1
            elif dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif dx == dy:
                conc += 1
            else:
                disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


def _exact_cosine(u, v) -> float:
    """Cosine in exact rational arithmetic, one rounding at the end; -1 for a zero vector."""
    u, v = [Fraction(float(a)) for a in u], [Fraction(float(b)) for b in v]
    uu, vv = sum(a * a for a in u), sum(b * b for b in v)
    if uu == 0 or vv == 0:
        return -1.0
    dot = sum(a * b for a, b in zip(u, v))
    return math.copysign(math.sqrt(float(dot * dot / (uu * vv))), dot) if dot else 0.0


def pairwise_similarity_oracle(keys, alive):
    """Exhaustive cosine search over the alternating partition of kept tokens.

    ``keys`` is ``[N, dh]`` (already head-averaged), ``alive`` a list of bools.
    Returns ``{a_index: (best_cos, partner)}``.
    """
    keys = np.asarray(keys, dtype=np.float64)
    kept = [i for i, a in enumerate(alive) if a]
    set_a = kept[1::2]
    set_b = [i for i in kept[0::2] if i != 0]
    out = {}
    if not set_b:
        return out
    for i in set_a:
        best, arg = -math.inf, None
        for j in set_b:
            c = _exact_cosine(keys[i], keys[j])
            if c > best:
                best, arg = c, j
        out[i] = (best, arg)
    return out


def central_difference(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar ``f`` at every entry of ``x``."""
    g = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        g.reshape(-1)[i] = (float(f(plus.reshape(x.shape))) - float(f(minus.reshape(x.shape)))) / (2 * h)
    return g


# --- acceptance reporting ----------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


class criterion:
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"criterion {self.number} [{status}] {self.title}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE[self.number] = line
        print(line)
        return False
