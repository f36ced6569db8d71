"""Score correlation and reduction-distribution reports."""

from __future__ import annotations

import logging

import numpy as np
import torch

from .data import Dataset, to_float
from .model import LTMPViT

log = logging.getLogger(__name__)


def kendall_tau(x, y) -> float:
    """Tie-corrected Kendall rank correlation (tau-b) over all pairs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"kendall_tau needs two 1-d vectors of equal length, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise ValueError("kendall_tau needs at least two observations")
    iu = np.triu_indices(n, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu].astype(np.int64)
    sy = np.sign(y[:, None] - y[None, :])[iu].astype(np.int64)
    s = int((sx * sy).sum())
    n0 = n * (n - 1) // 2
    n1 = int((sx == 0).sum())
    n2 = int((sy == 0).sum())
    if n0 == n1 or n0 == n2:
        raise ValueError("kendall_tau is undefined when either vector is constant")
    return s / np.sqrt(float(n0 - n1) * float(n0 - n2))


@torch.no_grad()
def collect_scores(model: LTMPViT, ds: Dataset, k: int, batch_size: int = 128) -> list[list[dict]]:
    """Importance and similarity scores per layer under fixed top-k merging and pruning.

    Returns ``records[layer]``: one dict per sample holding the scores of the
    set-A tokens (the only tokens that get a similarity score).
    """
    x_all = to_float(ds.images)
    records: list[list[dict]] = [[] for _ in range(model.cfg.blocks)]
    clamped = 0
    for start in range(0, len(ds), batch_size):
        out = model(x_all[start:start + batch_size], mode="train", order="topk_both", topk=k, collect=True)
        for layer, rec in enumerate(out.scores):
            set_a = rec["set_a"]
            n_alive = rec["alive"].sum(-1)
            clamped += int((set_a.sum(-1) < k).sum())
            for b in range(set_a.shape[0]):
                sel = set_a[b]
                records[layer].append({
                    "importance": rec["importance"][b][sel].numpy(),
                    "similarity": rec["similarity"][b][sel].numpy(),
                    "kept": int(n_alive[b]),
                })
    if clamped:
        log.info("top-k clamped to the available set-A tokens in %d (sample, layer) cases", clamped)
    return records


def layer_tau(records: list[list[dict]]) -> list[dict]:
    """Mean per-sample Kendall tau between importance and similarity, per layer."""
    rows = []
    for layer, recs in enumerate(records):
        taus, skipped = [], 0
        for r in recs:
            try:
                taus.append(kendall_tau(r["importance"], r["similarity"]))
            except ValueError:
                skipped += 1
        rows.append({
            "layer": layer + 1,
            "tau": float(np.mean(taus)) if taus else None,
            "tau_std": float(np.std(taus)) if taus else None,
            "samples": len(taus),
            "skipped": skipped,
        })
    return rows


def correlation_report(model: LTMPViT, ds: Dataset, k: int = 8) -> dict:
    rows = layer_tau(collect_scores(model, ds, k))
    return {
        "k": k,
        "aggregation": "tau computed per sample over set-A tokens, then averaged over samples",
        "importance_score": model.cfg.importance_score,
        "layers": rows,
    }


def format_correlation(report: dict) -> str:
    lines = [f"# Kendall tau, importance vs similarity (set-A tokens, top-k={report['k']})",
             f"# {report['aggregation']}",
             "layer    tau   std  samples skipped"]
    for r in report["layers"]:
        tau = "   nan" if r["tau"] is None else f"{r['tau']:6.3f}"
        std = "  nan" if r["tau_std"] is None else f"{r['tau_std']:5.3f}"
        lines.append(f"{r['layer']:5d} {tau} {std} {r['samples']:8d} {r['skipped']:7d}")
    return "\n".join(lines) + "\n"


@torch.no_grad()
def reduction_counts(model: LTMPViT, ds: Dataset, mode: str = "inference", order: str | None = None):
    """``(merged, pruned)`` count arrays ``[samples, layers]`` plus the full trace."""
    from .reduction import ReductionTrace

    x_all = to_float(ds.images)
    trace = ReductionTrace()
    n_tok = model.cfg.n_tokens
    if mode == "inference":
        for i in range(len(ds)):
            out = model(x_all[i:i + 1], mode="inference", order=order, collect=True)
            trace.extend(out.trace(n_tok), sample_offset=i)
    else:
        for start in range(0, len(ds), 128):
            out = model(x_all[start:start + 128], mode="train", order=order, collect=True)
            trace.extend(out.trace(n_tok), sample_offset=start)
    merged, pruned = trace.counts()
    return merged, pruned, trace


def _distribution(values: np.ndarray) -> dict:
    values = np.asarray(values, dtype=np.int64)
    hist = np.bincount(values) if len(values) else np.zeros(0, dtype=np.int64)
    q = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0]) if len(values) else [float("nan")] * 5
    return {
        "histogram": {str(i): int(c) for i, c in enumerate(hist) if c},
        "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]), "q3": float(q[3]), "max": float(q[4]),
        "mean": float(values.mean()) if len(values) else float("nan"),
    }


def k_distribution_report(model: LTMPViT, ds: Dataset, order: str | None = None) -> dict:
    """Per-layer distribution of how many tokens merging and pruning removed."""
    merged, pruned, _ = reduction_counts(model, ds, mode="inference", order=order)
    layers = []
    for l in range(merged.shape[1]):
        layers.append({"layer": l + 1, "merged": _distribution(merged[:, l]), "pruned": _distribution(pruned[:, l])})
    removed = merged.sum(1) + pruned.sum(1)
    return {
        "samples": int(merged.shape[0]),
        "order": order or model.cfg.reduction_order,
        "n_patches": model.cfg.n_patches,
        "max_removed_per_sample": int(removed.max()) if len(removed) else 0,
        "layers": layers,
    }


def format_k_distribution(report: dict) -> str:
    lines = [f"# tokens removed per layer ({report['order']}, {report['samples']} samples)",
             "layer | merged: q1 med q3  mean | pruned: q1 med q3  mean"]
    for r in report["layers"]:
        m, p = r["merged"], r["pruned"]
        lines.append(
            f"{r['layer']:5d} | {m['q1']:9.1f} {m['median']:4.1f} {m['q3']:4.1f} {m['mean']:5.2f}"
            f" | {p['q1']:9.1f} {p['median']:4.1f} {p['q3']:4.1f} {p['mean']:5.2f}"
        )
    return "\n".join(lines) + "\n"
