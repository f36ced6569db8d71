"""Command-line entry point.

Every subcommand takes ``--config PATH`` (optional ``key = value`` file),
any number of ``--set key=value`` overrides and ``--out DIR``. Relative
``data_dir`` and ``checkpoint`` paths resolve against ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("ltmp")

COMMANDS = ("gen-data", "pretrain", "ltmp", "eval", "correlate", "visualize", "kdist", "flops-report")

HELP = {
    "gen-data": "render the synthetic train/val splits",
    "pretrain": "train the backbone without token reduction",
    "ltmp": "learn the merge/prune thresholds for one epoch",
    "eval": "top-1, r_FLOPs and tokens per block",
    "correlate": "Kendall tau between importance and similarity scores",
    "visualize": "per-block token retention pictures (PPM)",
    "kdist": "distribution of merged/pruned counts per block",
    "flops-report": "cost model for the configured shape",
}


def _dump(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True) + "\n"


class _JsonLines:
    def __init__(self, path: Path):
        self.f = open(path, "w", encoding="utf-8")

    def __call__(self, rec: dict) -> None:
        self.f.write(_dump(rec))
        self.f.flush()

    def close(self):
        self.f.close()


def _resolve(out: Path, value: str, default: Path) -> Path:
    if not value:
        return default
    p = Path(value)
    return p if p.is_absolute() else out / p


def _datasets(cfg: RunConfig, out: Path):
    from .data import read_dataset

    data_dir = _resolve(out, cfg.data_dir, out)
    train_p, val_p = data_dir / "train.ltds", data_dir / "val.ltds"
    for p in (train_p, val_p):
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run gen-data first")
    return read_dataset(train_p), read_dataset(val_p)


def _checkpoint(cfg: RunConfig, out: Path):
    from .checkpoint import load_checkpoint

    path = _resolve(out, cfg.checkpoint, out / "pretrain.ckpt")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    from .data import generate_dataset

    summary = generate_dataset(cfg.dataset_spec(), _resolve(out, cfg.data_dir, out))
    with open(out / "gen-data.jsonl", "w", encoding="utf-8") as f:
        for split, rec in summary.items():
            f.write(_dump({"split": split, **rec}))
    for split, rec in summary.items():
        print(f"{split}: {rec['count']} samples, chi2 vs uniform {rec['chi2']:.2f}")


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    from .checkpoint import save_checkpoint
    from .train import pretrain_backbone

    train, val = _datasets(cfg, out)
    sink = _JsonLines(out / "pretrain.jsonl")
    try:
        ckpt = pretrain_backbone(train, val, cfg.model_config(), cfg.pretrain_config(), logger=sink)
    finally:
        sink.close()
    save_checkpoint(out / "pretrain.ckpt", ckpt)
    print(f"pretrain: val top-1 {ckpt.metadata.get('val_acc')}")


def cmd_ltmp(cfg: RunConfig, out: Path) -> None:
    from .checkpoint import save_checkpoint
    from .train import evaluate, ltmp_finetune

    train, val = _datasets(cfg, out)
    ckpt = _checkpoint(cfg, out)
    sink = _JsonLines(out / "ltmp.jsonl")
    try:
        new, _ = ltmp_finetune(ckpt, train, cfg.ltmp_config(), tau=cfg.tau, logger=sink)
        metrics = evaluate(new, val, mode=cfg.eval_mode)
        sink({"phase": "ltmp-eval", **metrics})
    finally:
        sink.close()
    new.metadata.update({"val_top1": metrics["top1"], "val_r_flops": metrics["r_flops"]})
    save_checkpoint(out / "ltmp.ckpt", new)
    print(f"ltmp: r_target {cfg.r_target} -> r_FLOPs {metrics['r_flops']:.4f}, val top-1 {metrics['top1']:.4f}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    from .train import evaluate

    train, val = _datasets(cfg, out)
    ds = {"train": train, "val": val}.get(cfg.eval_split)
    if ds is None:
        raise ConfigError(f"eval_split must be 'train' or 'val', got {cfg.eval_split!r}")
    metrics = evaluate(_checkpoint(cfg, out), ds, mode=cfg.eval_mode)
    metrics["split"] = cfg.eval_split
    (out / "eval.jsonl").write_text(_dump(metrics), encoding="utf-8")
    print(f"top-1 {metrics['top1']:.4f}  r_FLOPs {metrics['r_flops']:.4f}  "
          f"tokens/layer {' '.join(f'{t:.1f}' for t in metrics['tokens_per_layer'])}")


def _analysis_subset(cfg: RunConfig, out: Path):
    _, val = _datasets(cfg, out)
    n = len(val) if cfg.analysis_samples <= 0 else min(cfg.analysis_samples, len(val))
    return val.subset(slice(0, n))


def cmd_correlate(cfg: RunConfig, out: Path) -> None:
    from .analysis import correlation_report, format_correlation

    model = _checkpoint(cfg, out).to_model()
    report = correlation_report(model, _analysis_subset(cfg, out), k=cfg.topk)
    (out / "correlation.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    text = format_correlation(report)
    (out / "correlation.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_visualize(cfg: RunConfig, out: Path) -> None:
    from .viz import visualize_tokens

    _, val = _datasets(cfg, out)
    if not 0 <= cfg.viz_index < len(val):
        raise ConfigError(f"viz_index {cfg.viz_index} outside the validation split")
    model = _checkpoint(cfg, out).to_model()
    paths = visualize_tokens(model, val.images[cfg.viz_index], out / "viz", scale=cfg.viz_scale)
    print(f"wrote {len(paths)} panels to {out / 'viz'}")


def cmd_kdist(cfg: RunConfig, out: Path) -> None:
    from .analysis import format_k_distribution, k_distribution_report

    model = _checkpoint(cfg, out).to_model()
    report = k_distribution_report(model, _analysis_subset(cfg, out))
    (out / "kdist.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    text = format_k_distribution(report)
    (out / "kdist.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_flops_report(cfg: RunConfig, out: Path) -> None:
    from .flops import phi_block, phi_head, phi_patch_embed

    mc = cfg.model_config()
    n, d = mc.n_tokens, mc.embed_dim
    msa, mlp, blk = phi_block(n, d)
    pe = phi_patch_embed(mc.n_patches, mc.patch_size, mc.in_chans, d)
    head = phi_head(d, mc.classes)
    report = {
        "n_tokens": n, "embed_dim": d, "blocks": mc.blocks,
        "phi_msa": msa, "phi_mlp": mlp, "phi_block": blk,
        "blocks_total": mc.blocks * blk, "patch_embed": pe, "head": head,
        "total": pe + mc.blocks * blk + head,
        "block_share": mc.blocks * blk / (pe + mc.blocks * blk + head),
    }
    (out / "flops.json").write_text(_dump(report), encoding="utf-8")
    print(f"per block: MSA {msa:,}  MLP {mlp:,}  block {blk:,}")
    print(f"block FLOPs total ({mc.blocks} blocks): {mc.blocks * blk:.4e}")
    print(f"with patch embedding and head: {report['total']:.4e} (blocks {report['block_share']:.2%})")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "ltmp": cmd_ltmp,
    "eval": cmd_eval,
    "correlate": cmd_correlate,
    "visualize": cmd_visualize,
    "kdist": cmd_kdist,
    "flops-report": cmd_flops_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltmp", description="Learned-threshold token merging and pruning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"ltmp: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"ltmp: error: {e}", file=sys.stderr)
        return 1
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        HANDLERS[args.command](cfg, args.out)
    except ConfigError as e:
        print(f"ltmp: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and exit nonzero
        log.debug("failure", exc_info=True)
        print(f"ltmp: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())
