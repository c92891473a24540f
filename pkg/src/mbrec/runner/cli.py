"""Command-line entry point: ``mbrec <command> --config cfg.yaml [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from .. import dataio
from ..eval import early_stop_signal, evaluate_embeddings
from ..model import CASCADE_MODES, ModelConfig
from ..optim import ablation_grid, gradcheck
from . import experiments
from .config import ConfigError, ExperimentConfig, load_config
from .trainer import TrainingDiverged, deterministic_threads, load_for_eval

log = logging.getLogger("mbrec")

COMMANDS = ("prepare", "train", "evaluate", "ablate", "sweep", "baseline", "order", "gradcheck")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML key/value experiment config")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS for bit-reproducible runs")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="prepared dataset directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mbrec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="preprocess a raw log into a dataset")
    t = sub.add_parser("train", parents=[common], help="train with validation early stopping")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.*")
    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    a = sub.add_parser("ablate", parents=[common], help="module ablation study")
    a.add_argument("--variants", help="comma-separated subset of variant names")
    s = sub.add_parser("sweep", parents=[common], help="grid over one hyperparameter")
    s.add_argument("--param", required=True, choices=sorted(experiments.SWEEPABLE))
    s.add_argument("--values", required=True, help="comma-separated values")
    b = sub.add_parser("baseline", parents=[common], help="MF-BPR / unified LightGCN")
    b.add_argument("--which", default="mf_bpr,unified_lightgcn")
    b.add_argument("--no-full", action="store_true", help="skip the full model row")
    o = sub.add_parser("order", parents=[common], help="train with a permuted behavior chain")
    o.add_argument("--behaviors", required=True, help="comma-separated chain, target last")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--all", action="store_true",
                   help="every cascade mode, gate sharing and ablation combination")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.deterministic:
        changes["deterministic"] = True
    if args.dataset:
        changes["dataset"] = args.dataset
    return cfg.replace(**changes) if changes else cfg


def _dataset(cfg: ExperimentConfig) -> dataio.Dataset:
    if not cfg.dataset:
        raise ConfigError("no dataset: set 'dataset' in the config or pass --dataset")
    ds = dataio.load_dataset(cfg.dataset)
    missing = [b for b in cfg.behaviors if b not in ds.behaviors]
    if missing:
        raise ConfigError(f"dataset lacks behaviors {missing}")
    return ds


def _out(args, default: str) -> str:
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def cmd_prepare(args, cfg) -> int:
    out = _out(args, cfg.dataset or "prepared")
    ds = experiments.prepare(cfg, out, seed=cfg.seeds[0])
    header, rows = experiments.statistics_rows(ds)
    print(experiments.format_table(header, rows))
    print(f"dataset written to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    ds = _dataset(cfg)
    out = _out(args, "runs/train")
    for seed in cfg.seeds:
        sub = out if len(cfg.seeds) == 1 else os.path.join(out, f"seed{seed}")
        result = experiments.run_train(cfg, ds, seed, sub, resume=args.resume)
        print(f"seed={seed} best_epoch={result.best_epoch} val_signal={result.best_signal:.6f}")
        print(result.test_report.table())
    return 0


def cmd_evaluate(args, cfg) -> int:
    ds = _dataset(cfg)
    with deterministic_threads(cfg.deterministic):
        model, ds, params = load_for_eval(cfg, ds, args.checkpoint)
        rep = evaluate_embeddings(model.forward(params).final, ds, args.split, cfg.cutoffs,
                                  model.behaviors)
    print(rep.table())
    for line in rep.lines(f"{args.split}."):
        print(line)
    print(f"signal={early_stop_signal(rep):.6f}")
    if args.out:
        rows = [[b, k, m, rep.get(b, m, k)] for b in rep.behaviors if rep.values[b]
                for k in rep.cutoffs for m in ("prec", "rec", "ndcg", "hr")]
        experiments.write_tsv(os.path.join(_out(args, ""), f"{args.split}_metrics.tsv"),
                              ["behavior", "K", "metric", "value"], rows)
    return 0


def cmd_ablate(args, cfg) -> int:
    variants = args.variants.split(",") if args.variants else None
    if variants:
        unknown = [v for v in variants if v not in experiments.ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown variants {unknown}; choose from {list(experiments.ABLATIONS)}")
    rep = experiments.ablate(cfg, _dataset(cfg), _out(args, "runs/ablate"), variants)
    print(experiments.format_table(rep.header(), rep.rows()))
    return 0


def cmd_sweep(args, cfg) -> int:
    values = [float(v) for v in args.values.split(",")]
    rep = experiments.sweep(cfg, _dataset(cfg), args.param, values, _out(args, "runs/sweep"))
    print(experiments.format_table(rep.header(), rep.rows()))
    print(f"best {rep.parameter}={rep.best_value:g}")
    return 0


def cmd_baseline(args, cfg) -> int:
    which = [w for w in args.which.split(",") if w]
    table = experiments.baseline(cfg, _dataset(cfg), _out(args, "runs/baseline"), which,
                                 include_full=not args.no_full)
    rows = [[n] + [table[n][b] for b in cfg.behaviors] for n in table]
    print(experiments.format_table(["model"] + [f"{b}.ndcg@5" for b in cfg.behaviors], rows))
    return 0


def cmd_order(args, cfg) -> int:
    chain = [b for b in args.behaviors.split(",") if b]
    table = experiments.order(cfg, _dataset(cfg), chain, _out(args, "runs/order"))
    rows = [[n] + [table[n][b] for b in cfg.behaviors] for n in table]
    print(experiments.format_table(["chain"] + [f"{b}.ndcg@5" for b in cfg.behaviors], rows))
    return 0


def gradcheck_configs(cfg: ExperimentConfig, exhaustive: bool) -> List[ModelConfig]:
    base = dict(dim=5, behaviors=cfg.behaviors, layers=cfg.layer_counts(),
                global_layers=cfg.global_layers, norm_epsilon=cfg.norm_epsilon)
    if not exhaustive:
        return [ModelConfig(**base, cascading_input_mode=cfg.cascading_input_mode,
                            enable_cgf=cfg.enable_cgf, enable_gce=cfg.enable_gce,
                            enable_cpa=cfg.enable_cpa, share_gce_gate=cfg.share_gce_gate)]
    out = []
    for mode in CASCADE_MODES:
        for share in (False, True):
            for cgf, gce, cpa in ablation_grid():
                out.append(ModelConfig(**base, cascading_input_mode=mode, share_gce_gate=share,
                                       enable_cgf=cgf, enable_gce=gce, enable_cpa=cpa))
    return out


def cmd_gradcheck(args, cfg) -> int:
    ok = True
    for mcfg in gradcheck_configs(cfg, args.all):
        rep = gradcheck(mcfg, seed=cfg.seeds[0])
        print(f"# mode={mcfg.cascading_input_mode} share_gce_gate={mcfg.share_gce_gate} "
              f"cgf={mcfg.enable_cgf} gce={mcfg.enable_gce} cpa={mcfg.enable_cpa}")
        print(rep.format())
        ok &= rep.passed
    return 0 if ok else 1


HANDLERS = {
    "prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "baseline": cmd_baseline, "order": cmd_order, "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        return HANDLERS[args.command](args, cfg)
    except (ConfigError, dataio.DataError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
