"""Experiment drivers behind the CLI subcommands.

Each driver trains the needed runs, writes tab-delimited result tables and,
when enabled, matching figures into the output directory, and returns the
table rows for programmatic use.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import dataio
from ..eval import early_stop_signal
from . import plots
from .config import ExperimentConfig
from .synthetic import SyntheticSpec, generate_events
from .trainer import TrainResult, train

ABLATIONS = {
    "full": {},
    "w/o GCE": {"enable_gce": False},
    "w/o CPA": {"enable_cpa": False},
    # removing the feedback gate removes the global-context path with it
    "w/o CGF": {"enable_cgf": False, "enable_gce": False},
    "w/o GCE&CPA": {"enable_gce": False, "enable_cpa": False},
    "w/o GCE&CPA&CGF": {"enable_gce": False, "enable_cpa": False, "enable_cgf": False},
}

SWEEPABLE = {"lam": "lam", "lambda": "lam", "tau": "tau", "L": "global_layers",
             "global_layers": "global_layers", "lr": "lr"}


def write_tsv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(f"{x:.6f}" if isinstance(x, float) else str(x) for x in r) + "\n")
    return path


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[f"{x:.4f}" if isinstance(x, float) else str(x) for x in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    out.append("  ".join("-" * w for w in widths))
    out += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(out)


# --------------------------------------------------------------------------
# prepare


def prepare(cfg: ExperimentConfig, out_dir: str, seed: int = 0) -> dataio.Dataset:
    """Preprocess a raw log (or generate a synthetic one) into a dataset directory."""
    if cfg.synthetic is not None:
        spec = SyntheticSpec.from_dict(dict(cfg.synthetic, behaviors=cfg.behaviors))
        events = generate_events(spec, seed)
    elif cfg.raw:
        events = dataio.load_events(cfg.raw, cfg.behaviors, cfg.columns, cfg.delimiter)
    else:
        raise ValueError("config needs either 'raw' or 'synthetic'")
    ds = dataio.preprocess(events, cfg.behaviors, cfg.item_min_purchases,
                           cfg.user_min_purchases, cfg.train_frac, cfg.val_frac)
    dataio.save_dataset(ds, out_dir)
    header, rows = statistics_rows(ds)
    write_tsv(os.path.join(out_dir, "statistics.tsv"), header, rows)
    return ds


def statistics_rows(ds: dataio.Dataset):
    stats = dataio.split_statistics(ds)
    header = ["statistic", "total", "density_permille", "train", "val", "test"]
    rows = []
    for name, r in stats.items():
        dens = f"{r['density']:.2f}" if "density" in r else "-"
        rows.append([name, r["total"], dens, r["train"], r["val"], r["test"]])
    return header, rows


# --------------------------------------------------------------------------
# helpers


def _seed_runs(cfg: ExperimentConfig, dataset, out_dir: Optional[str], tag: str,
               behaviors=None) -> List[TrainResult]:
    results = []
    for seed in cfg.seeds:
        sub = os.path.join(out_dir, tag, f"seed{seed}") if out_dir else None
        results.append(train(cfg, dataset, seed, sub, behaviors=behaviors))
    return results


def _mean_metric(results: Sequence[TrainResult], behavior: str, metric: str = "ndcg",
                 k: int = 5) -> float:
    vals = [r.test_report.get(behavior, metric, k) for r in results]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def _slug(name: str) -> str:
    return name.replace("/", "").replace("&", "_").replace(" ", "_").lower()


# --------------------------------------------------------------------------
# train / ablate / sweep / baseline / order


def run_train(cfg: ExperimentConfig, dataset, seed: int, out_dir: Optional[str],
              resume: bool = False) -> TrainResult:
    result = train(cfg, dataset, seed, out_dir, resume=resume)
    if out_dir:
        rep = result.test_report
        rows = [[b, k, m, rep.get(b, m, k)] for b in rep.behaviors if rep.values[b]
                for k in rep.cutoffs for m in ("prec", "rec", "ndcg", "hr")]
        write_tsv(os.path.join(out_dir, "test_metrics.tsv"), ["behavior", "K", "metric", "value"], rows)
        if cfg.save_figures and result.history:
            plots.plot_training_curve(result.history, rep.behaviors,
                                      os.path.join(out_dir, "training_curve.png"))
    return result


@dataclass
class AblationReport:
    behaviors: List[str]
    ndcg: Dict[str, Dict[str, float]]
    deltas: Dict[str, Dict[str, float]]
    per_seed: Dict[str, List[TrainResult]] = field(default_factory=dict)

    def rows(self):
        return [[v] + [self.ndcg[v][b] for b in self.behaviors]
                + [self.deltas[v][b] for b in self.behaviors] for v in self.ndcg]

    def header(self):
        return (["variant"] + [f"{b}.ndcg@5" for b in self.behaviors]
                + [f"{b}.delta" for b in self.behaviors])


def ablate(cfg: ExperimentConfig, dataset, out_dir: Optional[str],
           variants: Optional[Sequence[str]] = None) -> AblationReport:
    """Train every ablation variant with identical seeds; NDCG@5 deltas vs full."""
    names = list(variants or ABLATIONS)
    if "full" not in names:
        names = ["full"] + names
    behaviors = list(cfg.behaviors)
    ndcg, per_seed = {}, {}
    for name in names:
        vcfg = cfg.replace(**ABLATIONS[name])
        results = _seed_runs(vcfg, dataset, out_dir, f"ablate/{_slug(name)}")
        per_seed[name] = results
        ndcg[name] = {b: _mean_metric(results, b) for b in behaviors}
    deltas = {n: {b: ndcg[n][b] - ndcg["full"][b] for b in behaviors} for n in names}
    rep = AblationReport(behaviors, ndcg, deltas, per_seed)
    if out_dir:
        write_tsv(os.path.join(out_dir, "ablation.tsv"), rep.header(), rep.rows())
        if cfg.save_figures:
            plots.plot_ablation(deltas, behaviors, os.path.join(out_dir, "ablation.png"))
    return rep


@dataclass
class SweepReport:
    parameter: str
    values: List[float]
    val_signal: List[float]
    test: List[Dict[str, float]]
    best_index: int

    @property
    def best_value(self):
        return self.values[self.best_index]

    def header(self):
        keys = sorted(self.test[0]) if self.test else []
        return [self.parameter, "val_signal"] + keys + ["best"]

    def rows(self):
        keys = sorted(self.test[0]) if self.test else []
        return [[v, s] + [t[k] for k in keys] + ["*" if i == self.best_index else ""]
                for i, (v, s, t) in enumerate(zip(self.values, self.val_signal, self.test))]


def sweep(cfg: ExperimentConfig, dataset, parameter: str, values: Sequence[float],
          out_dir: Optional[str]) -> SweepReport:
    """Grid over one hyperparameter; the best value maximizes the validation signal."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"cannot sweep {parameter!r}; choose from {sorted(SWEEPABLE)}")
    field_name = SWEEPABLE[parameter]
    signals, tests = [], []
    for v in values:
        v = int(v) if field_name == "global_layers" else float(v)
        vcfg = cfg.replace(**{field_name: v})
        results = _seed_runs(vcfg, dataset, out_dir, f"sweep/{field_name}={v:g}")
        signals.append(float(np.mean([early_stop_signal(r.val_report) for r in results])))
        tests.append({f"{b}.{m}@5": _mean_metric(results, b, m)
                      for b in cfg.behaviors for m in ("ndcg", "hr")})
    best = int(np.argmax(signals))
    rep = SweepReport(field_name, [float(v) for v in values], signals, tests, best)
    if out_dir:
        write_tsv(os.path.join(out_dir, f"sweep_{field_name}.tsv"), rep.header(), rep.rows())
        if cfg.save_figures:
            series = {f"{b} NDCG@5": [t[f"{b}.ndcg@5"] for t in tests] for b in cfg.behaviors}
            plots.plot_sweep(field_name, rep.values, series,
                             os.path.join(out_dir, f"sweep_{field_name}.png"))
    return rep


def baseline(cfg: ExperimentConfig, dataset, out_dir: Optional[str],
             which: Sequence[str] = ("mf_bpr", "unified_lightgcn"),
             include_full: bool = True) -> Dict[str, Dict[str, float]]:
    """Test NDCG@5 per behavior for the baselines (and the full model)."""
    names = list(which) + (["full"] if include_full else [])
    table = {}
    for name in names:
        bcfg = cfg.replace(baseline="none" if name == "full" else name)
        results = _seed_runs(bcfg, dataset, out_dir, f"baseline/{name}")
        table[name] = {b: _mean_metric(results, b) for b in cfg.behaviors}
    if out_dir:
        rows = [[n] + [table[n][b] for b in cfg.behaviors] for n in names]
        write_tsv(os.path.join(out_dir, "baselines.tsv"),
                  ["model"] + [f"{b}.ndcg@5" for b in cfg.behaviors], rows)
        if cfg.save_figures:
            plots.plot_grouped(table, cfg.behaviors, os.path.join(out_dir, "baselines.png"),
                               "test NDCG@5")
    return table


def check_order(original: Sequence[str], order: Sequence[str]) -> List[str]:
    order = list(order)
    if sorted(order) != sorted(original):
        raise ValueError(f"order {order} is not a permutation of {list(original)}")
    if order[-1] != original[-1]:
        raise ValueError(f"the target behavior {original[-1]!r} must stay last")
    return order


def order(cfg: ExperimentConfig, dataset, new_order: Sequence[str],
          out_dir: Optional[str]) -> Dict[str, Dict[str, float]]:
    """Compare the configured behavior chain against a permuted one."""
    new_order = check_order(cfg.behaviors, new_order)
    chains = {" > ".join(cfg.behaviors): list(cfg.behaviors)}
    chains.setdefault(" > ".join(new_order), new_order)
    table = {}
    for label, chain in chains.items():
        ocfg = cfg.replace(behaviors=chain)
        results = _seed_runs(ocfg, dataset, out_dir, f"order/{'-'.join(chain)}", behaviors=chain)
        table[label] = {b: _mean_metric(results, b) for b in cfg.behaviors}
    if out_dir:
        rows = [[label] + [table[label][b] for b in cfg.behaviors] for label in table]
        write_tsv(os.path.join(out_dir, "order.tsv"),
                  ["chain"] + [f"{b}.ndcg@5" for b in cfg.behaviors], rows)
        if cfg.save_figures:
            plots.plot_grouped(table, cfg.behaviors, os.path.join(out_dir, "order.png"),
                               "test NDCG@5")
    return table
