"""Epoch loop with validation early stopping, logging and resumable checkpoints.

Files written to ``out_dir``: ``train.log`` (line-oriented, no wall-clock
values, so identical runs give identical logs), ``best.ckpt``, ``last.ckpt``
and the optimizer/sampler state ``last.state`` + ``last.json``.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from ..dataio import Dataset
from ..eval import MetricReport, early_stop_signal, evaluate_embeddings
from ..model import (ModelParams, encode_tensors, load_checkpoint, save_checkpoint,
                     tensors_from_bytes)
from ..optim import AdamState, adam_step
from .config import ExperimentConfig
from .models import CascadeModel, UnifiedLightGCN

log = logging.getLogger(__name__)

STATE_MAGIC = b"BGST"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_signal: float
    epochs_run: int
    history: List[Dict[str, float]]
    val_report: MetricReport
    test_report: Optional[MetricReport] = None
    log_lines: List[str] = field(default_factory=list)


@contextmanager
def deterministic_threads(enabled: bool):
    """Pin BLAS to one thread so floating-point reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def build_model(cfg: ExperimentConfig, dataset: Dataset, behaviors=None):
    behaviors = list(behaviors or cfg.behaviors)
    ds = dataset.with_behaviors(behaviors) if behaviors != dataset.behaviors else dataset
    if cfg.baseline == "none":
        return CascadeModel(cfg.model_config(behaviors), ds, dtype=cfg.dtype,
                            sampling_mode=cfg.sampling_mode, full_pool=cfg.cpa_full_pool), ds
    layers = 0 if cfg.baseline == "mf_bpr" else cfg.baseline_layers
    return UnifiedLightGCN(ds, behaviors, cfg.dim, layers, dtype=cfg.dtype), ds


# --------------------------------------------------------------------------
# optimizer/sampler state persistence


def _save_state(out_dir, params, adam: AdamState, rng, meta: dict) -> None:
    save_checkpoint(os.path.join(out_dir, "last.ckpt"), params)
    tensors = OrderedDict()
    for n in adam.m:
        tensors[f"m.{n}"] = adam.m[n]
        tensors[f"v.{n}"] = adam.v[n]
    with open(os.path.join(out_dir, "last.state"), "wb") as fh:
        fh.write(STATE_MAGIC + encode_tensors(tensors))
    meta = dict(meta, adam_t=adam.t, lr=adam.lr, rng=rng.bit_generator.state)
    with open(os.path.join(out_dir, "last.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def _load_state(out_dir, lr: float):
    params = load_checkpoint(os.path.join(out_dir, "last.ckpt"))
    with open(os.path.join(out_dir, "last.state"), "rb") as fh:
        data = fh.read()
    if data[:4] != STATE_MAGIC:
        raise ValueError("corrupt optimizer state file")
    tensors = tensors_from_bytes(data[4:])
    with open(os.path.join(out_dir, "last.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    adam = AdamState(lr=lr, t=meta["adam_t"])
    for n in params:
        adam.m[n] = tensors[f"m.{n}"].copy()
        adam.v[n] = tensors[f"v.{n}"].copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return params, adam, rng, meta


# --------------------------------------------------------------------------
# training


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def train(cfg: ExperimentConfig, dataset: Dataset, seed: int, out_dir: Optional[str] = None,
          resume: bool = False, behaviors=None, evaluate_test: bool = True,
          on_epoch: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Train one model; returns the best-validation parameters and reports."""
    with deterministic_threads(cfg.deterministic):
        return _train(cfg, dataset, seed, out_dir, resume, behaviors, evaluate_test, on_epoch)


def _train(cfg, dataset, seed, out_dir, resume, behaviors, evaluate_test, on_epoch):
    model, ds = build_model(cfg, dataset, behaviors)
    lines: List[str] = []
    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train.log"), "a" if resume else "w", encoding="utf-8")

    def emit(line: str):
        lines.append(line)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()

    try:
        if resume:
            if not out_dir:
                raise ValueError("resume requires an output directory")
            params, adam, rng, meta = _load_state(out_dir, cfg.lr)
            params = params.astype(model.dtype)
            start = meta["epoch"] + 1
            best_epoch, best_signal = meta["best_epoch"], meta["best_signal"]
            best_params = load_checkpoint(os.path.join(out_dir, "best.ckpt")).astype(model.dtype)
            emit(f"resumed_from_epoch={meta['epoch']}")
        else:
            for line in cfg.echo():
                emit(line)
            emit(f"run.seed={seed}")
            emit(f"run.model={model.name}")
            emit(f"run.behaviors={','.join(model.behaviors)}")
            params = model.init_params(seed)
            adam = AdamState.for_params(params, cfg.lr)
            rng = np.random.default_rng(seed)
            start, best_epoch, best_signal = 1, 0, -np.inf
            best_params = params.copy()

        history: List[Dict[str, float]] = []
        steps = model.steps_per_epoch(cfg.batch_size)
        epoch = start - 1
        for epoch in range(start, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            sums: Dict[str, float] = {}
            for _ in range(steps):
                batch = model.sample(cfg.batch_size, rng)
                lb, grads = model.loss_and_grads(params, batch, cfg.lam, cfg.beta, cfg.tau)
                if not np.isfinite(lb.total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                adam_step(params, grads, adam)
                for key, v in lb.as_dict(model.behaviors if len(lb.bpr) > 1 else ["all"]).items():
                    sums[key] = sums.get(key, 0.0) + v
            if not params.is_finite():
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
            report = evaluate_embeddings(model.forward(params).final, ds, "val", cfg.cutoffs,
                                         model.behaviors)
            signal = early_stop_signal(report)
            row = {f"loss.{k}": v / steps for k, v in sums.items()}
            row["signal"] = signal
            emit(f"epoch={epoch} " + " ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
            for line in report.lines():
                emit(f"epoch={epoch} {line}")
                key, _, v = line.partition("=")
                row[key] = float(v)
            history.append(row)
            if signal > best_signal:
                best_signal, best_epoch = signal, epoch
                best_params = params.copy()
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "best.ckpt"), best_params)
            if out_dir:
                _save_state(out_dir, params, adam, rng,
                            {"epoch": epoch, "best_epoch": best_epoch, "best_signal": best_signal,
                             "seed": seed})
            log.info("epoch %d signal %.5f best %.5f@%d (%.1fs)", epoch, signal, best_signal,
                     best_epoch, time.perf_counter() - t0)
            if on_epoch:
                on_epoch(epoch, row)
            if epoch - best_epoch >= cfg.patience:
                break

        emit(f"best_epoch={best_epoch} best_signal={_fmt(best_signal)}")
        best_state = model.forward(best_params)
        val_report = evaluate_embeddings(best_state.final, ds, "val", cfg.cutoffs, model.behaviors)
        test_report = None
        if evaluate_test:
            test_report = evaluate_embeddings(best_state.final, ds, "test", cfg.cutoffs,
                                              model.behaviors)
            for line in test_report.lines("test."):
                emit(line)
        return TrainResult(best_params, best_epoch, best_signal, epoch, history, val_report,
                           test_report, lines)
    finally:
        if log_fh:
            log_fh.close()


def load_for_eval(cfg: ExperimentConfig, dataset: Dataset, checkpoint: str):
    model, ds = build_model(cfg, dataset)
    params = load_checkpoint(checkpoint).astype(model.dtype)
    return model, ds, params
