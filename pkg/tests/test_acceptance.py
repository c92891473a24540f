"""Acceptance criteria, one test each.

Run with ``pytest tests/test_acceptance.py -v -s``; every criterion prints a
single ``[ACCEPT n] PASS|FAIL ...`` line with the measured quantities. The
same lines are repeated in an "acceptance criteria" section of the terminal
summary, so they also show up without ``-s``.
"""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPT_LINES, as_lists, random_edges
from mbrec import dataio
from mbrec.eval import metrics_for_user, random_ranking_ndcg
from mbrec.graph import build_global_graph, build_graph, propagate_items, propagate_users
from mbrec.model import (ModelConfig, ForwardState, full_forward, init_params, load_checkpoint,
                         save_checkpoint)
from mbrec.objective import TrainBatch, bpr_loss, cpa_loss
from mbrec.optim import gradcheck
from mbrec.runner.config import ExperimentConfig
from mbrec.runner.experiments import ABLATIONS
from mbrec.runner.synthetic import SyntheticSpec, generate_dataset
from mbrec.runner.trainer import train
from oracles import dense_norm_adj, metric_oracle, naive_forward

BEHAVIORS = ["click", "cart", "purchase"]
SEEDS = [0, 1, 2]

# Training settings for the synthetic criteria. Chosen on a separate tuning
# seed by the full model's validation signal only.
SYNTH_TRAIN = dict(dim=64, lr=0.001, max_epochs=50, patience=10)


def report(n, ok, text):
    line = f"[ACCEPT {n}] {'PASS' if ok else 'FAIL'} {text}"
    ACCEPT_LINES.append(line)
    print("\n" + line)
    assert ok, text


def _random_ndcg(ds):
    """Expected NDCG@5 of a uniform random ranking over each user's candidates."""
    b = ds.target
    gt, tr = ds.test[b], ds.train[b]
    users = np.unique(gt[:, 0])
    sizes = [int((gt[:, 0] == u).sum()) for u in users]
    cands = [ds.num_items - int((tr[:, 0] == u).sum()) for u in users]
    return random_ranking_ndcg(sizes, cands, 5)


def _synth_cfg(seed, **kw):
    return ExperimentConfig(behaviors=BEHAVIORS, seeds=[seed], deterministic=True,
                            save_figures=False, **dict(SYNTH_TRAIN, **kw))


def test_1_gradient_fidelity():
    t0 = time.perf_counter()
    worst, failed = 0.0, []
    for mode in ("accumulated", "base"):
        for share in (False, True):
            cfg = ModelConfig(dim=5, behaviors=BEHAVIORS, layers=[1, 2, 3],
                              cascading_input_mode=mode, share_gce_gate=share)
            rep = gradcheck(cfg, seed=0, step=1e-4, tolerance=1e-3)
            worst = max(worst, rep.worst())
            if not rep.passed:
                failed.append((mode, share))
    dt = time.perf_counter() - t0
    report(1, not failed and worst < 1e-3 and dt < 30,
           f"gradient fidelity: worst rel err {worst:.1e} < 1e-03 over 4 settings "
           f"(M=6 N=8 d=5 K=3, {dt:.1f} s < 30 s){' failed ' + str(failed) if failed else ''}")


def test_2_propagation_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        M, N = int(rng.integers(5, 13)), int(rng.integers(5, 18))
        edges = [random_edges(rng, M, N, int(rng.integers(M, M * N // 2))) for _ in range(3)]
        g = build_graph(edges[0], M, N)
        A = np.array(dense_norm_adj(edges[0], M, N))
        X, Y = rng.standard_normal((M, 4)), rng.standard_normal((N, 4))
        worst = max(worst, np.abs(propagate_users(g, Y) - A @ Y).max(),
                    np.abs(propagate_items(g, X) - A.T @ X).max())

        mode = ("accumulated", "base")[seed % 2]
        share = bool(seed % 4 >= 2)
        cfg = ModelConfig(dim=4, behaviors=BEHAVIORS, layers=[1, 2, 3], global_layers=1 + seed % 3,
                          cascading_input_mode=mode, share_gce_gate=share)
        params = init_params(cfg, M, N, seed, dtype=np.float64)
        params["P"] = rng.standard_normal((M, 4))
        params["Q"] = rng.standard_normal((N, 4))
        state = full_forward(params, [build_graph(e, M, N) for e in edges],
                             build_global_graph(edges, M, N), cfg)
        ref, ref_glob = naive_forward(as_lists(params), edges, np.concatenate(edges), cfg.layers,
                                      cfg.global_layers, mode=mode, share=share)
        for k in range(3):
            for s in range(2):
                worst = max(worst, np.abs(state.final[k][s] - np.array(ref[k][s])).max())
        for s in range(2):
            worst = max(worst, np.abs(state.global_emb[s] - np.array(ref_glob[s])).max())
    dt = time.perf_counter() - t0
    report(2, worst < 1e-8 and dt < 10,
           f"propagation/forward oracle: max abs diff {worst:.1e} < 1e-08 on 20 instances "
           f"({dt:.1f} s < 10 s)")


def _state_from(final, glob, cfg):
    return ForwardState(cfg, 0, [], glob, final=final)


def test_3_loss_closed_forms():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(dim=3, behaviors=["purchase"], layers=[1])
    err_bpr = 0.0
    for _ in range(20):
        u = rng.standard_normal((4, 3))
        item = rng.standard_normal(3)
        items = np.tile(item, (6, 1))
        trip = np.column_stack([rng.integers(0, 4, 10), rng.integers(0, 6, 10),
                                rng.integers(0, 6, 10)])
        batch = TrainBatch.from_triples({0: trip}, target=0)
        loss = bpr_loss(_state_from([(u, items)], (u, items), cfg), batch, 0)
        err_bpr = max(err_bpr, abs(loss / len(trip) - math.log(2)))
    err_cpa = 0.0
    for n in (1, 2, 3, 7, 20):
        row = rng.standard_normal(3)
        table = np.tile(row, (n, 1))
        glob = np.tile(rng.standard_normal(3), (n, 1))
        trip = np.column_stack([np.arange(n), np.arange(n), (np.arange(n) + 1) % n])
        batch = TrainBatch.from_triples({0: trip}, target=0)
        lu, li = cpa_loss(_state_from([(table, table)], (glob, glob), cfg), batch, 0.2)
        err_cpa = max(err_cpa, abs(lu / n - math.log(n)), abs(li / n - math.log(n)))
    report(3, err_bpr < 1e-9 and err_cpa < 1e-9,
           f"loss closed forms: |bpr - ln2| = {err_bpr:.1e}, |cpa - ln n| = {err_cpa:.1e} (< 1e-09)")


def test_4_metric_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(5, 60))
        ranked = rng.permutation(n).tolist()
        gt = set(rng.choice(n, size=int(rng.integers(1, n)), replace=False).tolist())
        k = int(rng.choice([1, 3, 5, 10, 15, 20]))
        got = metrics_for_user(ranked, gt, k)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, metric_oracle(ranked, gt, k))))
    ndcg3 = metrics_for_user([10, 11, 7, 12, 13], {7}, 5)[2]
    report(4, worst <= 1e-12 and ndcg3 == 0.5,
           f"metric oracle: max diff {worst:.1e} <= 1e-12 over 1000 pairs; rank-3 NDCG = {ndcg3!r}")


@pytest.mark.slow
def test_5_synthetic_recoverability():
    t0 = time.perf_counter()
    rows, lift_ok, beats = [], True, 0
    for seed in SEEDS:
        ds = generate_dataset(SyntheticSpec(num_users=500, num_items=800, behaviors=BEHAVIORS),
                              seed)
        rand = _random_ndcg(ds)
        full = train(_synth_cfg(seed), ds, seed).test_report.get("purchase", "ndcg", 5)
        lgcn = train(_synth_cfg(seed, baseline="unified_lightgcn"), ds, seed) \
            .test_report.get("purchase", "ndcg", 5)
        lift_ok &= full >= 1.5 * rand
        beats += full >= lgcn
        rows.append(f"seed{seed}: full={full:.4f} random={rand:.4f} lightgcn={lgcn:.4f}")
    dt = time.perf_counter() - t0
    report(5, lift_ok and beats >= 2 and dt < 600,
           f"synthetic recoverability: full >= 1.5x random in all seeds={lift_ok}, "
           f"full >= lightgcn in {beats}/3 seeds ({dt:.0f} s < 600 s) | " + "; ".join(rows))


@pytest.mark.slow
def test_6_ablation_direction():
    rows, wins = [], 0
    for seed in SEEDS:
        ds = generate_dataset(SyntheticSpec(behaviors=BEHAVIORS, dropout=0.7), seed)
        full = train(_synth_cfg(seed), ds, seed).test_report.get("purchase", "ndcg", 5)
        bare = train(_synth_cfg(seed).replace(**ABLATIONS["w/o GCE&CPA&CGF"]), ds, seed) \
            .test_report.get("purchase", "ndcg", 5)
        wins += full >= bare
        rows.append(f"seed{seed}: full={full:.4f} w/o-all={bare:.4f}")
    report(6, wins >= 2,
           f"ablation direction (dropout 0.7): full >= w/o GCE&CPA&CGF in {wins}/3 seeds "
           f"(need 2) | " + "; ".join(rows))


@pytest.mark.fulldata
def test_7_full_dataset(tmp_path):
    raw = os.environ.get("MBREC_JD_RAW")
    if not raw:
        ACCEPT_LINES.append("[ACCEPT 7] SKIP full JD run: MBREC_JD_RAW is not set")
        pytest.skip("set MBREC_JD_RAW to the JD log")
    behaviors = ["click", "favourite", "purchase"]
    events = dataio.load_events(raw, behaviors)
    ds = dataio.preprocess(events, behaviors, 20, 5)
    cfg = ExperimentConfig(behaviors=behaviors, dim=100, batch_size=500, lr=1e-3,
                           max_epochs=1000, patience=20, seeds=[0])
    full = train(cfg, ds, 0, str(tmp_path / "full")).test_report
    mf = train(cfg.replace(baseline="mf_bpr"), ds, 0, str(tmp_path / "mf")).test_report
    ndcg, mf_ndcg = full.get("purchase", "ndcg", 5), mf.get("purchase", "ndcg", 5)
    within = abs(ndcg - 0.0739) / 0.0739 <= 0.2
    report(7, within and ndcg > mf_ndcg,
           f"full JD run: purchase NDCG@5 {ndcg:.4f} (target 0.0739 +-20%), MF-BPR {mf_ndcg:.4f}")


def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "mbrec.runner.cli", *args], cwd=cwd,
                          capture_output=True, text=True, check=True)


def test_8_determinism_and_persistence(tmp_path):
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(
        f"dataset: {tmp_path / 'data'}\nbehaviors: [click, cart, purchase]\n"
        "synthetic: {num_users: 80, num_items: 120, target_per_user: 6}\n"
        "item_min_purchases: 0\nuser_min_purchases: 0\n"
        "dim: 16\nlr: 0.01\nbatch_size: 256\nmax_epochs: 4\npatience: 10\nseeds: [0]\n"
        "save_figures: false\n")
    _cli("prepare", "--config", str(cfg_path), "--out", str(tmp_path / "data"), cwd=tmp_path)
    for name in ("a", "b"):
        _cli("train", "--config", str(cfg_path), "--deterministic", "--out",
             str(tmp_path / name), cwd=tmp_path)
    logs_equal = (tmp_path / "a" / "train.log").read_bytes() == \
        (tmp_path / "b" / "train.log").read_bytes()
    ckpt_equal = (tmp_path / "a" / "best.ckpt").read_bytes() == \
        (tmp_path / "b" / "best.ckpt").read_bytes()

    params = load_checkpoint(tmp_path / "a" / "last.ckpt")
    save_checkpoint(tmp_path / "copy.ckpt", params)
    again = load_checkpoint(tmp_path / "copy.ckpt")
    roundtrip = (tmp_path / "copy.ckpt").read_bytes() == \
        (tmp_path / "a" / "last.ckpt").read_bytes() and \
        all(v.tobytes() == again[n].tobytes() for n, v in params.items())

    # interrupted after two epochs, then resumed to four
    short = cfg_path.read_text().replace("max_epochs: 4", "max_epochs: 2")
    (tmp_path / "short.yaml").write_text(short)
    _cli("train", "--config", str(tmp_path / "short.yaml"), "--deterministic", "--out",
         str(tmp_path / "r"), cwd=tmp_path)
    _cli("train", "--config", str(cfg_path), "--deterministic", "--resume", "--out",
         str(tmp_path / "r"), cwd=tmp_path)
    resumed = (tmp_path / "r" / "last.ckpt").read_bytes() == \
        (tmp_path / "a" / "last.ckpt").read_bytes()
    full_log = (tmp_path / "a" / "train.log").read_text().splitlines()
    r_log = (tmp_path / "r" / "train.log").read_text().splitlines()
    tail = r_log[r_log.index("resumed_from_epoch=2") + 1:]
    start = next(i for i, ln in enumerate(full_log) if ln.startswith("epoch=3"))
    resumed &= tail == full_log[start:]
    report(8, logs_equal and ckpt_equal and roundtrip and resumed,
           f"determinism/persistence: identical logs={logs_equal}, identical checkpoints="
           f"{ckpt_equal}, bit-exact round-trip={roundtrip}, resume equivalence={resumed}")
