"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Slow criteria (task sweeps, the language-model run, the latency benchmark)
carry the ``slow`` marker; ``pytest -m "not slow"`` skips them.
"""
import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from astrosnn import bench, cli, tasks, verify
from astrosnn import tensor as tn
from astrosnn.model import ModelConfig, build_model, forward_lm, load_checkpoint, save_checkpoint
from astrosnn.tensor import GradientTape, Tensor, backward
from astrosnn.train import FULL_SCALE_PRESET, OptimConfig, clip_gradients, global_norm, lr_at, train_lm

CORPUS = Path(__file__).resolve().parents[1] / "data" / "shakespeare.txt"


def test_mode_equivalence(criterion):
    t0 = time.perf_counter()
    trials = verify.equivalence_suite(trials=200, max_dim=32, max_len=64, tol=1e-10, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(max(t.diff_parallel, t.diff_chunked) for t in trials)
    ok = (all(t.passed and t.spikes_match for t in trials) and len(trials) >= 200 and worst < 1e-10 and elapsed < 60
          and {t.heads for t in trials} <= {1, 2, 4} and max(t.d for t in trials) <= 32
          and max(t.T for t in trials) <= 64)
    criterion(1, ok, f"{sum(t.passed for t in trials)}/{len(trials)} configs agree, "
                     f"max |pre diff| {worst:.2e}, spikes identical off-margin, {elapsed:.1f}s")


def test_gradient_correctness(criterion):
    t0 = time.perf_counter()
    model = verify.model_gradient_checks(seed=0, tol=1e-4, layers=2)
    bptt = verify.bptt_checks(seed=0, tol=1e-8)
    ops = verify.op_gradient_checks(seed=0, tol=1e-4)
    elapsed = time.perf_counter() - t0
    weights = {c.name.split(":", 1)[1] for c in model}
    every_weight = weights == set(verify._small_model(0).params)
    worst = max(c.rel_error for c in model + ops)
    worst_bptt = max(c.rel_error for c in bptt)
    ok = all(c.passed for c in model + bptt + ops) and every_weight and elapsed < 120
    criterion(2, ok, f"{len(model)} weight tensors (all covered: {every_weight}) + {len(ops)} ops, "
                     f"max rel err {worst:.1e}; parallel vs BPTT {worst_bptt:.1e}; {elapsed:.1f}s")


def test_surrogate_contract(criterion):
    alpha, v_th = ModelConfig().alpha, ModelConfig().v_th
    rng = np.random.default_rng(0)
    inside = v_th + rng.uniform(-1 / alpha, 1 / alpha, 4)
    outside = v_th + np.r_[rng.uniform(1 / alpha + 1e-3, 5, 3), -rng.uniform(1 / alpha + 1e-3, 5, 2)]
    xs = np.r_[v_th, inside, outside]
    leaf = Tensor(xs.astype(np.float64), requires_grad=True)
    with GradientTape() as tape:
        out = tn.heaviside_ste(leaf, v_th, alpha).sum()
    backward(tape, out, [leaf])
    expect = np.maximum(0.0, alpha - alpha ** 2 * np.abs(xs - v_th))
    ok = (len(xs) == 10 and np.array_equal(leaf.grad, expect) and leaf.grad[0] == alpha
          and np.all(leaf.grad[5:] == 0) and leaf.grad.max() == alpha)
    criterion(3, ok, f"10 points exact; peak {leaf.grad[0]} at v_th, zero beyond 1/alpha = {1 / alpha}")


EPISODES = 1000


@pytest.mark.slow
def test_memory_length_ordering(criterion):
    cfg = tasks.TaskConfig(dim=64, layers=2, eval_episodes=EPISODES)
    t0 = time.perf_counter()
    am = tasks.sweep("amsu", [1, 100], cfg)
    lif = tasks.sweep("lif", [1, 100], cfg)
    alif = tasks.sweep("alif", [1, 100, 300], cfg)
    literal = tasks.sweep("amsu", [100], tasks.TaskConfig(dim=64, layers=2, eval_episodes=EPISODES,
                                                         efold=False))[0]
    elapsed = time.perf_counter() - t0
    err = {p.cell + str(p.length): p.metric_value for p in am + lif + alif}
    print(f"memory error rates {err}; literal-decay AM-SU at L=100: {literal.metric_value:.3f}")
    ok = (err["amsu100"] < 0.05 and abs(err["lif100"] - 0.5) <= 0.05
          and err["alif1"] < 0.05 and err["alif300"] > 0.25 and elapsed < 30 * 60)
    criterion(4, ok, f"L=100: AM-SU {err['amsu100']:.3f}, LIF {err['lif100']:.3f}; "
                     f"ALIF {err['alif1']:.3f} (L=1) -> {err['alif100']:.3f} (L=100) -> "
                     f"{err['alif300']:.3f} (L=300); {EPISODES} episodes/point, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_umbrella_ordering(criterion):
    cfg = tasks.TaskConfig(dim=64, layers=2, eval_episodes=EPISODES)
    am = tasks.sweep("amsu", [100], cfg, task="umbrella")[0]
    lif = tasks.sweep("lif", [100], cfg, task="umbrella")[0]
    a_ci, l_ci = tasks.bootstrap_ci(am.values), tasks.bootstrap_ci(lif.values)
    ok = am.metric_value < lif.metric_value and a_ci[1] < l_ci[0]
    criterion(5, ok, f"mean regret at L=100: AM-SU {am.metric_value:.3f} [{a_ci[0]:.3f}, {a_ci[1]:.3f}] vs "
                     f"LIF {lif.metric_value:.3f} [{l_ci[0]:.3f}, {l_ci[1]:.3f}]")


@pytest.mark.slow
def test_language_model_sanity(criterion, tmp_path):
    out = tmp_path / "lm"
    t0 = time.perf_counter()
    code = cli.main(["train-lm", "--corpus", str(CORPUS), "--out", str(out), "--layers", "2", "--dim", "128",
                     "--ffn", "true", "--steps", "20000", "--eval-every", "500", "--eval-windows", "0",
                     "--checkpoint-every", "2000", "--target-bpc", "3.0"])
    elapsed = time.perf_counter() - t0
    with open(out / "train_log.csv") as fh:
        first = next(csv.DictReader(fh))
    report = json.loads((out / "report.json").read_text())
    final = report["final_eval"]
    step0 = float(first["loss_nats"])
    ok = (code == 0 and final is not None and final["bpc"] < 3.0 and report["steps"] <= 20000
          and abs(step0 - math.log(256)) <= 0.05)
    detail = (f"held-out bpc {final['bpc']:.3f} at step {final['step']}" if final else "no evaluation")
    criterion(6, ok, f"{detail} (uniform 8.0); step-0 loss {step0:.4f} vs ln 256 = {math.log(256):.4f}; "
                     f"{elapsed / 60:.1f} min")


@pytest.mark.slow
def test_efficiency_shapes(criterion):
    rows = bench.run_bench(bench.DEFAULT_LENGTHS, layers=2, dim=128, heads=8, repeats=7, warmup=2, tokens=64)
    am, at = bench.fit_slope(rows, "amsu"), bench.fit_slope(rows, "attention")
    closed = bench.closed_form_state(2, 128, 8)
    am_state = {r.state_numbers for r in rows if r.system == "amsu"}
    at_state = [max(r.state_numbers for r in rows if r.system == "attention" and r.context == T)
                for T in bench.DEFAULT_LENGTHS]
    ok = (am.flat and not at.flat and at.slope > 0 and am_state == {closed}
          and all(a < b for a, b in zip(at_state, at_state[1:])))
    criterion(7, ok, f"AM-SU latency flat={am.flat} (x{am.growth_ratio:.2f} over 128..8192), "
                     f"attention flat={at.flat} (x{at.growth_ratio:.2f}); AM-SU state {am_state} == {closed}; "
                     f"attention state {at_state[0]} -> {at_state[-1]}")


def test_schedule_optimizer_exactness(criterion, tmp_path):
    cfg, big = OptimConfig(), OptimConfig(**FULL_SCALE_PRESET)
    lr_ok = all(lr_at(c.warmup_steps, c) == 2.5e-4 and lr_at(c.total_steps, c) == 6e-5 for c in (cfg, big))

    rng = np.random.default_rng(0)
    norms = []
    for scale in (1e-3, 0.5, 3.0, 1e4):
        g = {f"g{i}": scale * rng.normal(size=rng.integers(1, 300)) for i in range(4)}
        norms.append(global_norm(clip_gradients(g, 1.0)[0]))
    clip_ok = max(norms) <= 1.0

    m = build_model(ModelConfig(dim=32, heads=4, context_len=32))
    text = b"It is a wise father that knows his own child. " * 20
    train_lm(m, text, OptimConfig(total_steps=4, warmup_steps=2, batch_size=2, seq_len=32))
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    x = np.arange(32) * 7 % 256
    rt_ok = (back.step == m.step == 4 and back.config == m.config
             and all(back.params[k].data.tobytes() == m.params[k].data.tobytes() for k in m.params)
             and back.optim_moments.keys() == m.optim_moments.keys()
             and all(back.optim_moments[k].tobytes() == m.optim_moments[k].tobytes() for k in m.optim_moments)
             and forward_lm(back, x).data.tobytes() == forward_lm(m, x).data.tobytes())
    criterion(8, lr_ok and clip_ok and rt_ok,
              f"lr_at(warmup)={lr_at(cfg.warmup_steps, cfg)!r}, lr_at(total)={lr_at(cfg.total_steps, cfg)!r}; "
              f"max clipped norm {max(norms):.15f}; checkpoint bit-exact={rt_ok}")
