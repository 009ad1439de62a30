"""Working-memory benchmarks recast as final-step classification.

Memory Length: a one-hot cue at step 0, ``L`` blank steps, then a query flag;
the label is the cue.  Umbrella Length: a need-bit at step 0 followed by ``L``
steps of random distractor bits; the label is the need-bit and every wrong
final decision costs one unit of regret.

:func:`sweep` trains a fresh two-layer network per length for each cell type
(AM-SU, LIF, ALIF) and reports held-out error rate or mean regret.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import amsu
from . import tensor as tn
from .amsu import AlifState, AmSuParams
from .errors import ConfigError, ParameterError
from .model import decay_divisors, tau_schedule
from .tensor import GradientTape, Tensor
from .train import OptimConfig, OptimState, adam_step, clip_gradients, lr_at

CELLS = ("amsu", "lif", "alif")
TASKS = ("memory", "umbrella")
CSV_COLUMNS = ("task", "cell", "length", "train_steps", "metric_name", "metric_value", "seed")

UMBRELLA_DISTRACTORS = 20
_EVAL_SEED_BASE = 1 << 30


@dataclass
class TaskEpisode:
    inputs: np.ndarray  # T x F
    target: int
    length: int
    seed: int
    kind: str


def gen_memory_length(L: int, seed: int) -> TaskEpisode:
    """T = L + 2 rows of 3 features: cue at step 0, query flag at the end."""
    if L < 1:
        raise ParameterError(f"memory length must be >= 1, got {L}")
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2))
    x = np.zeros((L + 2, 3))
    x[0, c] = 1.0
    x[L + 1, 2] = 1.0
    return TaskEpisode(x, c, L, seed, "memory")


def gen_umbrella(L: int, seed: int, K: int = UMBRELLA_DISTRACTORS) -> TaskEpisode:
    """T = L + 2 rows of 2 + K features.

    Step 0: need-bit (feature 0) and start flag (feature 1).  Steps 1..L: K
    fresh random distractor bits.  Final step: decision flag on feature 1.
    """
    if L < 1:
        raise ParameterError(f"umbrella length must be >= 1, got {L}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2))
    x = np.zeros((L + 2, 2 + K))
    x[0, 0] = n
    x[0, 1] = 1.0
    x[1:L + 1, 2:] = rng.integers(0, 2, size=(L, K))
    x[L + 1, 1] = 1.0
    return TaskEpisode(x, n, L, seed, "umbrella")


def generate(task: str, L: int, seed: int) -> TaskEpisode:
    if task == "memory":
        return gen_memory_length(L, seed)
    if task == "umbrella":
        return gen_umbrella(L, seed)
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def batch(task: str, L: int, seeds) -> tuple[np.ndarray, np.ndarray]:
    eps = [generate(task, L, int(s)) for s in seeds]
    return np.stack([e.inputs for e in eps]), np.array([e.target for e in eps])


def n_features(task: str) -> int:
    return 3 if task == "memory" else 2 + UMBRELLA_DISTRACTORS


def log_lengths(max_len: int, points: int = 8) -> list[int]:
    """Log-spaced integer lengths from 1 to ``max_len`` (deduplicated, ascending)."""
    return sorted({int(round(v)) for v in np.geomspace(1, max_len, points)})


# -- networks ----------------------------------------------------------------

@dataclass
class TaskConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 8
    steps: int = 300
    batch_size: int = 64
    lr: float = 3e-3
    eval_episodes: int = 512
    dtype: str = "f32"
    chunk: int = 128
    # AM-SU time constants, read as e-folding times when efold is set:
    # the per-step divisor becomes exp(1/tau) instead of tau itself
    tau_n: float = 2.0
    tau_a_min: float = 32.0
    tau_a_max: float = 512.0
    efold: bool = True
    # LIF / ALIF
    lif_tau: float = 2.0
    lif_v_th: float = 1.0
    alif_rho: float = amsu.ALIF_RHO
    alif_beta: float = amsu.ALIF_BETA
    alif_b0: float = amsu.ALIF_B0
    alpha: float = 2.0

    def amsu_taus(self) -> tuple[float, tuple]:
        return decay_divisors(self.tau_n, tau_schedule(self.heads, self.tau_a_min, self.tau_a_max), self.efold)


class TaskNet:
    """Two (or more) layers of one cell type with a linear readout at the final step.

    The readout sees real-valued state of the last layer: AM-SU pre-activations,
    or the (threshold-relative) membrane potential of LIF/ALIF before reset.
    """

    def __init__(self, cell: str, n_in: int, cfg: TaskConfig, seed: int = 0, n_classes: int = 2):
        if cell not in CELLS:
            raise ConfigError(f"unknown cell type {cell!r}; expected one of {CELLS}")
        self.cell, self.cfg = cell, cfg
        rng = np.random.default_rng(seed)
        dt = tn.resolve_dtype(cfg.dtype)
        d = cfg.dim

        def w(rows, cols, fan_in=None):
            std = 1.0 / math.sqrt(fan_in or cols)
            return Tensor(rng.normal(0.0, std, size=(rows, cols)).astype(dt), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        self.layers: list = []
        for i in range(cfg.layers):
            d_in = n_in if i == 0 else d
            if cell == "amsu":
                tau_n, tau_a = cfg.amsu_taus()
                p = AmSuParams(w(d, d_in), w(d, d), w(d, d), w(d, d), heads=cfg.heads, tau_n=tau_n,
                               tau_a=tau_a, alpha=cfg.alpha, rope=True,
                               norm_gain=Tensor(np.ones(d, dtype=dt), requires_grad=True))
                names = ("w_x", "w_k", "w_v", "w_q", "norm_gain")
                for n, t in zip(names, (p.w_x, p.w_k, p.w_v, p.w_q, p.norm_gain)):
                    self.params[f"layers.{i}.{n}"] = t
                self.layers.append(p)
            else:
                layer = {"w": w(d, d_in)}
                if cell == "alif":
                    layer["w_rec"] = w(d, d)
                for n, t in layer.items():
                    self.params[f"layers.{i}.{n}"] = t
                self.layers.append(layer)
        self.params["head"] = Tensor(np.zeros((n_classes, d), dtype=dt), requires_grad=True)

    @property
    def dtype(self):
        return self.params["head"].dtype

    def final_state(self, X: np.ndarray) -> Tensor:
        """Real-valued last-layer state at the final step, shape (B, d)."""
        X = Tensor(np.asarray(X, dtype=self.dtype))
        B, T = X.shape[0], X.shape[1]
        cfg = self.cfg
        if self.cell == "amsu":
            s = X
            for p in self.layers:
                if T <= cfg.chunk:
                    s, pre = amsu.forward_parallel(p, s)
                else:
                    s, pre, _ = amsu.forward_chunked(p, s, cfg.chunk)
            return tn.getitem(pre, (slice(None), T - 1, slice(None)))

        dt = self.dtype
        if self.cell == "lif":
            us = [Tensor(np.zeros((B, cfg.dim), dtype=dt)) for _ in self.layers]
        else:
            us = [AlifState.zeros(cfg.dim, (B,), dt) for _ in self.layers]
        for t in range(T):
            s = tn.getitem(X, (slice(None), t, slice(None)))
            for i, layer in enumerate(self.layers):
                if self.cell == "lif":
                    s, us[i], v = amsu.lif_step(layer["w"], cfg.lif_tau, cfg.lif_v_th, us[i], s,
                                                cfg.alpha, return_potential=True)
                else:
                    s, us[i], v = amsu.alif_step(layer["w"], layer["w_rec"], cfg.lif_tau, cfg.alif_rho,
                                                 cfg.alif_beta, cfg.alif_b0, us[i], s, cfg.alpha,
                                                 return_potential=True)
        return v

    def logits(self, X: np.ndarray) -> Tensor:
        return amsu.linear(self.final_state(X), self.params["head"])

    def predict(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.logits(X[i:i + batch_size]).data.argmax(axis=-1) for i in range(0, len(X), batch_size)]
        return np.concatenate(out)


def train_task(cell: str, task: str, length: int, cfg: TaskConfig, seed: int = 0) -> tuple[TaskNet, list[float]]:
    """Fresh network trained with cross-entropy on the final-step label."""
    net = TaskNet(cell, n_features(task), cfg, seed=seed)
    ocfg = OptimConfig(peak_lr=cfg.lr, min_lr=cfg.lr * 0.1, warmup_steps=min(20, cfg.steps - 1),
                       total_steps=cfg.steps, weight_decay=0.0, clip_norm=1.0).validate()
    state = OptimState()
    rng = np.random.default_rng([seed, length, CELLS.index(cell)])
    losses = []
    for step in range(cfg.steps):
        X, y = batch(task, length, rng.integers(0, _EVAL_SEED_BASE, size=cfg.batch_size))
        with GradientTape() as tape:
            loss = tn.cross_entropy_logits(net.logits(X), y)
        for p in net.params.values():
            p.grad = None
        tn.backward(tape, loss, net.params.values())
        grads, _ = clip_gradients({n: p.grad for n, p in net.params.items()}, ocfg.clip_norm)
        adam_step(net.params, grads, state, lr_at(step + 1, ocfg), ocfg)
        losses.append(loss.item())
    return net, losses


def evaluate(net: TaskNet, task: str, length: int, episodes: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and targets on held-out episodes (seeds disjoint from training)."""
    seeds = _EVAL_SEED_BASE + (np.arange(episodes) + seed * episodes) % _EVAL_SEED_BASE
    X, y = batch(task, length, seeds)
    return net.predict(X), y


def error_rate(pred, target) -> float:
    return float(np.mean(np.asarray(pred) != np.asarray(target)))


def regrets(pred, target) -> np.ndarray:
    """Per-episode 0/1 regret: 1 whenever the final decision misses the need-bit."""
    return (np.asarray(pred) != np.asarray(target)).astype(float)


def total_regret(pred, target) -> float:
    return float(regrets(pred, target).sum())


def bootstrap_ci(values, n_boot: int = 2000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``values``."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    means = values[rng.integers(0, len(values), size=(n_boot, len(values)))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class SweepPoint:
    task: str
    cell: str
    length: int
    train_steps: int
    metric_name: str
    metric_value: float
    seed: int
    values: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("values")
        return d


def sweep(cell: str, lengths, cfg: TaskConfig | None = None, seed: int = 0, task: str = "memory",
          csv_path=None, progress=None) -> list[SweepPoint]:
    """Train one fresh network per length and score it on held-out episodes.

    Memory reports ``error_rate``; umbrella reports ``mean_regret`` (the
    per-episode regrets are kept on each point for interval estimates).
    """
    if cell not in CELLS:
        raise ConfigError(f"unknown cell type {cell!r}; expected one of {CELLS}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ParameterError("lengths must be sorted ascending")
    cfg = cfg or TaskConfig()
    points = []
    for L in lengths:
        net, _ = train_task(cell, task, L, cfg, seed)
        pred, y = evaluate(net, task, L, cfg.eval_episodes, seed)
        r = regrets(pred, y)
        name = "error_rate" if task == "memory" else "mean_regret"
        pt = SweepPoint(task, cell, L, cfg.steps, name, float(r.mean()), seed, r)
        points.append(pt)
        if progress:
            progress(pt)
    if csv_path is not None:
        write_csv(points, csv_path)
    return points


def write_csv(points, path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new:
            w.writeheader()
        for p in points:
            w.writerow(p.row())
