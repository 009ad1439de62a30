"""Optimisation loop: Adam, warmup + cosine schedule, clipping, BPC/PPL."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as tn
from .errors import DataError, NumericError, ParameterError
from .model import Model, encode, forward_lm, save_checkpoint
from .tensor import GradientTape, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_nats", "bpc", "lr", "grad_norm", "tokens_per_sec")


@dataclass
class OptimConfig:
    peak_lr: float = 2.5e-4
    min_lr: float = 6e-5
    warmup_steps: int = 100
    total_steps: int = 20_000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 8
    seq_len: int = 256

    @property
    def batch_tokens(self) -> int:
        return self.batch_size * self.seq_len

    def validate(self) -> "OptimConfig":
        if not 0 < self.min_lr <= self.peak_lr:
            raise ParameterError(f"need 0 < min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ParameterError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.clip_norm <= 0 or self.batch_size < 1 or self.seq_len < 2:
            raise ParameterError("clip_norm, batch_size and seq_len must be positive (seq_len >= 2)")
        return self


# Full-scale regimen (tokens per batch as for the smallest model).
FULL_SCALE_PRESET = dict(peak_lr=2.5e-4, min_lr=6e-5, warmup_steps=1000, total_steps=600_000,
                         beta1=0.9, beta2=0.98, weight_decay=0.1, clip_norm=1.0)


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0 to peak, then cosine decay to min_lr; clamps past the end."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.min_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def moments(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_moments(cls, moments: dict[str, np.ndarray] | None, step: int) -> "OptimState":
        st = cls(step=step)
        for k, a in (moments or {}).items():
            kind, _, name = k.partition("/")
            (st.m if kind == "m" else st.v)[name] = np.array(a)
        return st


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
              lr: float, cfg: OptimConfig, no_decay: Iterable[str] = ()) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Each parameter is first shrunk by (1 - lr * weight_decay) unless its name
    is in ``no_decay``; then the Adam delta is applied.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}; step {state.step + 1} aborted")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    skip = set(no_decay)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data = p.data
        if cfg.weight_decay and name not in skip:
            data = data * (1.0 - lr * cfg.weight_decay)
        p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                         for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm.

    Returns the (possibly) rescaled gradients and the norm before clipping.
    """
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    f = max_norm / norm
    out = {k: (g * f).astype(g.dtype, copy=False) for k, g in grads.items()}
    # rounding (float32 especially) can land a hair above max_norm; nudge down
    for _ in range(8):
        new = global_norm(out)
        if new <= max_norm:
            break
        shrink = max_norm / new * (1.0 - 4 * max(np.finfo(g.dtype).eps for g in out.values()))
        out = {k: (g * shrink).astype(g.dtype, copy=False) for k, g in out.items()}
    return out, norm


def no_decay_names(model: Model) -> set[str]:
    """Embedding and gain vectors are exempt from weight decay."""
    return {n for n, t in model.params.items() if n == "embed" or t.ndim < 2}


# -- language modelling ----------------------------------------------------

def as_ids(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        return corpus.astype(np.int64, copy=False)
    return encode(corpus)


def split_corpus(data: bytes, holdout: float = 0.1) -> tuple[bytes, bytes]:
    cut = int(len(data) * (1.0 - holdout))
    return data[:cut], data[cut:]


def sample_batch(ids: np.ndarray, batch: int, seq_len: int, seed: int, step: int):
    """Uniformly placed windows; the generator is keyed by (seed, step) so resumes replay."""
    n = len(ids) - seq_len - 1
    if n < 0:
        raise DataError(f"corpus of {len(ids)} tokens is shorter than one window of {seq_len + 1}")
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, n + 1, size=batch)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    w = ids[idx]
    return w[:, :-1], w[:, 1:]


@dataclass
class TrainResult:
    log: list[dict]
    evals: list[dict]
    stopped_early: bool = False


def train_lm(model: Model, corpus, cfg: OptimConfig, *, seed: int = 0,
             callbacks: Iterable[Callable[[dict], object]] = (),
             log_path=None, checkpoint_path=None, checkpoint_every: int = 0,
             eval_corpus=None, eval_every: int = 0, eval_windows: int | None = None,
             target_bpc: float | None = None, max_steps: int | None = None) -> TrainResult:
    """Train ``model`` in parallel mode on next-byte prediction.

    Starts from ``model.step`` (restored optimizer moments included), so a
    resumed run replays the same batches and losses as an uninterrupted one.
    A callback returning a truthy value stops training; so does reaching
    ``target_bpc`` on ``eval_corpus``.
    """
    cfg.validate()
    ids = as_ids(corpus)
    seq = min(cfg.seq_len, model.config.context_len)
    if len(ids) < seq + 1:
        raise DataError(f"corpus of {len(ids)} bytes is shorter than one window of {seq + 1}")
    state = OptimState.from_moments(model.optim_moments, model.step)
    skip = no_decay_names(model)
    params = model.params
    end = cfg.total_steps if max_steps is None else min(cfg.total_steps, model.step + max_steps)

    writer = fh = None
    if log_path is not None:
        new = not Path(log_path).exists() or model.step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            writer.writeheader()

    result = TrainResult([], [])
    try:
        for step in range(model.step, end):
            t0 = time.perf_counter()
            x, y = sample_batch(ids, cfg.batch_size, seq, seed, step)
            with GradientTape() as tape:
                loss = tn.cross_entropy_logits(forward_lm(model, x, "parallel"), y)
            for p in params.values():
                p.grad = None
            tn.backward(tape, loss, params.values())
            grads, norm = clip_gradients({n: p.grad for n, p in params.items()}, cfg.clip_norm)
            lr = lr_at(step + 1, cfg)
            adam_step(params, grads, state, lr, cfg, skip)
            model.step = step + 1
            model.optim_moments = state.moments()
            dt = time.perf_counter() - t0
            nats = loss.item()
            row = dict(step=step, loss_nats=nats, bpc=nats / math.log(2), lr=lr,
                       grad_norm=norm, tokens_per_sec=x.size / dt if dt > 0 else float("inf"))
            result.log.append(row)
            if writer:
                writer.writerow(row)
            stop = any(cb(row) for cb in callbacks)
            if checkpoint_path and checkpoint_every and model.step % checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path)
            if eval_corpus is not None and eval_every and model.step % eval_every == 0:
                bpc, ppl = eval_bpc_ppl(model, eval_corpus, max_windows=eval_windows)
                result.evals.append(dict(step=model.step, bpc=bpc, ppl=ppl))
                log.info("step %d  held-out bpc %.4f", model.step, bpc)
                if target_bpc is not None and bpc < target_bpc:
                    stop = True
            if stop:
                result.stopped_early = True
                break
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return result


def eval_bpc_ppl(model: Model, corpus, window: int | None = None, mode: str = "parallel",
                 batch: int = 16, max_windows: int | None = None) -> tuple[float, float]:
    """Bits per byte and perplexity over consecutive non-overlapping windows."""
    ids = as_ids(corpus)
    if len(ids) < 2:
        raise DataError("evaluation corpus needs at least two bytes")
    window = min(window or model.config.context_len, len(ids) - 1)
    starts = list(range(0, len(ids) - 1, window))
    if max_windows is not None:
        starts = starts[:max_windows]
    total, count = 0.0, 0
    full = [s for s in starts if s + window + 1 <= len(ids)]
    tail = [s for s in starts if s + window + 1 > len(ids)]
    for i in range(0, len(full), batch):
        idx = np.asarray(full[i:i + batch])[:, None] + np.arange(window + 1)[None, :]
        w = ids[idx]
        total += _nll_sum(model, w[:, :-1], w[:, 1:], mode)
        count += w[:, 1:].size
    for s in tail:
        w = ids[s:]
        total += _nll_sum(model, w[:-1], w[1:], mode)
        count += len(w) - 1
    nats = total / count
    return nats / math.log(2), math.exp(nats)


def _nll_sum(model: Model, x: np.ndarray, y: np.ndarray, mode: str) -> float:
    logits = forward_lm(model, x, mode).data.astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-np.take_along_axis(logp, y[..., None], axis=-1).sum())


def optim_config_dict(cfg: OptimConfig) -> dict:
    return asdict(cfg)
