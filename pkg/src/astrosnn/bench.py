"""Inference cost: AM-SU recurrent decoding vs. softmax attention with a KV cache."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .amsu import ROPE_BASE, AmSuState
from .model import ModelConfig, build_model
from .tensor import Tensor

DEFAULT_LENGTHS = (128, 256, 512, 1024, 2048, 4096, 8192)
BENCH_COLUMNS = ("system", "context", "repeat", "latency_s", "tokens_per_sec", "state_numbers", "state_bytes")


@dataclass
class BenchRow:
    system: str
    context: int
    repeat: int
    latency_s: float
    tokens_per_sec: float
    state_numbers: int
    state_bytes: int

    def row(self) -> dict:
        return asdict(self)


class AttentionBaseline:
    """Causal multi-head softmax attention decoder, one token at a time, growing KV cache."""

    def __init__(self, layers: int, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads, self.hd = heads, dim // heads
        self.dtype = dtype
        s = 1.0 / math.sqrt(dim)
        self.w = [tuple(rng.normal(0, s, size=(dim, dim)).astype(dtype) for _ in range(4))
                  for _ in range(layers)]
        self.cache: list[tuple[np.ndarray, np.ndarray]] = []
        self.length = 0

    def prefill(self, context: int, rng: np.random.Generator) -> None:
        """Fill the cache with ``context`` entries. Values are random; only cost matters."""
        cap = context + 64
        self.cache = []
        for _ in self.w:
            k = np.zeros((self.heads, cap, self.hd), self.dtype)
            v = np.zeros((self.heads, cap, self.hd), self.dtype)
            k[:, :context] = rng.normal(size=(self.heads, context, self.hd))
            v[:, :context] = rng.normal(size=(self.heads, context, self.hd))
            self.cache.append((k, v))
        self.length = context

    def step(self, x: np.ndarray) -> np.ndarray:
        n = self.length + 1
        for (wq, wk, wv, wo), (kc, vc) in zip(self.w, self.cache):
            q = (wq @ x).reshape(self.heads, 1, self.hd)
            kc[:, n - 1] = (wk @ x).reshape(self.heads, self.hd)
            vc[:, n - 1] = (wv @ x).reshape(self.heads, self.hd)
            a = q @ kc[:, :n].transpose(0, 2, 1) / math.sqrt(self.hd)
            a = np.exp(a - a.max(-1, keepdims=True))
            a /= a.sum(-1, keepdims=True)
            x = x + wo @ (a @ vc[:, :n]).reshape(-1)
        self.length = n
        return x

    def state_numbers(self) -> int:
        return sum(2 * self.heads * self.length * self.hd for _ in self.cache)


class AmSuDecoder:
    """Stack of AM-SU layers stepped recurrently; state is O(1) in context length.

    Inference runs on plain arrays (no tape), like the attention baseline, so
    the two are timed on equal terms. ``step`` matches ``step_recurrent``.
    """

    def __init__(self, layers: int, dim: int, heads: int, seed: int, dtype: str = "f32"):
        cfg = ModelConfig(layers=layers, dim=dim, heads=heads, dtype=dtype, seed=seed, context_len=1)
        self.model = build_model(cfg)
        self.states = [AmSuState.zeros(p) for p in self.model.layers]
        hd = dim // heads
        self.theta = ROPE_BASE ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
        self._plain = [self._unpack(p) for p in self.model.layers]

    @staticmethod
    def _unpack(p):
        g = None if p.norm_gain is None else p.norm_gain.data
        w = np.concatenate([p.w_k.data, p.w_v.data, p.w_q.data])
        decay = (1.0 / np.asarray(p.tau_a)).reshape(-1, 1, 1).astype(p.dtype)
        return p.w_x.data, g, w, decay

    def prefill(self, context: int, rng: np.random.Generator) -> None:
        # the state after any prefix has the same shape; only the position counter matters
        dt = self.model.layers[0].dtype
        self.states = [AmSuState(Tensor(rng.normal(size=s.u.shape).astype(dt)),
                                 Tensor(0.1 * rng.normal(size=s.H.shape).astype(dt)), context)
                       for s in self.states]

    def step(self, s: np.ndarray) -> np.ndarray:
        for i, (p, (wx, gain, wkvq, decay)) in enumerate(zip(self.model.layers, self._plain)):
            st = self.states[i]
            h, hd = p.heads, p.head_dim
            x = wx @ s
            if gain is not None:
                x = x * (gain / math.sqrt(x @ x / x.size + 1e-6))
            u = st.u.data / p.tau_n + p.r / (1.0 + np.exp(-x))
            k, v, q = (wkvq @ x).reshape(3, h, hd)
            if p.rope:
                # a pair (a, b) read as a + ib rotates by multiplying with e^{i angle}
                cdt = np.complex64 if x.dtype == np.float32 else np.complex128
                rot = np.exp(1j * st.t * self.theta).astype(cdt)
                k = (np.ascontiguousarray(k).view(cdt) * rot).view(x.dtype)
                q = (np.ascontiguousarray(q).view(cdt) * rot).view(x.dtype)
            H = st.H.data * decay + (v / math.sqrt(hd))[:, :, None] * k[:, None, :]
            pre = (H @ q[:, :, None]).reshape(-1) + u
            s = (pre >= p.v_th).astype(x.dtype)
            self.states[i] = AmSuState(Tensor(u), Tensor(H), st.t + 1)
        return s

    def state_numbers(self) -> int:
        return sum(st.size() for st in self.states)

    def state_bytes(self) -> int:
        return sum(st.u.data.nbytes + st.H.data.nbytes for st in self.states)


def closed_form_state(layers: int, dim: int, heads: int) -> int:
    hd = dim // heads
    return layers * (dim + heads * hd * hd)


def run_bench(lengths=DEFAULT_LENGTHS, layers: int = 2, dim: int = 128, heads: int = 8,
              repeats: int = 7, warmup: int = 2, tokens: int = 64, seed: int = 0,
              systems=("amsu", "attention")) -> list[BenchRow]:
    """Per-token latency at each context length.

    Each measurement decodes ``tokens`` consecutive tokens after a prefill of
    ``context`` and reports the mean time per token. Repeats are interleaved
    across lengths so slow drift in machine load does not masquerade as a trend.
    """
    rng = np.random.default_rng(seed)
    amsu = AmSuDecoder(layers, dim, heads, seed)
    attn = AttentionBaseline(layers, dim, heads, rng)
    decoders = {"amsu": amsu, "attention": attn}
    rows = []
    for rep in range(-warmup, repeats):
        for T in lengths:
            for name in systems:
                dec = decoders[name]
                dec.prefill(T, rng)
                x = rng.normal(size=dim).astype(np.float32)
                t0 = time.perf_counter()
                for _ in range(tokens):
                    x = dec.step(x)
                    x = x / (np.abs(x).max() + 1.0)
                dt = (time.perf_counter() - t0) / tokens
                if rep < 0:
                    continue
                n = dec.state_numbers()
                nbytes = dec.state_bytes() if name == "amsu" else n * np.dtype(np.float32).itemsize
                rows.append(BenchRow(name, T, rep, dt, 1.0 / dt, n, nbytes))
    return rows


@dataclass
class SlopeFit:
    system: str
    slope: float
    stderr: float
    change: float
    noise: float
    median_latency: float
    growth_ratio: float

    @property
    def flat(self) -> bool:
        """Slope consistent with zero: its 99% interval covers 0, or the
        predicted change over the measured range stays inside the noise band."""
        return abs(self.slope) <= 2.576 * self.stderr or abs(self.change) <= self.noise

    def row(self) -> dict:
        return {**asdict(self), "flat": self.flat}


def fit_slope(rows: list[BenchRow], system: str) -> SlopeFit:
    """Least-squares latency ~ context, plus a robust noise band.

    The noise band is three robust standard deviations (1.4826 * MAD) of the
    repeat-to-repeat scatter around each length's median.
    """
    sel = [r for r in rows if r.system == system]
    if not sel:
        raise ValueError(f"no rows for {system!r}")
    x = np.array([r.context for r in sel], dtype=np.float64)
    y = np.array([r.latency_s for r in sel])
    A = np.stack([x, np.ones_like(x)], 1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = max(len(x) - 2, 1)
    var = resid @ resid / dof
    sxx = ((x - x.mean()) ** 2).sum()
    stderr = math.sqrt(var / sxx) if sxx > 0 else math.inf
    dev = np.concatenate([y[x == c] - np.median(y[x == c]) for c in np.unique(x)])
    noise = 3 * 1.4826 * float(np.median(np.abs(dev)))
    med = {c: float(np.median(y[x == c])) for c in np.unique(x)}
    lo, hi = min(med), max(med)
    change = float(coef[0] * (hi - lo))
    return SlopeFit(system, float(coef[0]), stderr, change, noise, float(np.median(y)), med[hi] / med[lo])


def write_rows(rows, path, columns=None) -> None:
    rows = [r.row() if hasattr(r, "row") else r for r in rows]
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns or list(rows[0]))
        w.writeheader()
        w.writerows(rows)
