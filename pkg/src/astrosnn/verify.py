"""Randomised verification suites: mode equivalence and gradient checks."""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import amsu
from . import tensor as tn
from .amsu import AmSuParams
from .model import ModelConfig, build_model, forward_lm
from .tensor import GradientTape, Tensor


def numerical_gradient(f, arrays: list[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def rel_error(a, b) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


# -- mode equivalence ----------------------------------------------------------

@dataclass
class EquivalenceTrial:
    trial: int
    d_in: int
    d: int
    heads: int
    T: int
    chunk: int
    rope: bool
    norm: bool
    diff_parallel: float
    diff_chunked: float
    spikes_match: bool
    passed: bool

    def row(self) -> dict:
        return asdict(self)


def random_params(rng: np.random.Generator, max_dim: int = 32, heads_choices=(1, 2, 4),
                  dtype="f64") -> AmSuParams:
    heads = int(rng.choice(heads_choices))
    hd = 2 * int(rng.integers(1, max(1, max_dim // (2 * heads)) + 1))
    d = heads * hd
    d_in = int(rng.integers(1, max_dim + 1))
    # log-uniform time constants: near-1 values keep long memories, large ones forget fast
    tau_n = float(np.exp(rng.uniform(np.log(1.01), np.log(8.0))))
    tau_a = tuple(float(t) for t in np.exp(rng.uniform(np.log(1.01), np.log(600.0), size=heads)))
    return AmSuParams.init(d_in, d, heads, rng=rng, dtype=dtype, tau_n=tau_n, tau_a=tau_a,
                           rope=bool(rng.integers(2)), norm=bool(rng.integers(2)),
                           v_th=float(rng.normal(0, 0.5)))


def equivalence_trial(trial: int, rng: np.random.Generator, max_dim: int = 32, max_len: int = 64,
                      tol: float = 1e-10, spike_margin: float = 1e-8, heads_choices=(1, 2, 4),
                      T: int | None = None) -> EquivalenceTrial:
    p = random_params(rng, max_dim, heads_choices)
    T = int(rng.integers(1, max_len + 1)) if T is None else T
    chunk = int(rng.integers(1, T + 1))
    S = Tensor(rng.normal(size=(T, p.d_in)))
    s_rec, pre_rec, _ = amsu.forward_recurrent(p, S)
    s_par, pre_par = amsu.forward_parallel(p, S)
    s_chk, pre_chk, _ = amsu.forward_chunked(p, S, chunk)
    d_par = float(np.abs(pre_par.data - pre_rec.data).max())
    d_chk = float(np.abs(pre_chk.data - pre_rec.data).max())
    clear = np.abs(pre_rec.data - p.v_th) > spike_margin
    spikes_ok = bool(np.array_equal(s_par.data[clear], s_rec.data[clear])
                     and np.array_equal(s_chk.data[clear], s_rec.data[clear]))
    ok = d_par < tol and d_chk < tol and spikes_ok
    return EquivalenceTrial(trial, p.d_in, p.d, p.heads, T, chunk, p.rope, p.norm_gain is not None,
                            d_par, d_chk, spikes_ok, ok)


def equivalence_suite(trials: int = 200, max_dim: int = 32, max_len: int = 64, tol: float = 1e-10,
                      seed: int = 0, heads_choices=(1, 2, 4), T: int | None = None) -> list[EquivalenceTrial]:
    rng = np.random.default_rng(seed)
    return [equivalence_trial(i, rng, max_dim, max_len, tol, heads_choices=heads_choices, T=T)
            for i in range(trials)]


@contextlib.contextmanager
def inject_fault(kind: str = "mask_exponent"):
    """Negative control: corrupt the parallel-mode astrocyte mask.

    ``mask_exponent`` raises every off-diagonal exponent by one, i.e. uses
    tau**(j - i - 1) below the diagonal.
    """
    if kind != "mask_exponent":
        raise ValueError(f"unknown fault {kind!r}")
    original = amsu._head_masks

    def faulty(T, taus, dtype):
        m = np.array(original(T, taus, dtype))
        for h, tau in enumerate(taus):
            off = np.tril(np.ones((T, T), dtype=bool), -1)
            m[h][off] /= tau
        return m

    amsu._head_masks = faulty
    try:
        yield
    finally:
        amsu._head_masks = original


# -- gradient checks -----------------------------------------------------------

@dataclass
class GradCheck:
    name: str
    rel_error: float
    passed: bool


def _op_cases(rng):
    """(name, leaf arrays, scalar function of leaves) for each differentiable op."""
    w = lambda *s: rng.normal(size=s)
    probes: dict[tuple, Tensor] = {}

    def probe(*s):
        # fixed random weighting per shape so every evaluation sees the same objective
        if s not in probes:
            probes[s] = Tensor(w(*s))
        return probes[s]

    ids = rng.integers(0, 5, size=(3, 4))
    gain = 1.0 + 0.1 * w(6)
    cos, sin = amsu.rope_tables(3, 4, 6)
    targets = rng.integers(0, 7, size=4)
    return [
        ("matmul", [w(3, 4), w(4, 2)], lambda a, b: tn.matmul(a, b).sum()),
        ("batched_matmul", [w(2, 3, 4), w(4, 5)], lambda a, b: (tn.matmul(a, b) * probe(2, 3, 5)).sum()),
        ("add_row_broadcast", [w(3, 4), w(4)], lambda a, b: ((a + b) * probe(3, 4)).sum()),
        ("sub", [w(3, 4), w(3, 4)], lambda a, b: ((a - b) * probe(3, 4)).sum()),
        ("mul", [w(3, 4), w(3, 4)], lambda a, b: (a * b).sum()),
        ("div", [w(3, 4), 2.0 + np.abs(w(3, 4))], lambda a, b: (a / b).sum()),
        ("scale", [w(5)], lambda a: (tn.scale(a, -1.7) * a).sum()),
        ("sigmoid", [w(3, 4)], lambda a: (tn.sigmoid(a) * probe(3, 4)).sum()),
        ("exp", [w(3, 4)], lambda a: tn.exp(a).sum()),
        ("transpose", [w(2, 3, 4)], lambda a: (tn.transpose(a, (2, 0, 1)) * probe(4, 2, 3)).sum()),
        ("reshape", [w(3, 4)], lambda a: (tn.reshape(a, (2, 6)) * probe(2, 6)).sum()),
        ("getitem", [w(4, 5)], lambda a: (a[1:3, ::2] * probe(2, 3)).sum()),
        ("stack", [w(3), w(3)], lambda a, b: (tn.stack([a, b], 1) * probe(3, 2)).sum()),
        ("concat", [w(2, 3), w(1, 3)], lambda a, b: (tn.concat([a, b], 0) * probe(3, 3)).sum()),
        ("sum_axis", [w(3, 4)], lambda a: (a.sum(axis=0) * probe(4)).sum()),
        ("mean", [w(3, 4)], lambda a: (a * a).mean()),
        ("embedding", [w(5, 6)], lambda t: (tn.embedding(t, ids) * probe(3, 4, 6)).sum()),
        ("rms_norm", [w(3, 6), gain], lambda a, g: (tn.rms_norm(a, g) * probe(3, 6)).sum()),
        ("cross_entropy", [w(4, 7)], lambda z: tn.cross_entropy_logits(z, targets)),
        ("rotary", [w(4, 6)], lambda a: (amsu._rotate(a, cos, sin) * probe(4, 6)).sum()),
    ]


def op_gradient_checks(seed: int = 0, tol: float = 1e-4) -> list[GradCheck]:
    rng = np.random.default_rng(seed)
    results = []
    for name, arrays, fn in _op_cases(rng):
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        with GradientTape() as tape:
            out = fn(*leaves)
        tn.backward(tape, out, leaves)
        datas = [t.data for t in leaves]

        def f():
            return fn(*[Tensor(d) for d in datas]).item()

        numeric = numerical_gradient(f, datas)
        err = max(rel_error(t.grad, n) for t, n in zip(leaves, numeric))
        results.append(GradCheck(f"op:{name}", err, err < tol))
    return results


def _small_model(seed: int, layers: int = 2, dim: int = 8, heads: int = 2, vocab: int = 11):
    cfg = ModelConfig(layers=layers, dim=dim, heads=heads, vocab=vocab, context_len=16,
                      dtype="f64", seed=seed, tau_a_min=1.5, tau_a_max=6.0)
    m = build_model(cfg)
    rng = np.random.default_rng(seed + 7)
    # the zero-initialised head would hide every gradient below it
    m.params["head"].data = rng.normal(0, 0.5, size=m.head.shape)
    return m


def model_gradient_checks(seed: int = 0, tol: float = 1e-4, layers: int = 2, T: int = 6) -> list[GradCheck]:
    """Smooth relaxation (sigmoid spikes): tape gradients vs central differences."""
    m = _small_model(seed, layers=layers)
    if m.num_parameters() == 0:
        return []
    rng = np.random.default_rng(seed)
    x = rng.integers(0, m.config.vocab, size=(2, T))
    y = rng.integers(0, m.config.vocab, size=(2, T))

    def loss():
        return tn.cross_entropy_logits(forward_lm(m, x, "parallel", relaxed=True), y)

    with GradientTape() as tape:
        out = loss()
    tn.backward(tape, out, m.params.values())
    names = list(m.params)
    numeric = numerical_gradient(lambda: loss().item(), [m.params[n].data for n in names])
    return [GradCheck(f"model:{n}", e, e < tol)
            for n, e in ((n, rel_error(m.params[n].grad, g)) for n, g in zip(names, numeric))]


def bptt_checks(seed: int = 0, tol: float = 1e-8, layers: int = 2, T: int = 10) -> list[GradCheck]:
    """With hard spikes and surrogate gradients, parallel backward equals recurrent BPTT."""
    m = _small_model(seed, layers=layers)
    rng = np.random.default_rng(seed + 3)
    x = rng.integers(0, m.config.vocab, size=(3, T))
    y = rng.integers(0, m.config.vocab, size=(3, T))
    grads = {}
    for mode in ("parallel", "recurrent", "chunked"):
        for p in m.params.values():
            p.grad = None
        with GradientTape() as tape:
            out = tn.cross_entropy_logits(forward_lm(m, x, mode, chunk=4), y)
        tn.backward(tape, out, m.params.values())
        grads[mode] = {n: p.grad.copy() for n, p in m.params.items()}
    results = []
    for mode in ("recurrent", "chunked"):
        for n in m.params:
            diff = float(np.abs(grads["parallel"][n] - grads[mode][n]).max())
            results.append(GradCheck(f"bptt:{mode}:{n}", diff, diff < tol))
    return results


def grad_check_suite(trials: int = 3, tol: float = 1e-4, bptt_tol: float = 1e-8, seed: int = 0) -> list[GradCheck]:
    out = []
    for t in range(trials):
        out += op_gradient_checks(seed + t, tol)
        out += model_gradient_checks(seed + t, tol)
        out += bptt_checks(seed + t, bptt_tol)
    return out


def histogram(values, edges=(0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, math.inf)) -> list[tuple[str, int]]:
    values = np.asarray(values)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        rows.append((f"[{lo:g}, {hi:g})", int(((values >= lo) & (values < hi)).sum())))
    return rows
