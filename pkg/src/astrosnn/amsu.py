"""Astrocyte-modulated spiking unit, plus LIF/ALIF reference cells.

One layer keeps two pieces of state per sequence: a membrane vector ``u``
(width d) and, for each head, an astrocyte matrix ``H`` (head_dim x head_dim).
Per step, with x = W_x s::

    u' = u / tau_n + sigmoid(x) * R
    H' = H / tau_a + v k^T / sqrt(head_dim)       (per head)
    pre = concat_h(H' q) + u'
    spikes = 1[pre >= v_th]

Because the state is linear in time, the same pre-activations come out of a
masked-attention form over a whole sequence (:func:`forward_parallel`) and a
blockwise form with carried state (:func:`forward_chunked`).  All three
routes share weights and agree to round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .errors import ConfigError, NumericError, ParameterError, ShapeError
from .tensor import Tensor

ROPE_BASE = 10000.0


# -- parameters and state ------------------------------------------------

@dataclass(frozen=True, eq=False)
class AmSuParams:
    w_x: Tensor  # d x d_in
    w_k: Tensor  # d x d
    w_v: Tensor
    w_q: Tensor
    heads: int = 1
    tau_n: float = 2.0
    tau_a: tuple = (2.0,)
    v_th: float = 0.0
    r: float = 1.0
    alpha: float = 2.0
    rope: bool = True
    norm_gain: Tensor | None = None
    ffn_up: Tensor | None = None  # 4d x d
    ffn_down: Tensor | None = None  # d x 4d

    def __post_init__(self):
        object.__setattr__(self, "tau_a", tuple(float(t) for t in self.tau_a))
        d = self.w_x.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide width d={d}")
        for name in ("w_k", "w_v", "w_q"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if len(self.tau_a) != self.heads:
            raise ConfigError(f"need one tau_a per head: {len(self.tau_a)} for {self.heads} heads")
        if not self.tau_n > 1 or not all(t > 1 for t in self.tau_a):
            raise ParameterError("time constants must exceed 1 (decay, not growth)")
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if self.rope and self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head_dim, got {self.head_dim}")
        for w in self.weights():
            if not np.isfinite(w.data).all():
                raise NumericError("non-finite weight")

    @property
    def d(self) -> int:
        return self.w_x.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_x.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def dtype(self) -> np.dtype:
        return self.w_x.dtype

    def weights(self) -> list[Tensor]:
        ws = [self.w_x, self.w_k, self.w_v, self.w_q]
        return ws + [w for w in (self.norm_gain, self.ffn_up, self.ffn_down) if w is not None]

    @classmethod
    def init(cls, d_in: int, d: int, heads: int = 1, *, rng=None, dtype="f64",
             requires_grad: bool = False, norm: bool = False, ffn: bool = False, **kw) -> "AmSuParams":
        """Random weights with N(0, 1/d) entries."""
        rng = np.random.default_rng(rng)
        dt = tn.resolve_dtype(dtype)
        std = 1.0 / math.sqrt(d)

        def w(*shape):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=requires_grad)

        kw.setdefault("tau_a", (kw.get("tau_n", 2.0),) * heads)
        extra = {}
        if norm:
            extra["norm_gain"] = Tensor(np.ones(d, dtype=dt), requires_grad=requires_grad)
        if ffn:
            extra["ffn_up"] = w(4 * d, d)
            extra["ffn_down"] = w(d, 4 * d)
        return cls(w(d, d_in), w(d, d), w(d, d), w(d, d), heads=heads, **extra, **kw)


@dataclass
class AmSuState:
    u: Tensor  # (..., d)
    H: Tensor  # (..., heads, head_dim, head_dim)
    t: int = 0

    @classmethod
    def zeros(cls, params: AmSuParams, batch: tuple = ()) -> "AmSuState":
        batch = tuple(batch)
        dt = params.dtype
        hd = params.head_dim
        return cls(Tensor(np.zeros(batch + (params.d,), dtype=dt)),
                   Tensor(np.zeros(batch + (params.heads, hd, hd), dtype=dt)), 0)

    def size(self) -> int:
        """Number of stored state values (excluding the position counter)."""
        return int(self.u.data.size + self.H.data.size)

    def detach(self) -> "AmSuState":
        return AmSuState(self.u.detach(), self.H.detach(), self.t)


@dataclass(frozen=True)
class DecayMask:
    T: int
    tau: float
    values: np.ndarray = field(repr=False)


# -- masks and rotary tables ---------------------------------------------

def decay_mask(T: int, tau: float, dtype="f64") -> DecayMask:
    """Causal T x T mask with M[i, j] = tau**(j - i) for i >= j, else 0."""
    return DecayMask(int(T), float(tau), _mask_values(int(T), float(tau), tn.resolve_dtype(dtype).str))


@lru_cache(maxsize=256)
def _mask_values(T: int, tau: float, dtype: str) -> np.ndarray:
    if T < 1:
        raise ParameterError(f"mask length must be >= 1, got {T}")
    if not tau > 1:
        raise ParameterError(f"tau must exceed 1, got {tau}")
    dist = np.arange(T)[:, None] - np.arange(T)[None, :]
    with np.errstate(under="ignore"):
        m = np.where(dist >= 0, np.power(tau, -np.maximum(dist, 0).astype(np.float64)), 0.0)
    dt = np.dtype(dtype)
    m[m < np.finfo(dt).tiny] = 0.0
    m = m.astype(dt)
    m.flags.writeable = False
    return m


@lru_cache(maxsize=64)
def _head_masks(T: int, taus: tuple, dtype: str) -> np.ndarray:
    m = np.stack([_mask_values(T, tau, dtype) for tau in taus])
    m.flags.writeable = False
    return m


def _decay_powers(taus, exponents, dtype) -> np.ndarray:
    """taus**(-exponents) as a (len(taus), len(exponents)) array, underflow flushed."""
    taus = np.asarray(taus, dtype=np.float64)[:, None]
    e = np.asarray(exponents, dtype=np.float64)[None, :]
    with np.errstate(under="ignore"):
        p = np.power(taus, -e)
    dt = np.dtype(dtype)
    p[p < np.finfo(dt).tiny] = 0.0
    return p.astype(dt)


def rope_tables(start: int, T: int, head_dim: int, dtype="f64") -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (T, head_dim); both entries of a pair share an angle."""
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {head_dim}")
    theta = ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.arange(start, start + T, dtype=np.float64)[:, None] * theta[None, :]
    angles = np.repeat(angles, 2, axis=1)
    dt = tn.resolve_dtype(dtype)
    return np.cos(angles).astype(dt), np.sin(angles).astype(dt)


def _swap_pairs(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[..., 0::2] = -a[..., 1::2]
    out[..., 1::2] = a[..., 0::2]
    return out


def _rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    xd = x.data
    y = xd * cos + _swap_pairs(xd) * sin

    def vjp(g):
        return (_unbroadcast_like(g * cos - _swap_pairs(g * sin), xd.shape),)

    return tn.apply_op(y, (x,), vjp)


def _unbroadcast_like(g: np.ndarray, shape: tuple) -> np.ndarray:
    return g if g.shape == shape else tn._unbroadcast(g, shape)


def rope_apply(x: Tensor, start_pos: int = 0) -> Tensor:
    """Rotate consecutive pairs of ``x`` (..., T, head_dim) by position * theta_i."""
    x = tn.as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"rope_apply expects (..., T, head_dim), got {x.shape}")
    T, hd = x.shape[-2], x.shape[-1]
    cos, sin = rope_tables(start_pos, T, hd, x.dtype)
    return _rotate(x, cos, sin)


# -- building blocks -----------------------------------------------------

def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T over the last axis of x; x may be a vector."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {w.shape}")
    if x.ndim == 1:
        return tn.reshape(tn.matmul(tn.reshape(x, (1, -1)), tn.transpose(w)), (w.shape[0],))
    return tn.matmul(x, tn.transpose(w))


def _project(params: AmSuParams, s: Tensor) -> Tensor:
    x = linear(s, params.w_x)
    if params.norm_gain is not None:
        x = tn.rms_norm(x, params.norm_gain)
    return x


def _readout(params: AmSuParams, pre: Tensor, relaxed: bool) -> tuple[Tensor, Tensor]:
    if params.ffn_up is not None:
        pre = pre + linear(tn.sigmoid(linear(pre, params.ffn_up)), params.ffn_down)
    if relaxed:
        spikes = tn.sigmoid(tn.scale(pre - params.v_th, params.alpha))
    else:
        spikes = tn.heaviside_ste(pre, params.v_th, params.alpha)
    return spikes, pre


def _swap_axes(x: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return tn.transpose(x, axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, d) -> (..., heads, T, head_dim)."""
    lead = x.shape[:-1]
    x = tn.reshape(x, lead + (heads, x.shape[-1] // heads))
    return _swap_axes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, head_dim) -> (..., T, d)."""
    x = _swap_axes(x, -3, -2)
    return tn.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _check_input(params: AmSuParams, s: Tensor, min_rank: int) -> Tensor:
    s = tn.as_tensor(s, like=params.w_x)
    if s.dtype != params.dtype:
        s = Tensor(s.data.astype(params.dtype))
    if s.ndim < min_rank or s.shape[-1] != params.d_in:
        raise ShapeError(f"input shape {s.shape} incompatible with d_in={params.d_in}")
    return s


def _check_state(params: AmSuParams, state: AmSuState, batch: tuple) -> None:
    hd = params.head_dim
    if state.u.shape != batch + (params.d,) or state.H.shape != batch + (params.heads, hd, hd):
        raise ShapeError(f"state shapes u={state.u.shape}, H={state.H.shape} do not match "
                         f"batch {batch}, d={params.d}, heads={params.heads}")
    if not (np.isfinite(state.u.data).all() and np.isfinite(state.H.data).all()):
        raise NumericError("non-finite AM-SU state")


# -- the three execution modes -------------------------------------------

def step_recurrent(params: AmSuParams, state: AmSuState, s_in, relaxed: bool = False):
    """Advance one position.  Returns ``(spikes, pre_activation, new_state)``."""
    s = _check_input(params, s_in, 1)
    batch = s.shape[:-1]
    _check_state(params, state, batch)
    h, hd = params.heads, params.head_dim

    x = _project(params, s)
    u = tn.scale(state.u, 1.0 / params.tau_n) + tn.scale(tn.sigmoid(x), params.r)
    k = tn.reshape(linear(x, params.w_k), batch + (h, hd))
    v = tn.reshape(linear(x, params.w_v), batch + (h, hd))
    q = tn.reshape(linear(x, params.w_q), batch + (h, hd))
    if params.rope:
        cos, sin = rope_tables(state.t, 1, hd, params.dtype)
        k, q = _rotate(k, cos[0], sin[0]), _rotate(q, cos[0], sin[0])

    outer = tn.matmul(tn.reshape(v, batch + (h, hd, 1)), tn.reshape(k, batch + (h, 1, hd)))
    decay = Tensor((1.0 / np.asarray(params.tau_a)).reshape(h, 1, 1).astype(params.dtype))
    H = state.H * decay + tn.scale(outer, 1.0 / math.sqrt(hd))
    o = tn.reshape(tn.matmul(H, tn.reshape(q, batch + (h, hd, 1))), batch + (params.d,))
    spikes, pre = _readout(params, o + u, relaxed)
    return spikes, pre, AmSuState(u, H, state.t + 1)


def _block(params: AmSuParams, S: Tensor, start: int, carry: AmSuState | None, want_state: bool):
    """Pre-activations for one block of positions, optionally with carried state."""
    T = S.shape[-2]
    batch = S.shape[:-2]
    h, hd, dt = params.heads, params.head_dim, params.dtype

    X = _project(params, S)
    I = tn.sigmoid(X)
    K = _split_heads(linear(X, params.w_k), h)
    V = _split_heads(linear(X, params.w_v), h)
    Q = _split_heads(linear(X, params.w_q), h)
    if params.rope:
        cos, sin = rope_tables(start, T, hd, dt)
        K, Q = _rotate(K, cos, sin), _rotate(Q, cos, sin)

    m_a = Tensor(_head_masks(T, params.tau_a, dt.str))
    scores = tn.matmul(Q, tn.transpose(K)) * m_a
    O = tn.scale(tn.matmul(scores, V), 1.0 / math.sqrt(hd))
    m_n = Tensor(_mask_values(T, params.tau_n, dt.str))
    U = tn.scale(tn.matmul(m_n, I), params.r)

    if carry is not None:
        steps = np.arange(1, T + 1)
        w_q = Tensor(_decay_powers(params.tau_a, steps, dt)[:, :, None])  # (h, T, 1)
        O = O + tn.matmul(Q, tn.transpose(carry.H)) * w_q
        w_n = Tensor(_decay_powers([params.tau_n], steps, dt).reshape(T, 1))
        U = U + tn.matmul(w_n, tn.reshape(carry.u, batch + (1, params.d)))

    pre = _merge_heads(O) + U
    if not want_state:
        return pre, None

    w_k = Tensor(_decay_powers(params.tau_a, np.arange(T - 1, -1, -1), dt)[:, None, :])  # (h, 1, T)
    H = tn.scale(tn.matmul(tn.transpose(V) * w_k, K), 1.0 / math.sqrt(hd))
    if carry is not None:
        H = H + carry.H * Tensor(_decay_powers(params.tau_a, [T], dt).reshape(h, 1, 1))
    u = tn.getitem(U, (Ellipsis, T - 1, slice(None)))
    t0 = carry.t if carry is not None else start
    return pre, AmSuState(u, H, t0 + T)


def forward_parallel(params: AmSuParams, S_in, relaxed: bool = False):
    """Whole-sequence masked form from zero state.  Returns ``(spikes, pre)``."""
    S = _check_input(params, S_in, 2)
    if S.shape[-2] < 1:
        raise ShapeError("sequence must have at least one position")
    pre, _ = _block(params, S, 0, None, False)
    return _readout(params, pre, relaxed)


def forward_chunked(params: AmSuParams, S_in, chunk: int, state: AmSuState | None = None,
                    relaxed: bool = False):
    """Blockwise form: parallel inside each chunk, state carried between chunks.

    Returns ``(spikes, pre, new_state)``; ``state=None`` starts from zeros.
    """
    S = _check_input(params, S_in, 2)
    T = S.shape[-2]
    if chunk < 1:
        raise ParameterError(f"chunk must be >= 1, got {chunk}")
    batch = S.shape[:-2]
    if state is None:
        state = AmSuState.zeros(params, batch)
    _check_state(params, state, batch)

    pres = []
    for s0 in range(0, T, chunk):
        block = tn.getitem(S, (Ellipsis, slice(s0, min(s0 + chunk, T)), slice(None)))
        pre, state = _block(params, block, state.t, state, True)
        pres.append(pre)
    pre = pres[0] if len(pres) == 1 else tn.concat(pres, axis=-2)
    spikes, pre = _readout(params, pre, relaxed)
    return spikes, pre, state


def forward_recurrent(params: AmSuParams, S_in, state: AmSuState | None = None,
                      relaxed: bool = False):
    """Loop :func:`step_recurrent` over the time axis.  Returns ``(spikes, pre, state)``."""
    S = _check_input(params, S_in, 2)
    batch = S.shape[:-2]
    if state is None:
        state = AmSuState.zeros(params, batch)
    spikes, pres = [], []
    for t in range(S.shape[-2]):
        s_t = tn.getitem(S, (Ellipsis, t, slice(None)))
        s, p, state = step_recurrent(params, state, s_t, relaxed)
        spikes.append(s)
        pres.append(p)
    return tn.stack(spikes, axis=-2), tn.stack(pres, axis=-2), state


# -- baseline cells ------------------------------------------------------

def lif_step(w: Tensor, tau: float, v_th: float, u: Tensor, s_in, alpha: float = 2.0,
             return_potential: bool = False):
    """Leaky integrate-and-fire with hard reset: u' = u/tau + W s."""
    s_in = tn.as_tensor(s_in, like=w)
    if u.shape[-1] != w.shape[0]:
        raise ShapeError(f"membrane width {u.shape} does not match weight {w.shape}")
    v = tn.scale(u, 1.0 / tau) + linear(s_in, w)
    spikes = tn.heaviside_ste(v, v_th, alpha)
    u_next = v * Tensor(1.0 - spikes.data)
    return (spikes, u_next, v) if return_potential else (spikes, u_next)


@dataclass
class AlifState:
    u: Tensor
    a: Tensor
    s: Tensor  # this layer's spikes from the previous step

    @classmethod
    def zeros(cls, d: int, batch: tuple = (), dtype="f64") -> "AlifState":
        dt = tn.resolve_dtype(dtype)
        z = lambda: Tensor(np.zeros(tuple(batch) + (d,), dtype=dt))
        return cls(z(), z(), z())


ALIF_RHO = math.exp(-1.0 / 200.0)
ALIF_BETA = 1.8
ALIF_B0 = 1.0


def alif_step(w: Tensor, w_rec: Tensor, tau: float, rho: float, beta: float, b0: float,
              state: AlifState, s_in, alpha: float = 2.0, return_potential: bool = False):
    """Adaptive-threshold LIF with autaptic input from the layer's own last spikes.

    a' = rho a + (1 - rho) s_prev;  theta = b0 + beta a';
    u' = u/tau + W s_in + W_rec s_prev;  spike where u' >= theta, then hard reset.
    """
    s_in = tn.as_tensor(s_in, like=w)
    if state.u.shape[-1] != w.shape[0] or w_rec.shape != (w.shape[0], w.shape[0]):
        raise ShapeError(f"ALIF shapes disagree: u={state.u.shape}, w={w.shape}, w_rec={w_rec.shape}")
    a = tn.scale(state.a, rho) + tn.scale(state.s, 1.0 - rho)
    theta = tn.scale(a, beta) + b0
    v = tn.scale(state.u, 1.0 / tau) + linear(s_in, w) + linear(state.s, w_rec)
    spikes = tn.heaviside_ste(v - theta, 0.0, alpha)
    u_next = v * Tensor(1.0 - spikes.data)
    new = AlifState(u_next, a, spikes)
    return (spikes, new, v - theta) if return_potential else (spikes, new)
