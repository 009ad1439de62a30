"""Decoder-only stack of AM-SU layers over a byte vocabulary, and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import amsu
from . import tensor as tn
from .amsu import AmSuParams, AmSuState
from .errors import CheckpointError, ConfigError, ParameterError, ShapeError
from .tensor import Tensor

MODES = ("recurrent", "parallel", "chunked")


def tau_schedule(heads: int, tau_min: float = 32.0, tau_max: float = 512.0) -> list[float]:
    """Geometrically spaced astrocyte time constants, one per head."""
    if heads < 1:
        raise ParameterError(f"heads must be >= 1, got {heads}")
    if not tau_min < tau_max:
        raise ParameterError(f"tau_min={tau_min} must be below tau_max={tau_max}")
    if heads == 1:
        return [float(tau_min)]
    ratio = tau_max / tau_min
    return [tau_min * ratio ** (h / (heads - 1)) for h in range(heads)]


def decay_divisors(tau_n: float, tau_a, efold: bool) -> tuple[float, tuple]:
    """Per-step decay divisors. With ``efold`` each time constant is read as an
    e-folding time, so the divisor is exp(1/tau) rather than tau itself."""
    if efold:
        return math.exp(1.0 / tau_n), tuple(math.exp(1.0 / t) for t in tau_a)
    return tau_n, tuple(tau_a)


@dataclass
class ModelConfig:
    layers: int = 2
    dim: int = 128
    heads: int = 8
    vocab: int = 256
    tau_n: float = 2.0
    tau_a_min: float = 32.0
    tau_a_max: float = 512.0
    efold: bool = False
    v_th: float = 0.0
    r: float = 1.0
    alpha: float = 2.0
    rope: bool = True
    norm: bool = True
    ffn: bool = False
    context_len: int = 256
    dtype: str = "f32"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide dim={self.dim}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if not (1 < self.tau_a_min < self.tau_a_max):
            raise ConfigError(f"need 1 < tau_a_min < tau_a_max, got {self.tau_a_min}, {self.tau_a_max}")
        if not self.tau_n > 1:
            raise ConfigError(f"tau_n must exceed 1, got {self.tau_n}")
        if self.rope and (self.dim // self.heads) % 2:
            raise ConfigError("RoPE needs an even head dimension")
        if self.context_len < 1:
            raise ConfigError("context_len must be >= 1")
        tn.resolve_dtype(self.dtype)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


class Model:
    """Embedding -> AM-SU layers (spikes between layers) -> linear head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.step = 0
        self.optim_moments: dict[str, np.ndarray] | None = None
        tau_n, taus = decay_divisors(config.tau_n, tau_schedule(config.heads, config.tau_a_min, config.tau_a_max),
                                     config.efold)
        self.layers: list[AmSuParams] = []
        for i in range(config.layers):
            p = lambda name: params.get(f"layers.{i}.{name}")
            self.layers.append(AmSuParams(
                p("w_x"), p("w_k"), p("w_v"), p("w_q"), heads=config.heads,
                tau_n=tau_n, tau_a=taus, v_th=config.v_th, r=config.r,
                alpha=config.alpha, rope=config.rope, norm_gain=p("norm_gain"),
                ffn_up=p("ffn_up"), ffn_down=p("ffn_down")))

    @property
    def embed(self) -> Tensor:
        return self.params["embed"]

    @property
    def head(self) -> Tensor:
        return self.params["head"]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_size(self) -> int:
        """Recurrent state values per sequence: layers * (d + heads * head_dim^2)."""
        c = self.config
        hd = c.dim // c.heads
        return c.layers * (c.dim + c.heads * hd * hd)

    def __call__(self, tokens, mode: str = "parallel", chunk: int | None = None) -> Tensor:
        return forward_lm(self, tokens, mode, chunk)


def build_model(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    dt = tn.resolve_dtype(config.dtype)
    d, V = config.dim, config.vocab
    std = 1.0 / math.sqrt(d)

    def normal(shape, s):
        return Tensor(rng.normal(0.0, s, size=shape).astype(dt), requires_grad=True)

    params = {"embed": normal((V, d), 1.0)}
    for i in range(config.layers):
        for name in ("w_x", "w_k", "w_v", "w_q"):
            params[f"layers.{i}.{name}"] = normal((d, d), std)
        if config.norm:
            params[f"layers.{i}.norm_gain"] = Tensor(np.ones(d, dtype=dt), requires_grad=True)
        if config.ffn:
            params[f"layers.{i}.ffn_up"] = normal((4 * d, d), std)
            params[f"layers.{i}.ffn_down"] = normal((d, 4 * d), 1.0 / math.sqrt(4 * d))
    # zero head: the untrained model predicts the uniform distribution exactly
    params["head"] = Tensor(np.zeros((V, d), dtype=dt), requires_grad=True)
    return Model(config, params)


# -- byte tokenizer ------------------------------------------------------

def encode(text) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def decode(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise IndexError("byte ids must lie in [0, 256)")
    return ids.astype(np.uint8).tobytes()


# -- forward -------------------------------------------------------------

def _check_tokens(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise TypeError(f"tokens must be integers, got {tokens.dtype}")
    if tokens.ndim not in (1, 2) or tokens.shape[-1] < 1:
        raise ShapeError(f"tokens must be (T,) or (B, T) with T >= 1, got {tokens.shape}")
    if tokens.shape[-1] > model.config.context_len:
        raise ShapeError(f"sequence length {tokens.shape[-1]} exceeds context_len {model.config.context_len}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise IndexError(f"token id out of range [0, {model.config.vocab})")
    return tokens


def forward_lm(model: Model, tokens, mode: str = "parallel", chunk: int | None = None,
               relaxed: bool = False) -> Tensor:
    """Next-token logits for every position, shape tokens.shape + (vocab,)."""
    tokens = _check_tokens(model, tokens)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    x = tn.embedding(model.embed, tokens)
    if mode == "recurrent":
        states = init_states(model, tokens.shape[:-1])
        rows = []
        for t in range(tokens.shape[-1]):
            s = tn.getitem(x, (Ellipsis, t, slice(None)))
            for i, layer in enumerate(model.layers):
                s, pre, states[i] = amsu.step_recurrent(layer, states[i], s, relaxed)
            rows.append(pre)
        pre = tn.stack(rows, axis=-2)
    else:
        s = x
        for layer in model.layers:
            if mode == "parallel":
                s, pre = amsu.forward_parallel(layer, s, relaxed)
            else:
                s, pre, _ = amsu.forward_chunked(layer, s, chunk or 64, None, relaxed)
    return amsu.linear(pre, model.head)


def init_states(model: Model, batch: tuple = ()) -> list[AmSuState]:
    return [AmSuState.zeros(layer, tuple(batch)) for layer in model.layers]


def step_lm(model: Model, states: list[AmSuState], token) -> tuple[Tensor, list[AmSuState]]:
    """Feed one token (or a batch of tokens) through the stack in recurrent mode."""
    token = np.asarray(token)
    if token.min() < 0 or token.max() >= model.config.vocab:
        raise IndexError(f"token id out of range [0, {model.config.vocab})")
    s = tn.embedding(model.embed, token)
    new = []
    for layer, st in zip(model.layers, states):
        s, pre, st = amsu.step_recurrent(layer, st, s)
        new.append(st)
    return amsu.linear(pre, model.head), new


# -- checkpoints ---------------------------------------------------------

MAGIC = b"ASNN"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(model: Model, path, step: int | None = None,
                    moments: dict[str, np.ndarray] | None = None) -> None:
    """Write the model (and optional optimizer moments) in the ASNN v1 format."""
    blob = dict(model.config.to_dict())
    blob["step"] = int(model.step if step is None else step)
    cfg = json.dumps(blob, sort_keys=True).encode("utf-8")
    table = [(name, t.data) for name, t in model.params.items()]
    moments = model.optim_moments if moments is None else moments
    if moments:
        table += [(f"optim.{name}", np.asarray(a)) for name, a in moments.items()]

    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<Q", len(cfg)) + cfg
    out += struct.pack("<I", len(table))
    for name, arr in table:
        raw = name.encode("utf-8")
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated in {section} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its JSON blob and named tensor table."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "header") != MAGIC:
        raise CheckpointError("bad magic in header: not an ASNN checkpoint")
    (version,) = r.unpack("<I", "header")
    if version != VERSION:
        raise CheckpointError(f"header version {version} is not supported (expected {VERSION})")
    (n,) = r.unpack("<Q", "config")
    try:
        blob = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"config section is not valid JSON: {e}") from None
    (count,) = r.unpack("<I", "tensor table")
    tensors = {}
    for i in range(count):
        section = f"tensor table entry {i}"
        (ln,) = r.unpack("<H", section)
        name = r.take(ln, section).decode("utf-8", errors="replace")
        section = f"tensor table entry {i} ({name!r})"
        tag, rank = r.unpack("<BB", section)
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{section}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}Q", section)
        dt = _DTYPE_TAGS[tag]
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize, section + " data")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after tensor table")
    return blob, tensors


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    blob, tensors = read_checkpoint(path)
    step = int(blob.pop("step", 0))
    config = ModelConfig.from_dict(blob)
    if expected is not None:
        mine, theirs = config.to_dict(), expected.to_dict()
        diff = {k: (mine[k], theirs[k]) for k in mine if k != "seed" and mine[k] != theirs[k]}
        if diff:
            raise ConfigError("checkpoint config does not match expected: "
                              + ", ".join(f"{k}={a!r} (expected {b!r})" for k, (a, b) in diff.items()))
    template = build_model(config)
    params = {}
    for name, ref in template.params.items():
        if name not in tensors:
            raise CheckpointError(f"tensor table is missing {name!r}")
        arr = tensors[name]
        if arr.shape != ref.shape or arr.dtype != ref.dtype:
            raise ConfigError(f"tensor {name!r} is {arr.dtype}{arr.shape}, config implies {ref.dtype}{ref.shape}")
        params[name] = Tensor(arr, requires_grad=True)
    model = Model(config, params)
    model.step = step
    moments = {k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")}
    model.optim_moments = moments or None
    return model
