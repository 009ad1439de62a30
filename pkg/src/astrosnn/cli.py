"""Command-line entry point: ``astrosnn <command> [options]``.

Every option can also come from a flat ``key=value`` file passed with
``--config``; explicit flags win over the file, the file wins over defaults.
Each run writes ``config.txt`` into its output directory, and replaying that
file with ``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench, tasks, verify
from .errors import AstroError, ConfigError
from .model import (MODES, ModelConfig, build_model, decode, encode, init_states, load_checkpoint,
                    step_lm)
from .train import LOG_COLUMNS, OptimConfig, eval_bpc_ppl, split_corpus, train_lm

log = logging.getLogger("astrosnn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s) -> tuple[int, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _names(s) -> tuple[str, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(s)
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


@dataclass(frozen=True)
class Opt:
    type: object
    default: object
    help: str = ""


COMMON = {
    "seed": Opt(int, 0, "random seed"),
    "out": Opt(str, "", "output directory (default runs/<command>)"),
    "dtype": Opt(str, "f32", "floating point precision: f32 or f64"),
    "mode": Opt(str, "parallel", "execution mode: recurrent, parallel or chunked"),
    "chunk": Opt(int, 64, "chunk length for chunked mode"),
    "jobs": Opt(int, 1, "worker processes for sweeps (1 = serial)"),
}

_MODEL = {
    "layers": Opt(int, 2), "dim": Opt(int, 128), "heads": Opt(int, 8),
    "context_len": Opt(int, 256), "tau_n": Opt(float, 2.0),
    "tau_a_min": Opt(float, 32.0), "tau_a_max": Opt(float, 512.0),
    "efold": Opt(_bool, False, "read time constants as e-folding times"),
    "rope": Opt(_bool, True), "norm": Opt(_bool, True), "ffn": Opt(_bool, False),
}

_TASK = {
    "task": Opt(str, "memory", "memory or umbrella"),
    "steps": Opt(int, 300, "training steps per point"),
    "batch_size": Opt(int, 64), "lr": Opt(float, 3e-3),
    "dim": Opt(int, 64), "layers": Opt(int, 2), "heads": Opt(int, 8),
    "eval_episodes": Opt(int, 1000),
    "efold": Opt(_bool, True, "read AM-SU time constants as e-folding times"),
    "tau_n": Opt(float, 2.0), "tau_a_min": Opt(float, 32.0), "tau_a_max": Opt(float, 512.0),
}

COMMANDS: dict[str, dict[str, Opt]] = {
    "verify-equivalence": {
        "dtype": Opt(str, "f64"),
        "trials": Opt(int, 200), "max_dim": Opt(int, 32), "max_len": Opt(int, 64),
        "tolerance": Opt(float, 1e-10),
        "inject_fault": Opt(str, "", "negative control: mask_exponent"),
    },
    "grad-check": {
        "dtype": Opt(str, "f64"),
        "trials": Opt(int, 3), "tolerance": Opt(float, 1e-4), "bptt_tolerance": Opt(float, 1e-8),
    },
    "train-lm": {
        "corpus": Opt(str, "", "training text file"),
        **_MODEL,
        "steps": Opt(int, 20_000), "warmup_steps": Opt(int, 100), "batch_size": Opt(int, 8),
        "peak_lr": Opt(float, 2.5e-4), "min_lr": Opt(float, 6e-5),
        "weight_decay": Opt(float, 0.1), "clip_norm": Opt(float, 1.0),
        "holdout": Opt(float, 0.1, "fraction of the corpus held out for evaluation"),
        "eval_every": Opt(int, 1000), "eval_windows": Opt(int, 64, "0 = whole held-out split"),
        "checkpoint_every": Opt(int, 1000),
        "target_bpc": Opt(float, 0.0, "stop once held-out BPC falls below this (0 = off)"),
        "resume": Opt(_bool, False, "continue from <out>/model.ckpt"),
    },
    "eval-lm": {
        "checkpoint": Opt(str, ""), "corpus": Opt(str, ""),
        "holdout": Opt(float, 0.1, "evaluate the trailing fraction only (0 = whole file)"),
        "max_windows": Opt(int, 0, "0 = all windows"),
    },
    "generate": {
        "checkpoint": Opt(str, ""), "prompt": Opt(str, ""),
        "length": Opt(int, 200), "temperature": Opt(float, 1.0),
    },
    "train-task": {
        **_TASK, "cell": Opt(str, "amsu"), "length": Opt(int, 100),
    },
    "sweep-task": {
        **_TASK, "cells": Opt(_names, ("amsu", "lif", "alif")),
        "lengths": Opt(_ints, (), "comma list; empty = log-spaced up to max_len"),
        "max_len": Opt(int, 512), "points": Opt(int, 8),
    },
    "bench": {
        "lengths": Opt(_ints, bench.DEFAULT_LENGTHS), "dim": Opt(int, 128), "layers": Opt(int, 2),
        "heads": Opt(int, 8), "repeats": Opt(int, 7), "warmup": Opt(int, 2), "tokens": Opt(int, 64),
    },
}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)
    out: Path = Path(".")

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def snapshot(self) -> str:
        lines = [f"command={self.command}"]
        for k, v in self.values.items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


def options_for(command: str) -> dict[str, Opt]:
    return {**COMMON, **COMMANDS[command]}


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, cli: dict, file_values: dict | None = None) -> RunConfig:
    """Merge defaults < config file < CLI flags, rejecting unknown keys."""
    opts = options_for(command)
    file_values = dict(file_values or {})
    cmd = file_values.pop("command", command)
    if cmd != command:
        raise ConfigError(f"config file is for {cmd!r}, not {command!r}")
    unknown = sorted(set(file_values) - set(opts))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    values = {}
    for k, o in opts.items():
        raw = cli.get(k)
        if raw is None:
            raw = file_values.get(k, o.default)
        try:
            values[k] = o.type(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {k}: {raw!r} ({e})") from None
    if values["dtype"] not in ("f32", "f64"):
        raise ConfigError(f"dtype must be f32 or f64, got {values['dtype']!r}")
    if values["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {values['mode']!r}")
    if values["chunk"] < 1 or values["jobs"] < 1:
        raise ConfigError("chunk and jobs must be >= 1")
    out = Path(values["out"] or Path("runs") / command)
    values["out"] = str(out)
    return RunConfig(command, values, out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="astrosnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value file; flags override it")
        for k, o in options_for(name).items():
            flag = "--" + k.replace("_", "-")
            default = o.default
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            # None means "not given" so the config file can supply it
            sp.add_argument(flag, dest=k, default=None, metavar=k.upper(),
                            help=f"{o.help} [default: {default}]".strip())
    return p


# -- reports -------------------------------------------------------------------

def _write_table(cfg: RunConfig, name: str, rows: list[dict], columns=None) -> None:
    bench.write_rows(rows, cfg.out / f"{name}.csv", columns)


def _write_report(cfg: RunConfig, report: dict) -> None:
    (cfg.out / "report.json").write_text(json.dumps(report, indent=2, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(type(v).__name__)


# -- commands ------------------------------------------------------------------

def cmd_verify_equivalence(cfg: RunConfig) -> int:
    def run():
        return verify.equivalence_suite(cfg.trials, cfg.max_dim, cfg.max_len, cfg.tolerance, cfg.seed)

    if cfg.inject_fault:
        with verify.inject_fault(cfg.inject_fault):
            trials = run()
    else:
        trials = run()
    rows = [t.row() for t in trials]
    _write_table(cfg, "equivalence", rows)
    failed = [t.trial for t in trials if not t.passed]
    worst = max((max(t.diff_parallel, t.diff_chunked) for t in trials), default=0.0)
    _write_report(cfg, dict(trials=len(trials), failed=len(failed), failed_trials=failed,
                            max_abs_diff=worst, tolerance=cfg.tolerance, passed=not failed, trial_rows=rows))
    print(f"{len(trials) - len(failed)}/{len(trials)} trials passed; max |diff| = {worst:.3e}")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_grad_check(cfg: RunConfig) -> int:
    if cfg.dtype != "f64":
        raise ConfigError("grad-check runs finite differences and needs dtype=f64")
    checks = verify.grad_check_suite(cfg.trials, cfg.tolerance, cfg.bptt_tolerance, cfg.seed)
    rows = [dict(name=c.name, error=c.rel_error, passed=c.passed) for c in checks]
    _write_table(cfg, "grad_check", rows, ["name", "error", "passed"])
    fd = [c.rel_error for c in checks if not c.name.startswith("bptt")]
    bp = [c.rel_error for c in checks if c.name.startswith("bptt")]
    hist = verify.histogram(fd)
    _write_table(cfg, "rel_error_histogram", [dict(bin=b, count=n) for b, n in hist])
    failed = [c.name for c in checks if not c.passed]
    report = dict(checks=len(checks), failed=failed, max_rel_error=max(fd, default=0.0),
                  max_bptt_diff=max(bp, default=0.0), histogram=hist, passed=not failed)
    _write_report(cfg, report)
    for b, n in hist:
        print(f"  {b:>18}  {n}")
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed; max rel error {report['max_rel_error']:.2e}, "
          f"max BPTT diff {report['max_bptt_diff']:.2e}")
    return EXIT_OK if not failed else EXIT_FAIL


def _read_corpus(path: str) -> bytes:
    if not path:
        raise ConfigError("corpus path is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus not found: {p}")
    return p.read_bytes()


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(layers=cfg.layers, dim=cfg.dim, heads=cfg.heads, context_len=cfg.context_len,
                       tau_n=cfg.tau_n, tau_a_min=cfg.tau_a_min, tau_a_max=cfg.tau_a_max,
                       efold=cfg.efold, rope=cfg.rope, norm=cfg.norm, ffn=cfg.ffn, dtype=cfg.dtype, seed=cfg.seed).validate()


def cmd_train_lm(cfg: RunConfig) -> int:
    train, held = split_corpus(_read_corpus(cfg.corpus), cfg.holdout)
    mcfg = _model_config(cfg)
    ckpt = cfg.out / "model.ckpt"
    if cfg.resume and ckpt.exists():
        model = load_checkpoint(ckpt, expected=mcfg)
        log.info("resuming from step %d", model.step)
    else:
        model = build_model(mcfg)
    ocfg = OptimConfig(peak_lr=cfg.peak_lr, min_lr=cfg.min_lr, warmup_steps=cfg.warmup_steps,
                       total_steps=cfg.steps, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
                       batch_size=cfg.batch_size, seq_len=cfg.context_len)

    def progress(row):
        if row["step"] % 100 == 0:
            log.info("step %d  loss %.4f  bpc %.4f  lr %.2e", row["step"], row["loss_nats"], row["bpc"], row["lr"])

    result = train_lm(model, train, ocfg, seed=cfg.seed, callbacks=[progress],
                      log_path=cfg.out / "train_log.csv", checkpoint_path=ckpt,
                      checkpoint_every=cfg.checkpoint_every, eval_corpus=held if len(held) > 1 else None,
                      eval_every=cfg.eval_every, eval_windows=cfg.eval_windows or None,
                      target_bpc=cfg.target_bpc or None)
    if result.evals:
        _write_table(cfg, "evals", result.evals, ["step", "bpc", "ppl"])
    final = result.evals[-1] if result.evals else None
    _write_report(cfg, dict(steps=model.step, stopped_early=result.stopped_early, final_eval=final,
                            evals=result.evals, log_columns=LOG_COLUMNS,
                            last=result.log[-1] if result.log else None))
    print(f"trained to step {model.step}" + (f"; held-out bpc {final['bpc']:.4f}" if final else ""))
    if cfg.target_bpc and not (final and final["bpc"] < cfg.target_bpc):
        return EXIT_FAIL
    return EXIT_OK


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("checkpoint path is required")
    if not Path(cfg.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
    return load_checkpoint(cfg.checkpoint)


def cmd_eval_lm(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    data = _read_corpus(cfg.corpus)
    if cfg.holdout:
        data = split_corpus(data, cfg.holdout)[1]
    bpc, ppl = eval_bpc_ppl(model, data, mode=cfg.mode, max_windows=cfg.max_windows or None)
    _write_table(cfg, "eval", [dict(step=model.step, bytes=len(data), bpc=bpc, ppl=ppl)])
    _write_report(cfg, dict(step=model.step, bytes=len(data), bpc=bpc, ppl=ppl))
    print(f"bpc {bpc:.4f}  ppl {ppl:.4f}")
    return EXIT_OK


def sample_tokens(model, prompt: bytes, length: int, temperature: float, seed: int) -> tuple[list[int], np.ndarray]:
    """Autoregressive sampling in recurrent mode; returns new tokens and their logits."""
    if temperature < 0:
        raise ConfigError("temperature must be >= 0")
    rng = np.random.default_rng(seed)
    states = init_states(model)
    ids = list(encode(prompt)) or [ord("\n")]
    logits = None
    for tok in ids:
        logits, states = step_lm(model, states, tok)
    out, seen = [], []
    for _ in range(length):
        z = logits.data.astype(np.float64)
        seen.append(z)
        if temperature == 0:
            nxt = int(z.argmax())
        else:
            p = np.exp((z - z.max()) / temperature)
            nxt = int(rng.choice(len(p), p=p / p.sum()))
        out.append(nxt)
        logits, states = step_lm(model, states, nxt)
    return out, np.array(seen).reshape(len(seen), -1)


def cmd_generate(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    tokens, _ = sample_tokens(model, cfg.prompt.encode("utf-8"), cfg.length, cfg.temperature, cfg.seed)
    text = decode(tokens)
    (cfg.out / "sample.txt").write_bytes(text)
    _write_report(cfg, dict(prompt=cfg.prompt, tokens=tokens, text=text.decode("utf-8", "replace")))
    sys.stdout.write(cfg.prompt + text.decode("utf-8", "replace") + "\n")
    return EXIT_OK


def _task_config(cfg: RunConfig) -> tasks.TaskConfig:
    return tasks.TaskConfig(dim=cfg.dim, layers=cfg.layers, heads=cfg.heads, steps=cfg.steps,
                            batch_size=cfg.batch_size, lr=cfg.lr, eval_episodes=cfg.eval_episodes,
                            dtype=cfg.dtype, chunk=cfg.chunk, tau_n=cfg.tau_n, tau_a_min=cfg.tau_a_min,
                            tau_a_max=cfg.tau_a_max, efold=cfg.efold)


def _point_summary(pt: tasks.SweepPoint) -> dict:
    lo, hi = tasks.bootstrap_ci(pt.values, seed=pt.seed)
    return {**pt.row(), "ci_low": lo, "ci_high": hi}


def cmd_train_task(cfg: RunConfig) -> int:
    pts = tasks.sweep(cfg.cell, [cfg.length], _task_config(cfg), cfg.seed, cfg.task,
                      csv_path=cfg.out / "results.csv")
    summary = [_point_summary(p) for p in pts]
    _write_report(cfg, dict(points=summary))
    for s in summary:
        print(f"{s['task']} {s['cell']} L={s['length']}: {s['metric_name']} {s['metric_value']:.4f} "
              f"[{s['ci_low']:.4f}, {s['ci_high']:.4f}]")
    return EXIT_OK


def _sweep_one(args):
    cell, L, tcfg, seed, task = args
    return tasks.sweep(cell, [L], tcfg, seed, task)[0]


def cmd_sweep_task(cfg: RunConfig) -> int:
    lengths = list(cfg.lengths) or tasks.log_lengths(cfg.max_len, cfg.points)
    for c in cfg.cells:
        if c not in tasks.CELLS:
            raise ConfigError(f"unknown cell type {c!r}; expected one of {tasks.CELLS}")
    if lengths != sorted(lengths):
        raise ConfigError("lengths must be sorted ascending")
    tcfg = _task_config(cfg)
    jobs = [(c, L, tcfg, cfg.seed, cfg.task) for c in cfg.cells for L in lengths]
    if cfg.jobs > 1:
        with cf.ProcessPoolExecutor(cfg.jobs) as ex:
            points = list(ex.map(_sweep_one, jobs))
    else:
        points = []
        for j in jobs:
            points.append(_sweep_one(j))
            log.info("%s L=%d %s=%.4f", j[0], j[1], points[-1].metric_name, points[-1].metric_value)
    tasks.write_csv(points, cfg.out / "results.csv")
    summary = [_point_summary(p) for p in points]
    _write_table(cfg, "intervals", summary)
    _write_report(cfg, dict(points=summary))
    for s in summary:
        print(f"{s['cell']:>5} L={s['length']:<5} {s['metric_name']} {s['metric_value']:.4f}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    lengths = list(cfg.lengths)
    if not lengths or lengths != sorted(lengths):
        raise ConfigError("bench lengths must be non-empty and ascending")
    rows = bench.run_bench(lengths, cfg.layers, cfg.dim, cfg.heads, cfg.repeats, cfg.warmup,
                           cfg.tokens, cfg.seed)
    _write_table(cfg, "bench", [r.row() for r in rows], list(bench.BENCH_COLUMNS))
    med = []
    for sysname in ("amsu", "attention"):
        for T in lengths:
            sel = [r for r in rows if r.system == sysname and r.context == T]
            lat = float(np.median([r.latency_s for r in sel]))
            med.append(dict(system=sysname, context=T, median_latency_s=lat, tokens_per_sec=1.0 / lat,
                            state_numbers=sel[0].state_numbers, state_bytes=sel[0].state_bytes))
    _write_table(cfg, "bench_medians", med)
    fits = [bench.fit_slope(rows, s).row() for s in ("amsu", "attention")] if len(lengths) > 1 else []
    if fits:
        _write_table(cfg, "slopes", fits)
    closed = bench.closed_form_state(cfg.layers, cfg.dim, cfg.heads)
    state_ok = all(r.state_numbers == closed for r in rows if r.system == "amsu")
    _write_report(cfg, dict(medians=med, slopes=fits, closed_form_state=closed, state_matches=state_ok))
    for m in med:
        print(f"{m['system']:>9} T={m['context']:<6} {1e3 * m['median_latency_s']:.3f} ms/token  "
              f"state {m['state_numbers']}")
    return EXIT_OK if state_ok else EXIT_FAIL


HANDLERS = {
    "verify-equivalence": cmd_verify_equivalence,
    "grad-check": cmd_grad_check,
    "train-lm": cmd_train_lm,
    "eval-lm": cmd_eval_lm,
    "generate": cmd_generate,
    "train-task": cmd_train_task,
    "sweep-task": cmd_sweep_task,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    cli = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, cli, file_values)
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "config.txt").write_text(cfg.snapshot())
        return HANDLERS[args.command](cfg)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AstroError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
