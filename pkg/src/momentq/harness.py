"""Multi-seed experiment runner, aggregation and plot-data emission.

An experiment is a grid of (algorithm, seed) runs on one environment. Each
run writes its own CSV with one row per checkpoint; aggregation folds those
files into per-checkpoint means and sample standard deviations. Floats are
written with ``repr`` so files round-trip exactly and identical configs give
byte-identical run files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
import re
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngmod
from .frozenlake import (
    DEFAULT_SLIP,
    GridSpec,
    ReplayBuffer,
    build_frozenlake,
    epsilon_greedy,
    evaluate_greedy_return,
    generate_grid,
    markovian_stream,
    replay_stream,
    uniform_behavior,
)
from .linear import FaSchedule, default_checkpoints, make_features, run_fa
from .mdp import TabularMdp, load_mdp, solve_qstar, sup_norm
from .tabular import MODES, TabularConfig, run_tabular

SAMPLING = ("synchronous", "markovian", "replay")
METRICS = ("loss", "return")
OUT_ENV = "MOMENTQ_OUT"
DEFAULT_SEEDS = 20
RUN_COLUMNS = ("seed", "algo", "k", "value", "eps_norm", "dbar_running", "vmax_running")


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment.

    ``env`` is one of ``{"standard": 4 | 8}``, ``{"size": n, "seed": s,
    "density": d}`` for a generated map, ``{"map_path": file}`` for a text
    map or ``{"mdp_path": file}`` for a serialized MDP, plus optional
    ``slip`` and ``gamma``. Each entry of ``algos`` is a dict with a
    ``mode`` and its schedule parameters; for ``markovian`` and ``replay``
    sampling it also carries the feature and step-size settings of the
    linear learner.
    """

    env: dict
    algos: list[dict]
    T: int
    seeds: list[int] | None = None
    base_seed: int = 0
    metric: str = "loss"
    eval_episodes: int = 150
    checkpoint_every: int | None = None
    sampling: str = "synchronous"
    output_dir: str = "results"
    workers: int = 1
    behavior: dict = field(default_factory=lambda: {"type": "uniform"})
    replay: dict = field(default_factory=lambda: {"capacity": 10_000, "batch": 1})

    def __post_init__(self):
        if self.seeds is None:
            object.__setattr__(self, "seeds", list(range(self.base_seed, self.base_seed + DEFAULT_SEEDS)))
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if not self.algos:
            raise ConfigError("algos must be non-empty")
        if not isinstance(self.T, int) or self.T < 1:
            raise ConfigError("T must be a positive integer")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"sampling must be one of {SAMPLING}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        keys = {"standard", "size", "map_path", "mdp_path"} & set(self.env)
        if len(keys) != 1:
            raise ConfigError("env needs exactly one of standard, size, map_path, mdp_path")
        if self.metric == "return" and "mdp_path" in self.env and load_mdp(self.env["mdp_path"]).start_state is None:
            raise ConfigError("the return metric needs an MDP with a start state")
        for algo in self.algos:
            mode = algo.get("mode")
            allowed = MODES if self.sampling == "synchronous" else ("momentumq", "vanilla")
            if mode not in allowed:
                raise ConfigError(f"mode {mode!r} is not available with {self.sampling} sampling")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_output(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.output_dir)

    def checkpoints(self) -> list[int]:
        if self.checkpoint_every is None:
            return default_checkpoints(self.T)
        marks = list(range(self.checkpoint_every, self.T + 1, self.checkpoint_every))
        if not marks or marks[-1] != self.T:
            marks.append(self.T)
        return marks


@dataclass(frozen=True)
class AggregateRecord:
    algo: str
    k: int
    mean: float
    std: float
    n_seeds: int


def load_env(env: dict) -> tuple[TabularMdp, bytes]:
    """Build the MDP and return it with the bytes that identify it."""
    gamma = float(env.get("gamma", 0.95))
    slip = float(env.get("slip", DEFAULT_SLIP))
    if "mdp_path" in env:
        raw = Path(env["mdp_path"]).read_bytes()
        return load_mdp(env["mdp_path"]), raw
    if "map_path" in env:
        text = Path(env["map_path"]).read_text()
        spec = GridSpec.from_text(text, slip=slip)
    elif "standard" in env:
        spec = GridSpec.standard(int(env["standard"]), slip=slip)
    else:
        spec = generate_grid(int(env["size"]), int(env.get("seed", 0)), float(env.get("density", 0.1)), slip)
    ident = json.dumps({"map": spec.to_text(), "slip": slip, "gamma": gamma}, sort_keys=True).encode()
    return build_frozenlake(spec, gamma=gamma), ident


def algo_labels(algos: Sequence[dict]) -> list[str]:
    """Unique, filesystem-safe labels; repeated entries get a ``_2``-style suffix."""
    seen: dict[str, int] = {}
    out = []
    for algo in algos:
        if algo.get("name"):
            base = str(algo["name"])
        else:
            parts = [algo["mode"]]
            for key, val in sorted(algo.items()):
                if key in ("mode", "name"):
                    continue
                if isinstance(val, dict):
                    val = "-".join(f"{k}{v}" for k, v in sorted(val.items()))
                parts.append(f"{key}{val}")
            base = "_".join(parts)
        base = re.sub(r"[^A-Za-z0-9_.=+-]", "_", base)
        seen[base] = seen.get(base, 0) + 1
        out.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_atomic(path: Path, text: str) -> None:
    """Write ``text`` so that ``path`` is either absent or complete."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rows_to_csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _behavior_table(cfg: ExperimentConfig, mdp: TabularMdp) -> np.ndarray:
    kind = cfg.behavior.get("type", "uniform")
    if kind == "uniform":
        return uniform_behavior(mdp)
    if kind == "epsilon_greedy_qstar":
        qstar, _ = solve_qstar(mdp)
        return epsilon_greedy(qstar, float(cfg.behavior.get("epsilon", 0.1)))
    raise ConfigError(f"unknown behavior {kind!r}")


def run_single(
    cfg: ExperimentConfig,
    algo: dict,
    label: str,
    seed: int,
    mdp: TabularMdp | None = None,
    qstar: np.ndarray | None = None,
) -> list[tuple]:
    """Execute one (algo, seed) run and return its checkpoint rows."""
    if mdp is None:
        mdp, _ = load_env(cfg.env)
    if qstar is None and cfg.metric == "loss":
        qstar, _ = solve_qstar(mdp)
    marks = cfg.checkpoints()
    mark_set = set(marks)
    rows: list[tuple] = []

    def measure(k: int, q: np.ndarray) -> float:
        if cfg.metric == "loss":
            return sup_norm(q - qstar)
        return evaluate_greedy_return(mdp, q, seed, episodes=cfg.eval_episodes)

    if cfg.sampling == "synchronous":
        tab = TabularConfig(
            mode=algo["mode"],
            m=algo.get("m"),
            shift=algo.get("shift"),
            vanilla_alpha=algo.get("vanilla_alpha"),
        )

        def record(k, q, diag):
            if k in mark_set:
                eps = diag.eps_history[k - 1] if diag.eps_history else None
                rows.append((seed, label, k, measure(k, q), eps, diag.dbar, diag.v_max))

        run_tabular(mdp, tab, cfg.T, seed, callback=record)
        return rows

    fmap = make_features(algo.get("features", {"type": "onehot"}), mdp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sched = FaSchedule(
            alpha=float(algo.get("alpha", 0.1)),
            alpha_mode=algo.get("alpha_mode", "constant"),
            beta=float(algo.get("beta", 0.5)),
            lam=float(algo.get("lam", 0.9)),
            split=algo.get("split", "nesterov"),
            output_mode=algo.get("output_mode", "last"),
            delta=algo.get("delta"),
        )
    restart = cfg.behavior.get("restart", "start")
    stream = markovian_stream(mdp, _behavior_table(cfg, mdp), seed, restart=restart)
    if cfg.sampling == "replay":
        buf = ReplayBuffer(int(cfg.replay.get("capacity", 10_000)), seed)
        stream = replay_stream(
            buf,
            stream,
            batch=int(cfg.replay.get("batch", 1)),
            warmup=cfg.replay.get("warmup"),
            insert_rate=int(cfg.replay.get("insert_rate", 1)),
        )
    result = run_fa(
        stream,
        fmap,
        sched,
        cfg.T,
        mdp.gamma,
        proj_radius=algo.get("proj_radius"),
        algo=algo["mode"],
        checkpoints=marks,
        eval_hook=lambda k, theta: {"value": measure(k, fmap.q_values(theta))},
    )
    return [(seed, label, row["k"], row["value"], None, None, None) for row in result.metrics]


def run_file_name(label: str, seed: int) -> str:
    return f"run_{label}_seed{seed}.csv"


def _run_and_write(args) -> str:
    cfg_dict, algo, label, seed, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    rows = run_single(cfg, algo, label, seed)
    path = Path(out_dir) / run_file_name(label, seed)
    write_atomic(path, _rows_to_csv(rows))
    return str(path)


def content_hash(cfg: ExperimentConfig, env_bytes: bytes) -> str:
    """SHA-256 over the canonical config JSON and the environment bytes."""
    h = hashlib.sha256()
    echo = cfg.to_dict()
    echo.pop("output_dir", None)
    echo.pop("workers", None)
    h.update(json.dumps(echo, sort_keys=True).encode())
    h.update(b"\0")
    h.update(env_bytes)
    return h.hexdigest()


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every (algo, seed) pair, write run files, the aggregate and a manifest.

    Returns the manifest dict. Runs are independent processes when
    ``cfg.workers > 1``; each run file is renamed into place only when
    complete, so a crash leaves earlier runs valid.
    """
    out = cfg.resolved_output()
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    mdp, env_bytes = load_env(cfg.env)
    if cfg.metric == "loss":
        solve_qstar(mdp)  # fail fast on an unsolvable MDP
    labels = algo_labels(cfg.algos)
    tasks = [
        (cfg.to_dict(), algo, label, seed, str(out))
        for algo, label in zip(cfg.algos, labels)
        for seed in cfg.seeds
    ]
    started = time.perf_counter()
    if cfg.workers == 1:
        files = [_run_and_write(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            files = list(pool.map(_run_and_write, tasks))
    wall = time.perf_counter() - started
    records = aggregate(files)
    write_atomic(out / "aggregate.csv", aggregates_to_csv(records))
    manifest = {
        "config": cfg.to_dict(),
        "content_hash": content_hash(cfg, env_bytes),
        "wall_time_s": wall,
        "rng": rngmod.RNG_ALGORITHM,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "metric": cfg.metric,
        "run_files": [Path(f).name for f in files],
        "labels": labels,
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_run_file(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    parsed = []
    for r in rows:
        parsed.append({
            "seed": int(r["seed"]),
            "algo": r["algo"],
            "k": int(r["k"]),
            "value": float(r["value"]),
            "eps_norm": float(r["eps_norm"]) if r["eps_norm"] else None,
            "dbar_running": float(r["dbar_running"]) if r["dbar_running"] else None,
            "vmax_running": float(r["vmax_running"]) if r["vmax_running"] else None,
        })
    return parsed


def aggregate(run_files: Iterable[str | Path]) -> list[AggregateRecord]:
    """Per-(algo, checkpoint) mean and sample standard deviation.

    Every run of an algorithm must report the same checkpoints. With a
    single seed the standard deviation is reported as 0.
    """
    by_algo: dict[str, dict[int, list[int]]] = {}
    values: dict[tuple[str, int], list[float]] = {}
    for path in run_files:
        rows = read_run_file(path)
        if not rows:
            raise ValueError(f"run file {path} has no rows")
        algo, seed = rows[0]["algo"], rows[0]["seed"]
        ks = [r["k"] for r in rows]
        seeds = by_algo.setdefault(algo, {})
        if seed in seeds:
            raise ValueError(f"duplicate run for {algo} seed {seed}")
        if seeds and ks != next(iter(seeds.values())):
            raise ValueError(f"ragged checkpoints for {algo} in {path}")
        seeds[seed] = ks
        for r in rows:
            values.setdefault((algo, r["k"]), []).append(r["value"])
    records = []
    for algo, seeds in by_algo.items():
        for k in next(iter(seeds.values())):
            v = np.asarray(values[(algo, k)])
            std = float(v.std(ddof=1)) if v.size > 1 else 0.0
            records.append(AggregateRecord(algo, k, float(v.mean()), std, int(v.size)))
    return records


def aggregates_to_csv(records: Sequence[AggregateRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("algo", "k", "mean", "std", "n_seeds"))
    for r in records:
        w.writerow((r.algo, r.k, repr(r.mean), repr(r.std), r.n_seeds))
    return buf.getvalue()


def read_aggregates(path: str | Path) -> list[AggregateRecord]:
    with open(path, newline="") as fh:
        return [
            AggregateRecord(r["algo"], int(r["k"]), float(r["mean"]), float(r["std"]), int(r["n_seeds"]))
            for r in csv.DictReader(fh)
        ]


def emit_plotdata(
    records: Sequence[AggregateRecord],
    path: str | Path,
    fmt: str = "csv",
    checkpoints: Sequence[int] | None = None,
) -> Path:
    """Write plot-ready data: long-format CSV or gnuplot data blocks.

    The gnuplot file has one indexable block per algorithm (``index i`` in
    gnuplot), each headed by a comment naming it, with columns ``k mean
    std``. ``checkpoints`` optionally restricts the emitted rows; an empty
    filter is an error.
    """
    if not records:
        raise ValueError("no aggregate records to emit")
    if checkpoints is not None:
        if len(checkpoints) == 0:
            raise ValueError("checkpoint filter is empty")
        keep = set(checkpoints)
        records = [r for r in records if r.k in keep]
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("algo", "k", "mean", "std"))
        for r in records:
            w.writerow((r.algo, r.k, repr(r.mean), repr(r.std)))
        text = buf.getvalue()
    elif fmt == "gnuplot":
        blocks = []
        for algo in dict.fromkeys(r.algo for r in records):
            lines = [f"# {algo}", "# k mean std"]
            lines += [f"{r.k} {r.mean!r} {r.std!r}" for r in records if r.algo == algo]
            blocks.append("\n".join(lines))
        text = "\n\n\n".join(blocks) + "\n"
    else:
        raise ValueError(f"unknown plot format {fmt!r}")
    write_atomic(path, text)
    return path


def read_plotdata(path: str | Path, fmt: str = "csv") -> list[tuple[str, int, float, float]]:
    """Inverse of :func:`emit_plotdata`, as ``(algo, k, mean, std)`` tuples."""
    text = Path(path).read_text()
    if fmt == "csv":
        return [(r["algo"], int(r["k"]), float(r["mean"]), float(r["std"])) for r in csv.DictReader(io.StringIO(text))]
    if fmt == "gnuplot":
        out = []
        algo = None
        for line in text.splitlines():
            if line.startswith("# ") and line != "# k mean std":
                algo = line[2:]
            elif line and not line.startswith("#"):
                k, mean, std = line.split()
                out.append((algo, int(k), float(mean), float(std)))
        return out
    raise ValueError(f"unknown plot format {fmt!r}")


def final_values(run_files: Iterable[str | Path]) -> dict[str, dict[int, dict]]:
    """Last checkpoint row of each run, keyed by algo then seed."""
    out: dict[str, dict[int, dict]] = {}
    for path in run_files:
        rows = read_run_file(path)
        last = rows[-1]
        out.setdefault(last["algo"], {})[last["seed"]] = last
    return out


def pooled_se(a: Sequence[float], b: Sequence[float]) -> float:
    """Standard error of the difference of two sample means."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
