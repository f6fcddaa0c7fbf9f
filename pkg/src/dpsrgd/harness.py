"""Experiment orchestration: datasets, config files, sweeps, CSV output.

The harness resolves the privacy budget before it touches any data, derives
per-grid-point RNG streams by keyed splitting on the grid-point values (so
adding a grid point never perturbs existing ones), runs seeded repeats,
aggregates accuracy/excess-risk with normal-approximation confidence
intervals, and writes summary plus per-run trajectory CSVs.
"""

from __future__ import annotations

import csv
import dataclasses
import gzip
import hashlib
import io
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import accounting, counting, optim
from .geometry import ConstraintBall
from .objectives import LogisticTask, SyntheticQuadratic, fixed_batches

__all__ = [
    "ExperimentSpec",
    "MetricRow",
    "MetricTable",
    "load_dataset",
    "save_csv",
    "run_experiment",
    "emit_csv",
    "parse_summary_csv",
    "data_dir",
]

_TASKS = ("synthetic", "mnist", "cifar-features", "csv-dataset")
_ALGORITHMS = (
    "accelerated_dp_srgd",
    "independent_variant",
    "dp_sgd",
    "dp_ftrl",
    "dp_memf",
    "dp_srg_memf",
)
_WORKLOADS = ("ones", "momentum", "momentum_decay", "identity")

DATA_DIR_ENV = "DPSRGD_DATA_DIR"


def data_dir(spec_path: str = "") -> str:
    """Dataset directory: explicit spec path, else the environment
    variable, else the current directory."""
    return spec_path or os.environ.get(DATA_DIR_ENV, ".")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentSpec:
    """One experiment: a task, an algorithm, a privacy target, sweep grids,
    and replication settings. Serializes to a flat key=value text config
    ('#' starts a comment) and round-trips losslessly."""

    task: str = "synthetic"
    algorithm: str = "dp_memf"
    epsilon: float = math.inf
    delta: float = 1e-6
    rho: float | None = None
    workload: str = "ones"
    epochs: int = 1
    batch_size: int = 500
    momentum: float = 0.9
    lr_grid: tuple = (0.5,)
    clip_grid: tuple = (1.0,)
    c_grid: tuple = (0.0,)
    repeats: int = 1
    seed_base: int = 0
    output: str = "results.csv"
    data_path: str = ""
    honest_selection: bool = False
    double_noise: bool = True
    workers: int = 1
    dim: int = 20
    steps: int = 64
    radius: float = 1.0
    curvature: float = 1.0
    noise_scale: float = 0.5
    train_size: int = 4096

    def validate(self):
        if self.task not in _TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.algorithm not in _ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.workload not in _WORKLOADS:
            raise ValueError(f"unknown workload {self.workload!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        for name in ("lr_grid", "clip_grid", "c_grid"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"{name} must be nonempty")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0,1)")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive when given")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self

    def to_text(self) -> str:
        lines = ["# experiment configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentSpec":
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(fields)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, val in values.items():
            kwargs[name] = _parse_value(val, fields[name].type)
        return cls(**kwargs)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, tuple):
        return ",".join(f"{x:.17g}" for x in v)
    return str(v)


def _parse_value(text: str, type_name: str):
    if text == "none":
        return None
    if type_name == "tuple":
        return tuple(float(x) for x in text.split(","))
    if type_name == "bool":
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text == "true"
    if type_name == "int":
        return int(text)
    if type_name.startswith("float"):
        return float(text)
    return text


# ---------------------------------------------------------------------------
# datasets

_IDX_TRAIN = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
_IDX_TEST = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _open_maybe_gz(path: str):
    if os.path.exists(path):
        return open(path, "rb")
    if os.path.exists(path + ".gz"):
        return gzip.open(path + ".gz", "rb")
    raise FileNotFoundError(path)


def _read_idx(path: str) -> np.ndarray:
    """Parse one big-endian idx file (uint8 payload, 1-d labels or 3-d
    image stacks)."""
    with _open_maybe_gz(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated idx header")
    zero, dtype, ndim = data[0] << 8 | data[1], data[2], data[3]
    if zero != 0 or dtype != 0x08 or ndim not in (1, 3):
        raise ValueError(f"{path}: bad idx magic {data[:4].hex()}")
    dims = struct.unpack_from(f">{ndim}i", data, 4)
    payload = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    expected = int(np.prod(dims))
    if payload.size != expected:
        raise ValueError(f"{path}: payload {payload.size} != shape {dims}")
    return payload.reshape(dims)


def _finish_task(train_x: np.ndarray, train_y: np.ndarray,
                 test_x: np.ndarray, test_y: np.ndarray) -> LogisticTask:
    """Min-max normalize per column on train statistics (constant columns
    map to zero), append the bias column, and validate labels."""
    lo = train_x.min(axis=0)
    hi = train_x.max(axis=0)
    span = hi - lo
    span[span == 0] = 1.0

    def norm(x):
        scaled = (x - lo) / span
        return np.hstack([scaled, np.ones((x.shape[0], 1))])

    classes = int(train_y.max()) + 1
    if train_y.min() < 0 or test_y.size and (test_y.min() < 0 or test_y.max() >= classes):
        raise ValueError("label out of range")
    return LogisticTask(features=norm(train_x), labels=train_y.astype(np.int64),
                        num_classes=classes,
                        eval_features=norm(test_x),
                        eval_labels=test_y.astype(np.int64))


def load_dataset(path: str, format: str) -> LogisticTask:
    """Build a multinomial-logistic task from files at `path`.

    format="idx": `path` is a directory holding the standard four
    image/label files (optionally gzipped); pixels are scaled to [0,1].
    format="csv": `path` is the train file (header row, then
    label,feature,... rows); a sibling `<stem>.test.csv` supplies the
    held-out split when present. Features are min-max normalized on train
    statistics and a constant bias column is appended.
    """
    if format == "idx":
        train_x = _read_idx(os.path.join(path, _IDX_TRAIN[0]))
        train_y = _read_idx(os.path.join(path, _IDX_TRAIN[1]))
        test_x = _read_idx(os.path.join(path, _IDX_TEST[0]))
        test_y = _read_idx(os.path.join(path, _IDX_TEST[1]))
        flat = train_x.reshape(train_x.shape[0], -1).astype(np.float64) / 255.0
        flat_t = test_x.reshape(test_x.shape[0], -1).astype(np.float64) / 255.0
        bias = lambda x: np.hstack([x, np.ones((x.shape[0], 1))])
        if train_y.ndim != 1 or train_x.shape[0] != train_y.shape[0]:
            raise ValueError("image/label count mismatch")
        classes = int(train_y.max()) + 1
        if test_y.max() >= classes:
            raise ValueError("label out of range")
        return LogisticTask(features=bias(flat), labels=train_y.astype(np.int64),
                            num_classes=classes, eval_features=bias(flat_t),
                            eval_labels=test_y.astype(np.int64))
    if format == "csv":
        train_x, train_y = _read_label_csv(path)
        stem, ext = os.path.splitext(path)
        test_path = stem + ".test" + ext
        if os.path.exists(test_path):
            test_x, test_y = _read_label_csv(test_path)
        else:
            test_x, test_y = train_x, train_y
        return _finish_task(train_x, train_y, test_x, test_y)
    raise ValueError(f"unknown dataset format {format!r}")


def _read_label_csv(path: str):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: first column must be 'label'")
        labels, rows = [], []
        for row in reader:
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def save_csv(labels: np.ndarray, features: np.ndarray, path: str):
    """Write a label,feature,... dataset file readable by load_dataset."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(features.shape[1])])
        for y, row in zip(labels, features):
            writer.writerow([int(y)] + [f"{v:.17g}" for v in row])


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class MetricRow:
    algorithm: str
    workload: str
    lr: float
    clip: float
    c: float
    acc_mean: float | None
    acc_ci95: float | None
    excess_mean: float | None
    n_runs: int = 0
    n_aborted: int = 0
    selection_metric: float = -math.inf


@dataclass
class MetricTable:
    rows: list = field(default_factory=list)
    best: MetricRow | None = None
    header: dict = field(default_factory=dict)


def _stable_key(*parts) -> tuple:
    """Four uint32 words derived from the grid-point values themselves, so
    RNG streams are keyed by what is being run, not by grid position."""
    canon = "|".join(f"{p:.17g}" if isinstance(p, float) else str(p)
                     for p in parts)
    digest = hashlib.sha256(canon.encode("utf-8")).digest()
    return struct.unpack("<4I", digest[:16])


def _run_seed(seed_base: int, key: tuple, repeat: int) -> int:
    ss = np.random.SeedSequence(seed_base, spawn_key=key + (repeat,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def _resolve_budget(spec: ExperimentSpec) -> dict:
    """Privacy accounting up front, before any data is touched."""
    out = {"epsilon": spec.epsilon, "delta": spec.delta}
    if spec.rho is not None:
        out["rho"] = spec.rho
    elif math.isinf(spec.epsilon):
        out["rho"] = math.inf
    else:
        out["rho"] = accounting.rho_for_dp(spec.epsilon, spec.delta)
    if not math.isinf(spec.epsilon):
        out["mu"] = accounting.mu_for_dp(spec.epsilon, spec.delta)
    return out


def _build_problem(spec: ExperimentSpec, event_log, dataset):
    if dataset is not None:
        if event_log is not None:
            event_log.append(("data", "provided"))
        return dataset
    if spec.task == "synthetic":
        rng = np.random.default_rng(spec.seed_base)
        direction = rng.standard_normal(spec.dim)
        direction /= np.linalg.norm(direction)
        if event_log is not None:
            event_log.append(("data", "synthetic"))
        return SyntheticQuadratic(dim=spec.dim, target=direction * 0.9 * spec.radius,
                                  curvature=spec.curvature,
                                  noise_scale=spec.noise_scale, radius=spec.radius)
    fmt = "idx" if spec.task == "mnist" else "csv"
    root = data_dir(spec.data_path)
    path = root if spec.task == "mnist" else os.path.join(root, "dataset.csv")
    if event_log is not None:
        event_log.append(("data", path))
    return load_dataset(path, fmt)


def _strategy_cache_get(cache: dict, kind: str, k: int, b: int, c: float):
    momentum = 0.9 if kind in ("momentum", "momentum_decay") else 0.0
    decay = c if kind == "momentum_decay" else 1.0
    key = (kind, k, b, momentum, decay)
    if key not in cache:
        if kind == "identity":
            cache[key] = counting.identity_strategy(k * b)
        else:
            workload = counting.build_workload(kind, k, b, momentum=momentum,
                                               decay=decay)
            cache[key] = counting.factorize(workload, k, b, kind=kind,
                                            momentum=momentum, decay=decay)
    return cache[key]


def _single_run(spec, problem, rho, lr, clip, c, seed, cache):
    if spec.algorithm in ("dp_memf", "dp_srg_memf"):
        n = spec.train_size if spec.task == "synthetic" else problem.n_train
        b = n // spec.batch_size
        if b < 1:
            raise ValueError("batch_size exceeds dataset size")
        if spec.task == "synthetic":
            # One fixed dataset per experiment (seeded by seed_base alone),
            # shared by every grid point and repeat.
            data = problem.draw_batch(np.random.default_rng(spec.seed_base),
                                      b * spec.batch_size)
            batches = [data[j * spec.batch_size:(j + 1) * spec.batch_size]
                       for j in range(b)]
        else:
            batches = [np.arange(j * spec.batch_size, (j + 1) * spec.batch_size)
                       for j in range(b)]
        strategy = _strategy_cache_get(cache, spec.workload, spec.epochs, b, c)
        cfg = optim.MemfConfig(epochs=spec.epochs, batches_per_epoch=b,
                               batch_size=spec.batch_size, strategy=strategy,
                               rho=rho, c_clip=clip, lr=lr, decay=c,
                               momentum=spec.momentum, seed=seed,
                               double_noise=spec.double_noise)
        runner = optim.run_dp_memf if spec.algorithm == "dp_memf" else optim.run_dp_srg_memf
        return runner(problem, batches, cfg)

    ball = ConstraintBall(problem.dim, spec.radius)
    rng = np.random.default_rng(seed)
    if spec.task == "synthetic":
        n = spec.train_size
    else:
        n = problem.n_train
    B = max(1, min(n, spec.batch_size))
    T = spec.steps
    stream = (problem.draw_batch(rng, B) if spec.task == "synthetic"
              else rng.permutation(n)[:B] for _ in range(T))

    if spec.algorithm == "dp_sgd":
        sigma = 0.0 if math.isinf(rho) else math.sqrt(1.0 / (2 * rho)) * clip / B
        return optim.run_dp_sgd(problem, stream, lr, clip, sigma, ball, T, seed=seed)
    if spec.algorithm == "dp_ftrl":
        strategy = _strategy_cache_get(cache, spec.workload, 1, T, c)
        return optim.run_dp_ftrl(problem, stream, lr, clip, strategy, rho, ball,
                                 seed=seed)
    if spec.algorithm in ("accelerated_dp_srgd", "independent_variant"):
        L, M = problem.lipschitz, problem.smoothness
        eps, delta = spec.epsilon, spec.delta
        if math.isinf(eps):
            sigma, beta = 0.0, 2.0 * M * T
        else:
            beta = 2.0 * M * T
            sigma = accounting.srgd_sigma(L, M, ball.diameter, eps, delta, B, beta, T)
        cfg = optim.SrgdConfig(T=T, B=B, n=n, beta=beta, ball=ball,
                               sigma=sigma * beta, clip=clip if math.isfinite(clip) else None,
                               seed=seed)
        if spec.algorithm == "accelerated_dp_srgd":
            return optim.run_accelerated_dp_srgd(problem, stream, cfg)
        cfg2 = dataclasses.replace(cfg, sigma=sigma)
        return optim.run_independent_variant(problem, stream, cfg2)
    raise ValueError(f"unhandled algorithm {spec.algorithm!r}")


def _selection_metrics(spec, problem, record):
    """(selection metric, reported accuracy, excess). With honest
    selection on a logistic task, selection uses the even-index half of
    the held-out set and the reported accuracy uses the odd half;
    otherwise both use the full held-out set, the common benchmark
    convention."""
    if record.accuracy is None:
        metric = -record.excess if record.excess is not None else -math.inf
        return metric, None, record.excess
    if spec.honest_selection:
        x = record.final_x
        val = problem.accuracy(x, half="even")
        test = problem.accuracy(x, half="odd")
        return val, test, record.excess
    return record.accuracy, record.accuracy, record.excess


def run_experiment(spec: ExperimentSpec, dataset=None, event_log=None):
    """Execute the sweep: budget accounting first, then data, then
    `repeats` seeded runs per grid point. Returns (MetricTable, records)
    where records maps (lr, clip, c, repeat) -> RunRecord or RunAborted.
    """
    spec.validate()
    budget = _resolve_budget(spec)
    if event_log is not None:
        event_log.append(("budget", dict(budget)))
    problem = _build_problem(spec, event_log, dataset)
    rho = budget["rho"]

    grid = [(lr, clip, c) for lr in spec.lr_grid for clip in spec.clip_grid
            for c in spec.c_grid]
    cache: dict = {}
    for lr, clip, c in grid:  # warm the strategy cache serially
        if spec.algorithm in ("dp_memf", "dp_srg_memf", "dp_ftrl"):
            n = problem.n_train if spec.task != "synthetic" else spec.train_size
            b = (n // spec.batch_size) if spec.algorithm != "dp_ftrl" else spec.steps
            k = spec.epochs if spec.algorithm != "dp_ftrl" else 1
            _strategy_cache_get(cache, spec.workload, k, b, c)

    jobs = []
    for lr, clip, c in grid:
        key = _stable_key(spec.algorithm, spec.workload, lr, clip, c)
        for rep in range(spec.repeats):
            jobs.append((lr, clip, c, rep, _run_seed(spec.seed_base, key, rep)))

    def work(job):
        lr, clip, c, rep, seed = job
        try:
            rec = _single_run(spec, problem, rho, lr, clip, c, seed, cache)
        except optim.RunAborted as exc:
            return job, exc
        return job, rec

    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    records = {}
    by_point: dict = {}
    for (lr, clip, c, rep, _seed), outcome in results:
        records[(lr, clip, c, rep)] = outcome
        by_point.setdefault((lr, clip, c), []).append(outcome)

    table = MetricTable(header={**{k: _format_value(v) for k, v in budget.items()},
                                "task": spec.task, "algorithm": spec.algorithm,
                                "workload": spec.workload})
    if spec.task == "synthetic" and spec.algorithm in (
            "accelerated_dp_srgd", "independent_variant") and math.isfinite(spec.epsilon):
        report, B, T = accounting.build_regime_report(
            spec.train_size, problem.dim, problem.lipschitz, problem.smoothness,
            2.0 * spec.radius, spec.epsilon, spec.delta)
        for line in report.lines():
            k, v = line.split("=", 1)
            table.header[f"regime_{k}"] = v

    for (lr, clip, c) in grid:
        outcomes = by_point[(lr, clip, c)]
        oks = [r for r in outcomes if isinstance(r, optim.RunRecord)]
        row = MetricRow(algorithm=spec.algorithm, workload=spec.workload,
                        lr=lr, clip=clip, c=c, acc_mean=None, acc_ci95=None,
                        excess_mean=None, n_runs=len(oks),
                        n_aborted=len(outcomes) - len(oks))
        if oks:
            triples = [_selection_metrics(spec, problem, r) for r in oks]
            sel = np.array([t[0] for t in triples], dtype=np.float64)
            accs = [t[1] for t in triples]
            excs = [t[2] for t in triples]
            row.selection_metric = float(sel.mean())
            if accs[0] is not None:
                arr = np.array(accs, dtype=np.float64)
                row.acc_mean = float(arr.mean())
                row.acc_ci95 = _ci95(arr)
            if excs[0] is not None:
                row.excess_mean = float(np.mean(np.array(excs, dtype=np.float64)))
        table.rows.append(row)

    viable = [r for r in table.rows if r.n_runs > 0]
    if viable:
        table.best = max(viable, key=lambda r: r.selection_metric)
    return table, records


def _ci95(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


# ---------------------------------------------------------------------------
# CSV emission


def _cell(v) -> str:
    if v is None:
        return ""
    return f"{v:.17g}"


def emit_csv(table: MetricTable, records, path: str):
    """Write the summary CSV at `path` (header comments carry the budget
    and regime report) and one trajectory CSV per completed run next to
    it. Absent metrics are empty cells, never zeros."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, val in table.header.items():
            fh.write(f"# {key}={val}\n")
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "workload", "lr", "clip", "c",
                         "acc_mean", "acc_ci95", "excess_mean"])
        for r in table.rows:
            writer.writerow([r.algorithm, r.workload, _cell(r.lr), _cell(r.clip),
                             _cell(r.c), _cell(r.acc_mean), _cell(r.acc_ci95),
                             _cell(r.excess_mean)])
    stem, _ = os.path.splitext(path)
    written = [path]
    for i, key in enumerate(sorted(records)):
        rec = records[key]
        if not isinstance(rec, optim.RunRecord):
            continue
        traj = f"{stem}_traj_{i}.csv"
        with open(traj, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# run={key}\n")
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "phi", "noise_norm", "grad_norm"])
            for t in range(rec.steps):
                phi = rec.potential[t] if rec.potential is not None else None
                writer.writerow([t, _cell(rec.train_loss[t]), _cell(phi),
                                 _cell(rec.noise_norm[t]), _cell(rec.grad_norm[t])])
        written.append(traj)
    return written


def parse_summary_csv(path: str) -> MetricTable:
    """Inverse of the summary half of emit_csv."""
    table = MetricTable()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for raw in fh:
            if raw.startswith("#"):
                body = raw[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    table.header[k] = v
                continue
            rows.append(raw)
    reader = csv.reader(io.StringIO("".join(rows)))
    header = next(reader)
    expected = ["algorithm", "workload", "lr", "clip", "c", "acc_mean",
                "acc_ci95", "excess_mean"]
    if header != expected:
        raise ValueError(f"unexpected summary header {header}")
    for row in reader:
        opt = lambda s: None if s == "" else float(s)
        table.rows.append(MetricRow(
            algorithm=row[0], workload=row[1], lr=float(row[2]),
            clip=float(row[3]), c=float(row[4]), acc_mean=opt(row[5]),
            acc_ci95=opt(row[6]), excess_mean=opt(row[7])))
    return table
