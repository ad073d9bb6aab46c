"""Experiment orchestration: splits, metrics, repetitions, search, size sweeps."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import datagen
from .dataset import Dataset
from .nncore import DivergenceError, TrainConfig
from .rankers import (
    DEFAULT_LOSS,
    ERR,
    FATE,
    FETA,
    RANKNET,
    predict_scores,
    train_ranker,
)
from .ranklosses import rank_from_scores, spearman, zero_one_accuracy, zero_one_rank_loss

log = logging.getLogger(__name__)

METRICS = ("d_acc", "d_ra", "d_spear")


# -- configuration ----------------------------------------------------------


def load_defaults() -> dict:
    """Committed per-model architecture and training defaults."""
    text = resources.files("ctxrank").joinpath("defaults.json").read_text()
    return json.loads(text)


def default_setup(kind: str) -> tuple[dict, TrainConfig, str | None]:
    entry = load_defaults()["models"].get(kind, {})
    cfg = TrainConfig(**entry.get("train", {}))
    return dict(entry.get("arch", {})), cfg, entry.get("loss", DEFAULT_LOSS.get(kind))


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic child seed from a master seed and integer keys."""
    return int(np.random.SeedSequence([master, *keys]).generate_state(1, dtype=np.uint64)[0])


# -- I/O --------------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    """Write via a temporary file in the target directory and rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_report(header: dict, columns: list[str], rows: list[list]) -> str:
    """CSV text preceded by ``# key: value`` comment lines."""
    out = io.StringIO()
    for key, value in header.items():
        out.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    out.write(",".join(columns) + "\n")
    for row in rows:
        out.write(",".join(_fmt(v) for v in row) + "\n")
    return out.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- metrics ----------------------------------------------------------------


def evaluate_scores(rankings: list[np.ndarray], scores: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Per-instance 0/1-accuracy, ranking accuracy and Spearman correlation."""
    out = {m: np.empty(len(rankings)) for m in METRICS}
    sizes = np.array([len(r) for r in rankings])
    for n in np.unique(sizes):
        idx = np.flatnonzero(sizes == n)
        R = np.stack([rankings[i] for i in idx])
        S = np.stack([scores[i] for i in idx])
        tau = rank_from_scores(S)
        out["d_acc"][idx] = zero_one_accuracy(R, tau)
        if n >= 2:
            out["d_ra"][idx] = 1.0 - zero_one_rank_loss(R, S)
            out["d_spear"][idx] = spearman(R, tau)
        else:
            out["d_ra"][idx] = 1.0
            out["d_spear"][idx] = 1.0
    return out


def evaluate_model(model, data: Dataset) -> dict[str, np.ndarray]:
    return evaluate_scores(data.rankings, predict_scores(model, data))


def mean_std(values) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; std is 0 for a single value."""
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


class OracleModel:
    """Scores a task with the benchmark's own exact oracle."""

    kind = "oracle"

    def __init__(self, problem: str, dim: int):
        self.problem = problem
        self.dim = dim

    def batch_scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.problem == datagen.MEDOID:
            dist = np.sqrt(((X[:, :, None] - X[:, None, :]) ** 2).sum(-1))
            m = np.argmin(dist.mean(-1), axis=-1)
            return -dist[np.arange(len(X)), m]
        return np.stack([datagen.hv_contributions(x) for x in X])


class RandomModel:
    """Uniform random scores, reproducible from a seed."""

    kind = "random"

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.rng = np.random.default_rng(seed)

    def batch_scores(self, X) -> np.ndarray:
        return self.rng.random(np.shape(X)[:2])


# -- splits and repeated experiments ----------------------------------------


def split_indices(n: int, train_fraction: float, master_seed: int, repetition: int):
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = np.random.default_rng(derive_seed(master_seed, repetition)).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class ExperimentConfig:
    generator: datagen.GeneratorSpec
    train_fraction: float = 0.1
    repetitions: int = 5
    kinds: tuple[str, ...] = (FATE, FETA, RANKNET, ERR)
    setups: dict = field(default_factory=dict)  # kind -> {"arch", "train", "loss"} overrides
    master_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.repetitions < 1:
            raise ValueError("repetitions must be positive")

    def setup(self, kind: str) -> tuple[dict, TrainConfig, str | None]:
        arch, cfg, loss = default_setup(kind)
        over = self.setups.get(kind, {})
        arch.update(over.get("arch", {}))
        cfg = TrainConfig(**{**asdict(cfg), **over.get("train", {})})
        return arch, cfg, over.get("loss", loss)


@dataclass
class MetricReport:
    kind: str
    values: dict[str, list[float]]  # metric -> one value per repetition
    seconds: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict[str, tuple[float, float]]:
        return {m: mean_std(v) for m, v in self.values.items()}


def run_experiment(cfg: ExperimentConfig, data: Dataset | None = None, models_out: dict | None = None):
    """Train and test every configured ranker on every repetition's split.

    Returns ``{kind: MetricReport}``; if ``models_out`` is given, it receives
    the last repetition's trained model per kind.
    """
    if data is None:
        data = datagen.generate(cfg.generator)
    reports = {k: MetricReport(k, {m: [] for m in METRICS}, {"train": 0.0, "test": 0.0}) for k in cfg.kinds}
    for rep in range(cfg.repetitions):
        train_idx, test_idx = split_indices(len(data), cfg.train_fraction, cfg.master_seed, rep)
        train, test = data.subset(train_idx), data.subset(test_idx)
        for kind in cfg.kinds:
            arch, tcfg, loss = cfg.setup(kind)
            tcfg = TrainConfig(**{**asdict(tcfg), "seed": derive_seed(cfg.master_seed, rep, 1 + cfg.kinds.index(kind))})
            t0 = time.perf_counter()
            model = train_ranker(kind, train, arch, loss, tcfg).model
            t1 = time.perf_counter()
            metrics = evaluate_model(model, test)
            reports[kind].seconds["train"] += t1 - t0
            reports[kind].seconds["test"] += time.perf_counter() - t1
            for m in METRICS:
                reports[kind].values[m].append(float(metrics[m].mean()))
            log.info("rep %d %s d_RA=%.4f (%.1fs)", rep, kind, reports[kind].values["d_ra"][-1], t1 - t0)
            if models_out is not None:
                models_out[kind] = model
    return reports


def experiment_rows(reports: dict[str, MetricReport]) -> list[list]:
    rows = []
    for kind, rep in reports.items():
        for m, vals in rep.values.items():
            mean, std = mean_std(vals)
            rows.append([kind, m, mean, std, *vals])
    return rows


# -- generalization across task sizes ---------------------------------------


def generalization_sweep(model, problem: str, sizes, n_instances: int, dim: int, seed: int) -> list[tuple]:
    """Fresh instances per size; returns ``(size, mean d_RA, std d_RA)`` rows."""
    rows = []
    for size in sizes:
        if size < 2:
            raise ValueError(f"task size must be at least 2, got {size}")
        spec = datagen.GeneratorSpec(problem, n_instances, int(size), dim, derive_seed(seed, int(size)))
        data = datagen.generate(spec)
        d_ra = evaluate_model(model, data)["d_ra"]
        rows.append((int(size), *mean_std(d_ra)))
    return rows


def trend_slope(xs, ys) -> float:
    """Least-squares slope of ys against xs."""
    return float(np.polyfit(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64), 1)[0])


# -- random hyperparameter search -------------------------------------------

SEARCH_SPACE = {
    "learning_rate": ("loguniform", 1e-3, 1e-1),
    "l1": ("loguniform", 1e-8, 1e-4),
    "l2": ("loguniform", 1e-8, 1e-3),
    "momentum": ("choice", [0.8, 0.9, 0.95]),
    "width": ("choice", [16, 32, 64]),
}


def _sample(space, rng):
    out = {}
    for name, spec in space.items():
        if spec[0] == "loguniform":
            out[name] = float(math.exp(rng.uniform(math.log(spec[1]), math.log(spec[2]))))
        elif spec[0] == "uniform":
            out[name] = float(rng.uniform(spec[1], spec[2]))
        else:
            out[name] = spec[1][int(rng.integers(len(spec[1])))]
    return out


def _with_width(kind: str, arch: dict, width: int) -> dict:
    arch = copy.deepcopy(arch)
    for key, value in arch.items():
        if key.endswith("hidden"):
            arch[key] = [width] * len(value)
    return arch


@dataclass
class SearchResult:
    arch: dict
    cfg: TrainConfig
    score: float
    trials: list[dict]


def random_search(
    kind: str,
    data: Dataset,
    budget: int,
    seed: int,
    loss: str | None = None,
    validation_fraction: float = 0.2,
    space: dict | None = None,
    include_default: bool = True,
    base: tuple[dict, TrainConfig] | None = None,
) -> SearchResult:
    """Seeded random search maximizing validation ranking accuracy.

    With ``include_default`` the first trial evaluates the base configuration
    unchanged; the remaining trials sample ``space``.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    space = SEARCH_SPACE if space is None else space
    if base is None:
        arch0, cfg0, loss0 = default_setup(kind)
    else:
        (arch0, cfg0), loss0 = base, DEFAULT_LOSS.get(kind)
    loss = loss or loss0
    train_idx, val_idx = split_indices(len(data), 1.0 - validation_fraction, seed, 0)
    train, val = data.subset(train_idx), data.subset(val_idx)
    rng = np.random.default_rng(derive_seed(seed, 1))
    trials = []
    best = None
    for t in range(budget):
        if include_default and t == 0:
            params = {}
        else:
            params = _sample(space, rng)
        arch = _with_width(kind, arch0, params["width"]) if "width" in params else copy.deepcopy(arch0)
        cfg_fields = {k: v for k, v in params.items() if k in asdict(cfg0)}
        cfg = TrainConfig(**{**asdict(cfg0), **cfg_fields, "seed": derive_seed(seed, 2, t)})
        try:
            model = train_ranker(kind, train, arch, loss, cfg).model
            score = float(evaluate_model(model, val)["d_ra"].mean())
        except DivergenceError:
            score = float("nan")
        trials.append({"trial": t, "params": params, "arch": arch, "train": asdict(cfg), "d_ra": score})
        log.info("trial %d %s -> %.4f", t, params, score)
        if not math.isnan(score) and (best is None or score > best.score):
            best = SearchResult(arch, cfg, score, trials)
    if best is None:
        raise DivergenceError("every search trial diverged")
    return best
