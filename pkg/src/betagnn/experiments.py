"""Multi-seed experiment orchestration and result summaries.

An experiment is described by a flat TOML file; every key is optional
except ``model`` and exactly one dataset source::

    name = "sbm-grad-20"
    dataset_path = "data/cora"          # or the sbm_* keys below
    sbm_n = 400
    sbm_classes = 4
    sbm_p_in = 0.05
    sbm_p_out = 0.005
    sbm_feature_dim = 32
    sbm_feature_noise = 1.5
    sbm_seed = 0
    model = "beta-gcn"                  # mlp | gcn | gpr | beta-gcn | beta-gpr
    attack = "grad"                     # none | random | heterophily | grad | greedy
    attack_budget_frac = 0.2            # fraction of |E| (untargeted) ...
    attack_budget = 3                   # ... or an absolute / per-target count
    attack_n_targets = 20               # greedy only: targets drawn from test nodes
    attack_objective = "train"
    defense = "none"                    # none | jaccard | svd
    n_seeds = 5
    seed = 0

Unknown keys are rejected. Seed ``i`` draws all of its randomness from
``SeedSequence([seed, i])``, so adding seeds leaves earlier runs unchanged.
"""
from __future__ import annotations

import csv
import io
import math
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import ATTACK_KINDS, ATTACK_OBJECTIVES, AttackSpec, default_surrogate, run_attack, write_diff
from .datasets import Dataset, generate_sbm, load_dataset, save_dataset
from .defenses import jaccard_prune, truncated_svd_clean
from .ensemble import MODEL_KINDS, BetaEnsemble, TrainConfig, build_model, train
from .graph import PerturbationBudget, apply_edge_diff, make_split

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFENSES = ("none", "jaccard", "svd")
RUN_COLUMNS = ["dataset", "model", "attack", "budget", "defense", "seed_index", "status",
               "test_acc", "final_beta", "best_epoch", "flips", "error"]
SUMMARY_COLUMNS = ["dataset", "attack", "budget", "defense", "model", "n_ok", "n_failed",
                   "mean", "std", "mean_std", "mean_beta"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str
    name: str = "experiment"
    dataset_path: Optional[str] = None
    sbm_n: Optional[int] = None
    sbm_classes: int = 4
    sbm_p_in: float = 0.05
    sbm_p_out: float = 0.005
    sbm_feature_dim: int = 32
    sbm_feature_noise: float = 1.5
    sbm_seed: int = 0
    attack: str = "none"
    attack_budget: Optional[int] = None
    attack_budget_frac: Optional[float] = None
    attack_n_targets: int = 20
    attack_objective: str = "train"
    surrogate_epochs: int = 100
    surrogate_hidden: int = 16
    defense: str = "none"
    jaccard_tau: float = 0.01
    svd_k: int = 15
    svd_iters: int = 4
    epochs: int = 200
    lr: float = 0.01
    clip_norm: float = 5.0
    dropout: float = 0.5
    hidden: int = 64
    weight_decay: float = 5e-3
    gpr_k: int = 4
    n_seeds: int = 10
    seed: int = 0
    jobs: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if (self.dataset_path is None) == (self.sbm_n is None):
            raise ConfigError("give exactly one of dataset_path or sbm_n")
        if self.attack != "none" and self.attack not in ATTACK_KINDS:
            raise ConfigError(f"attack must be 'none' or one of {ATTACK_KINDS}, got {self.attack!r}")
        if self.attack_objective not in ATTACK_OBJECTIVES:
            raise ConfigError(f"attack_objective must be one of {ATTACK_OBJECTIVES}")
        if self.attack != "none" and (self.attack_budget is None) == (self.attack_budget_frac is None):
            raise ConfigError("an attack needs exactly one of attack_budget or attack_budget_frac")
        if self.attack == "greedy" and self.attack_budget is None:
            raise ConfigError("the greedy attack takes a per-target attack_budget")
        if self.attack_budget is not None and self.attack_budget < 0:
            raise ConfigError("attack_budget must be non-negative")
        if self.attack_budget_frac is not None and not 0.0 <= self.attack_budget_frac <= 1.0:
            raise ConfigError("attack_budget_frac must lie in [0, 1]")
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if self.n_seeds < 1 or self.jobs < 1 or self.attack_n_targets < 1:
            raise ConfigError("n_seeds, jobs and attack_n_targets must be >= 1")
        self.train_config(0)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, val in d.items():
            want = known[key].type
            if isinstance(val, (dict, list)):
                raise ConfigError(f"{key}: nested values are not allowed")
            if ("int" in want and "float" not in want and not isinstance(val, int)) or isinstance(val, bool):
                raise ConfigError(f"{key}: expected an integer, got {val!r}")
            if "float" in want and not isinstance(val, (int, float)):
                raise ConfigError(f"{key}: expected a number, got {val!r}")
            if "str" in want and not isinstance(val, str):
                raise ConfigError(f"{key}: expected a string, got {val!r}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def train_config(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig(epochs=self.epochs, lr=self.lr, clip_norm=self.clip_norm,
                               dropout=self.dropout, hidden=self.hidden, seed=seed,
                               weight_decay=self.weight_decay)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def budget_label(self) -> str:
        if self.attack == "none":
            return "0"
        if self.attack_budget_frac is not None:
            return f"{self.attack_budget_frac:g}"
        return str(self.attack_budget)


@dataclass
class SeedResult:
    seed_index: int
    test_acc: Optional[float] = None
    final_beta: Optional[float] = None
    best_epoch: Optional[int] = None
    flips: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class RunSummary:
    results: list[SeedResult] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [r.test_acc for r in self.results if r.ok]

    @property
    def betas(self) -> list[float]:
        return [r.final_beta for r in self.results if r.ok and r.final_beta is not None]

    @property
    def failures(self) -> list[SeedResult]:
        return [r for r in self.results if not r.ok]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else math.nan

    @property
    def std(self) -> float:
        acc = self.accuracies
        return float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0 if acc else math.nan


def seed_streams(global_seed: int, index: int) -> dict[str, int]:
    """Independent per-seed integer seeds for the split, model init, dropout and attack."""
    state = np.random.SeedSequence([global_seed, index]).generate_state(4)
    return dict(zip(("split", "model", "dropout", "attack"), (int(s) for s in state)))


def load_experiment_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset_path is not None:
        return load_dataset(cfg.dataset_path)
    return generate_sbm(cfg.sbm_n, cfg.sbm_classes, cfg.sbm_p_in, cfg.sbm_p_out,
                        cfg.sbm_feature_dim, cfg.sbm_feature_noise, cfg.sbm_seed,
                        name=f"sbm{cfg.sbm_n}")


def _attack_spec(cfg: ExperimentConfig, ds: Dataset, seed: int, targets=()) -> AttackSpec:
    if cfg.attack_budget_frac is not None:
        budget = int(round(cfg.attack_budget_frac * ds.graph.n_edges))
    else:
        budget = cfg.attack_budget
    surrogate = replace(default_surrogate(), epochs=cfg.surrogate_epochs,
                        hidden=cfg.surrogate_hidden, seed=seed)
    return AttackSpec(cfg.attack, PerturbationBudget(budget), tuple(targets), seed=seed,
                      surrogate=surrogate, objective=cfg.attack_objective)


def _apply_defense(cfg: ExperimentConfig, g, x, seed: int):
    if cfg.defense == "jaccard":
        return jaccard_prune(g, x, cfg.jaccard_tau)
    if cfg.defense == "svd":
        return truncated_svd_clean(g, min(cfg.svd_k, g.n_nodes), cfg.svd_iters, seed)
    return g


def run_seed(cfg: ExperimentConfig, ds: Dataset, index: int, out_dir: Path) -> SeedResult:
    """One seed of the pipeline: split, attack, defense, train, in that order."""
    streams = seed_streams(cfg.seed, index)
    seed_dir = out_dir / f"seed_{index:03d}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    g, x, y = ds.graph, ds.features, ds.labels
    split = make_split(g.n_nodes, streams["split"])
    result = SeedResult(index)
    if cfg.attack != "none":
        targets = ()
        if cfg.attack == "greedy":
            pool = np.flatnonzero(split.test_mask)
            rng = np.random.default_rng(streams["attack"])
            targets = np.sort(rng.choice(pool, size=min(cfg.attack_n_targets, len(pool)), replace=False))
            test = np.zeros(g.n_nodes, dtype=bool)
            test[targets] = True
            split = split.with_test(test)
        spec = _attack_spec(cfg, ds, streams["attack"], targets)
        diff = run_attack(spec, g, x, y, split)
        write_diff(seed_dir / "attack.diff", diff, cfg.attack, streams["attack"], spec.budget.b_edges)
        g = apply_edge_diff(g, diff)
        result.flips = len(diff)
    g = _apply_defense(cfg, g, x, streams["attack"])
    model = build_model(cfg.model, x.shape[1], ds.n_classes, hidden=cfg.hidden,
                        dropout=cfg.dropout, seed=streams["model"], gpr_k=cfg.gpr_k)
    res = train(model, g, x, y, split, cfg.train_config(streams["dropout"]))
    res.trajectory.write_csv(seed_dir / "trajectory.csv")
    result.test_acc = res.test_accuracy
    result.best_epoch = res.trajectory.best_epoch
    if isinstance(model, BetaEnsemble) and model.fixed_beta is None:
        result.final_beta = res.trajectory.final_beta
    return result


def _run_seed_safely(cfg, ds, index, out_dir) -> SeedResult:
    try:
        return run_seed(cfg, ds, index, out_dir)
    except Exception as exc:  # a failing seed is recorded, the others still run
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return SeedResult(index, error=msg.replace("\n", " "))


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunSummary:
    """Run every seed and write ``run.csv`` and ``summary.csv`` under the output directory.

    The clean dataset is stored in ``dataset/`` so that each seed's
    ``attack.diff`` replays onto it exactly.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_experiment_data(cfg)
    save_dataset(ds, out / "dataset")
    _atomic_write(out / "config.csv", _csv_text(["key", "value"],
                                                ([k, _fmt(v)] for k, v in asdict(cfg).items())))
    indices = range(cfg.n_seeds)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_seed_safely, [cfg] * cfg.n_seeds, [ds] * cfg.n_seeds,
                                    indices, [out] * cfg.n_seeds))
    else:
        results = [_run_seed_safely(cfg, ds, i, out) for i in indices]
    rows = [[ds.name, cfg.model, cfg.attack, cfg.budget_label(), cfg.defense, r.seed_index,
             "ok" if r.ok else "failed", _fmt(r.test_acc), _fmt(r.final_beta), _fmt(r.best_epoch),
             r.flips, r.error] for r in results]
    _atomic_write(out / "run.csv", _csv_text(RUN_COLUMNS, rows))
    summarize(out, out / "summary.csv")
    return RunSummary(results)


def _read_runs(results_dir: Path) -> list[dict]:
    rows = []
    for path in sorted(results_dir.rglob("run.csv")):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != RUN_COLUMNS:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            rows.extend(reader)
    return rows


def _budget_key(b: str):
    try:
        return (0, float(b), b)
    except ValueError:
        return (1, 0.0, b)


def summarize(results_dir, out_path=None) -> str:
    """Aggregate every ``run.csv`` below ``results_dir`` into one comparison table.

    One row per (dataset, attack, budget, defense, model). ``mean`` and ``std``
    (sample, ddof=1) are fractions at full precision; ``mean_std`` is the
    display form in percent with two decimals.
    """
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise FileNotFoundError(f"{results_dir}: no such results directory")
    runs = _read_runs(results_dir)
    if not runs:
        raise ValueError(f"{results_dir}: no completed runs found")
    groups: dict[tuple, list[dict]] = {}
    for r in runs:
        groups.setdefault((r["dataset"], r["attack"], r["budget"], r["defense"], r["model"]), []).append(r)
    order = sorted(groups, key=lambda k: (k[0], k[1], _budget_key(k[2]), k[3],
                                          MODEL_KINDS.index(k[4]) if k[4] in MODEL_KINDS else 99, k[4]))
    rows = []
    for key in order:
        ok = [r for r in groups[key] if r["status"] == "ok"]
        acc = np.array([float(r["test_acc"]) for r in ok])
        betas = [float(r["final_beta"]) for r in ok if r["final_beta"]]
        mean = float(np.mean(acc)) if len(acc) else math.nan
        std = (float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0) if len(acc) else math.nan
        display = f"{100 * mean:.2f} ± {100 * std:.2f}" if len(acc) else ""
        rows.append([*key, len(ok), len(groups[key]) - len(ok), _fmt(mean), _fmt(std), display,
                     _fmt(float(np.mean(betas))) if betas else ""])
    text = _csv_text(SUMMARY_COLUMNS, rows)
    if out_path is not None:
        _atomic_write(Path(out_path), text)
    return text
