"""Test-set metrics, repeated random constructions and the epsilon grid search."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, EvaluationError
from .fairness import FairnessSpec, deo_fairness, dgeo, local_estimation
from .model import ModelParams, accuracy
from .trainers import ST, Experiment, RunConfig, RunResult, Seeds, prepare_experiment, run


def harmonic_mean(acc: float, fair: float) -> float:
    s = acc + fair
    return 2.0 * acc * fair / s if s > 0 else 0.0


@dataclass(frozen=True)
class MetricsRecord:
    dataset: str
    model: str
    method: str
    epsilon: float | None
    seed: int
    accuracy: float
    fairness: float
    harmonic_mean: float
    dgeo_test: float
    afe_train: float
    drop_rate: float = 0.0

    FIELDS = ("dataset", "model", "method", "epsilon", "seed", "accuracy", "fairness",
              "harmonic_mean", "dgeo_test", "afe_train", "drop_rate")

    def row(self) -> list[str]:
        out = []
        for name in self.FIELDS:
            v = getattr(self, name)
            out.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        return out

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        eps = row["epsilon"]
        return cls(row["dataset"], row["model"], row["method"], float(eps) if eps else None,
                   int(row["seed"]), *(float(row[k]) for k in cls.FIELDS[5:]))


def _check_cells(test: Dataset, spec: FairnessSpec) -> None:
    counts = test.cell_counts()
    for g in (spec.group_a, spec.group_b):
        if counts.get((g, spec.protected_class), 0) == 0:
            raise EvaluationError(f"test set has no instances in cell (group={g}, class={spec.protected_class:+g})")


def model_metrics(p: ModelParams, test: Dataset, spec: FairnessSpec) -> tuple[float, float, float]:
    """``(accuracy, fairness, smooth DGEO)`` of one model on the test set."""
    _check_cells(test, spec)
    acc = accuracy(p, test.X, test.y)
    _, fair = deo_fairness(p, test, spec)
    return acc, fair, dgeo(p, test, spec)


def evaluate(model, test: Dataset, spec: FairnessSpec, *, afe_train: float = math.nan,
             dataset: str = "", model_kind: str = "", method: str = "", epsilon=None,
             seed: int = 0, drop_rate: float = 0.0) -> MetricsRecord:
    """Score one model, or average the per-model scores of a set of ``(client_id, params)`` pairs.

    The harmonic mean of a model set is taken over the averaged accuracy and
    fairness, matching how the averaged row would be reported.
    """
    if isinstance(model, ModelParams):
        acc, fair, dg = model_metrics(model, test, spec)
    else:
        scores = np.array([model_metrics(p, test, spec) for _, p in model])
        if scores.size == 0:
            raise EvaluationError("empty model set")
        acc, fair, dg = (float(v) for v in scores.mean(axis=0))
    return MetricsRecord(dataset, model_kind, method, epsilon, seed, acc, fair,
                         harmonic_mean(acc, fair), dg, afe_train, drop_rate)


def _st_afe(models, shards, spec: FairnessSpec) -> float:
    """Mean absolute local estimation of each ST model on its own shard."""
    by_id = {s.client_id: s for s in shards}
    vals = []
    for cid, p in models:
        st = local_estimation(p, by_id[cid], spec)
        if st.valid:
            vals.append(abs(st.D_hat))
    return float(np.mean(vals)) if vals else math.nan


def score_run(res: RunResult, exp: Experiment) -> MetricsRecord:
    """Metrics record for a finished run on its own random construction."""
    cfg = res.cfg
    if cfg.method == ST:
        afe_train = _st_afe(res.params, exp.shards, cfg.fairness)
    else:
        afe_train = res.trajectory.final_afe
    return evaluate(res.params, exp.test, cfg.fairness, afe_train=afe_train, dataset=cfg.dataset,
                    model_kind=cfg.model, method=cfg.method, epsilon=cfg.epsilon,
                    seed=cfg.seeds.data, drop_rate=cfg.drop_rate)


def run_and_evaluate(cfg: RunConfig, exp: Experiment | None = None) -> MetricsRecord:
    """Train ``cfg`` on its random construction and score it on the held-out split."""
    cfg.validate()
    if exp is None:
        exp = prepare_experiment(cfg)
    return score_run(run(cfg, exp), exp)


def run_many(cfgs: Sequence[RunConfig], jobs: int = 1) -> list[MetricsRecord]:
    """Evaluate independent configs, in order, optionally across worker processes."""
    for c in cfgs:
        c.validate()
    if jobs <= 1 or len(cfgs) <= 1:
        return [run_and_evaluate(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_and_evaluate, cfgs))


def top_k(records: Iterable[MetricsRecord], k: int = 5) -> list[MetricsRecord]:
    """Largest harmonic mean first; ties go to the smaller epsilon."""
    key = lambda r: (-r.harmonic_mean, r.epsilon if r.epsilon is not None else math.inf)
    return sorted(records, key=key)[:k]


@dataclass
class GridResult:
    records: list[MetricsRecord]
    top: list[MetricsRecord]

    @property
    def best(self) -> MetricsRecord:
        return self.top[0]


def grid_search(base: RunConfig, eps_set: Sequence[float], jobs: int = 1, k: int = 5) -> GridResult:
    eps_set = list(eps_set)
    if not eps_set:
        raise ConfigError("epsilon grid is empty")
    records = run_many([base.with_(epsilon=float(e)) for e in eps_set], jobs)
    return GridResult(records, top_k(records, k))


METRICS = ("accuracy", "fairness", "harmonic_mean", "dgeo_test", "afe_train")


@dataclass
class SeedSummary:
    records: list[MetricsRecord]
    mean: dict
    std: dict


def summarize(records: Sequence[MetricsRecord]) -> SeedSummary:
    """Mean and sample standard deviation (n - 1 divisor) of each metric."""
    if len(records) < 2:
        raise ConfigError("need at least two records to summarize")
    mean, std = {}, {}
    for name in METRICS:
        v = np.array([getattr(r, name) for r in records], dtype=np.float64)
        mean[name] = float(v.mean())
        std[name] = float(v.std(ddof=1))
    return SeedSummary(list(records), mean, std)


def seed_configs(cfg: RunConfig, n_repeats: int) -> list[RunConfig]:
    base = cfg.seeds
    return [cfg.with_(seeds=Seeds(base.data + i, base.init + i, base.drop + i)) for i in range(n_repeats)]


def repeat_seeds(cfg: RunConfig, n_repeats: int = 5, jobs: int = 1) -> SeedSummary:
    """Rerun split, partition and training with ``n_repeats`` distinct seeds."""
    if n_repeats < 2:
        raise ConfigError("n_repeats must be >= 2")
    return summarize(run_many(seed_configs(cfg, n_repeats), jobs))


def write_records(path, records: Iterable[MetricsRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRecord.FIELDS)
        for r in records:
            w.writerow(r.row())


def read_records(path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        return [MetricsRecord.from_row(row) for row in csv.DictReader(fh)]


def summary_table(records: Sequence[MetricsRecord]) -> str:
    """Method x dataset table with OPT (best epsilon by mean HM) and AC/FR/HM as mean±std.

    Records are grouped by (model, method, dataset, epsilon); within each
    (model, method, dataset) the epsilon with the largest mean harmonic mean
    is reported.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault((r.model, r.method, r.dataset), {}).setdefault(r.epsilon, []).append(r)
    lines = ["model,method,dataset,OPT,AC,FR,HM,n"]
    for (model, method, ds), by_eps in sorted(groups.items()):
        def mean_hm(item):
            return float(np.mean([r.harmonic_mean for r in item[1]]))
        eps, recs = min(by_eps.items(),
                        key=lambda it: (-mean_hm(it), it[0] if it[0] is not None else math.inf))
        cells = []
        for name in ("accuracy", "fairness", "harmonic_mean"):
            v = np.array([getattr(r, name) for r in recs])
            sd = v.std(ddof=1) if v.size > 1 else 0.0
            cells.append(f"{v.mean():.2f}±{sd:.2f}")
        opt = "-" if eps is None else f"{eps:g}"
        lines.append(",".join([model, method, ds, opt, *cells, str(len(recs))]))
    return "\n".join(lines) + "\n"
