"""Monte-Carlo checks of the estimator theory on synthetic Gaussian data.

Three claims are tested for a fixed set of probe parameter vectors:

* the local estimation is an unbiased estimate of the population
  conditional-loss difference;
* the federated estimation of N i.i.d. shards has variance
  ``sigma_avg^2 / N``;
* a model that satisfies the (federated or local) constraint on the sample
  has population DGEO below ``eps + r`` with at least Chebyshev probability.

Population values come from a large independent sample rather than closed
forms, so any ``SyntheticSpec`` and either model kind can be used.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import GROUP_A, GROUP_B, POSITIVE, SyntheticSpec, sample_arrays
from .errors import ParameterError
from .model import LOGREG, ModelParams, init_params, logistic_loss, n_params, score

MIN_RESAMPLES = 100
DEGENERATE_VAR = 1e-24


@dataclass(frozen=True)
class McSpec:
    dist: SyntheticSpec = field(default_factory=SyntheticSpec.shifted)
    n_clients: int = 10
    m: int = 200
    resamples: int = 2000
    n_probes: int = 10
    r_grid: tuple[float, ...] = (0.05, 0.1, 0.2)
    seed: int = 0
    oracle_m: int = 1_000_000
    model: str = LOGREG
    probe_scale: float = 0.5
    probes: tuple | None = None  # explicit parameter vectors override the random draw

    def validate(self) -> "McSpec":
        self.dist.validate()
        if self.resamples < MIN_RESAMPLES:
            raise ParameterError(f"resamples must be >= {MIN_RESAMPLES}")
        if self.n_clients < 1 or self.m < 1 or self.n_probes < 1 or self.oracle_m < 1:
            raise ParameterError("n_clients, m, n_probes and oracle_m must be positive")
        if not self.r_grid or min(self.r_grid) <= 0:
            raise ParameterError("r grid must be nonempty and positive")
        return self


@dataclass(frozen=True)
class CheckRow:
    check: str
    probe: int
    r: float
    statistic: float
    bound: float
    margin: float
    passed: bool | None  # None marks an inconclusive row

    FIELDS = ("check", "probe", "r", "statistic", "bound", "margin", "passed")


@dataclass
class Report:
    rows: list[CheckRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed is not False for r in self.rows)

    @property
    def conclusive(self) -> bool:
        return any(r.passed is not None for r in self.rows)

    def extend(self, other: "Report") -> "Report":
        self.rows.extend(other.rows)
        return self

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CheckRow.FIELDS)
            for r in self.rows:
                w.writerow([r.check, r.probe, repr(r.r), repr(r.statistic), repr(r.bound),
                            repr(r.margin), "" if r.passed is None else str(r.passed).lower()])

    def summary(self) -> str:
        lines = []
        for name in dict.fromkeys(r.check for r in self.rows):
            rows = [r for r in self.rows if r.check == name]
            fails = sum(r.passed is False for r in rows)
            inconclusive = sum(r.passed is None for r in rows)
            status = "FAIL" if fails else ("INCONCLUSIVE" if inconclusive == len(rows) else "PASS")
            lines.append(f"{name}: {status} ({len(rows)} rows, {fails} failed, {inconclusive} inconclusive)")
        return "\n".join(lines)


def _streams(seed: int):
    probe_ss, oracle_ss, sample_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(probe_ss), np.random.default_rng(oracle_ss),
            np.random.default_rng(sample_ss))


def make_probes(spec: McSpec) -> list[ModelParams]:
    """The fixed probe set: explicit vectors, or ``n_probes`` Gaussian draws."""
    d = spec.dist.dim
    if spec.probes is not None:
        return [ModelParams(spec.model, d, np.asarray(t, dtype=np.float64)) for t in spec.probes]
    rng = _streams(spec.seed)[0]
    k = n_params(spec.model, d)
    out = []
    for _ in range(spec.n_probes):
        base = init_params(spec.model, d, int(rng.integers(2**32))).theta
        out.append(ModelParams(spec.model, d, base + spec.probe_scale * rng.standard_normal(k)))
    return out


def _cell_masks(group, y):
    in_c = y == POSITIVE
    return (group == GROUP_A) & in_c, (group == GROUP_B) & in_c


@dataclass(frozen=True)
class Population:
    """Oracle conditional-loss difference per probe and its standard error."""

    value: np.ndarray
    se: np.ndarray


def population(spec: McSpec, probes: Sequence[ModelParams]) -> Population:
    rng = _streams(spec.seed)[1]
    X, group, y = sample_arrays(spec.dist, spec.oracle_m, rng)
    in_a, in_b = _cell_masks(group, y)
    vals, ses = [], []
    for p in probes:
        losses = logistic_loss(score(p, X), y)
        la, lb = losses[in_a], losses[in_b]
        vals.append(la.mean() - lb.mean())
        ses.append(math.sqrt(la.var(ddof=1) / la.size + lb.var(ddof=1) / lb.size))
    return Population(np.array(vals), np.array(ses))


def local_estimations(spec: McSpec, probes: Sequence[ModelParams], block: int = 100) -> np.ndarray:
    """``D[probe, resample, client]``; NaN where a shard misses a protected cell."""
    rng = _streams(spec.seed)[2]
    R, N, m = spec.resamples, spec.n_clients, spec.m
    out = np.empty((len(probes), R, N))
    for start in range(0, R, block):
        b = min(block, R - start)
        X, group, y = sample_arrays(spec.dist, b * N * m, rng)
        in_a, in_b = _cell_masks(group, y)
        in_a = in_a.reshape(b, N, m)
        in_b = in_b.reshape(b, N, m)
        na = in_a.sum(axis=2)
        nb = in_b.sum(axis=2)
        valid = (na > 0) & (nb > 0)
        for j, p in enumerate(probes):
            losses = logistic_loss(score(p, X), y).reshape(b, N, m)
            with np.errstate(invalid="ignore", divide="ignore"):
                d = (losses * in_a).sum(axis=2) / na - (losses * in_b).sum(axis=2) / nb
            out[j, start:start + b] = np.where(valid, d, np.nan)
    return out


def federated(D: np.ndarray) -> np.ndarray:
    """Unweighted mean over valid clients, per probe and resample."""
    return np.nanmean(D, axis=-1)


@dataclass
class McData:
    """Everything the three checks need, computed once per spec."""

    spec: McSpec
    probes: list[ModelParams]
    pop: Population
    D: np.ndarray


def simulate(spec: McSpec) -> McData:
    spec.validate()
    probes = make_probes(spec)
    return McData(spec, probes, population(spec, probes), local_estimations(spec, probes))


def _data(spec_or_data) -> McData:
    return spec_or_data if isinstance(spec_or_data, McData) else simulate(spec_or_data)


def check_unbiased(spec_or_data, client: int = 0) -> Report:
    """Mean of one client's local estimation versus the oracle, per probe.

    The tolerance is three standard errors of the difference, combining the
    Monte-Carlo error over resamples with the oracle's own sampling error.
    """
    mc = _data(spec_or_data)
    report = Report()
    for j in range(len(mc.probes)):
        d = mc.D[j, :, client]
        d = d[~np.isnan(d)]
        se_mc = d.std(ddof=1) / math.sqrt(d.size)
        se = math.hypot(se_mc, mc.pop.se[j])
        diff = abs(d.mean() - mc.pop.value[j])
        report.rows.append(CheckRow("unbiased", j, math.nan, float(diff), 3.0 * se, se_mc,
                                    bool(diff <= 3.0 * se)))
    return report


def variance_ratios(mc: McData) -> np.ndarray:
    """``Var(federated) / (sigma_avg^2 / N)`` per probe."""
    N = mc.spec.n_clients
    fed = federated(mc.D)
    var_fed = np.var(fed, axis=1, ddof=1)
    sigma2_avg = np.nanvar(mc.D, axis=1, ddof=1).mean(axis=1)
    # variances at rounding level (a constant-loss probe) leave the ratio undefined
    degenerate = sigma2_avg <= DEGENERATE_VAR
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(degenerate, np.nan, var_fed / (sigma2_avg / N))


def check_variance(spec_or_data, tol: float = 0.10) -> Report:
    """Relative error of the variance identity per probe.

    Probes whose local estimation has zero variance (for example the zero
    parameter vector) make the ratio undefined and are reported inconclusive.
    """
    mc = _data(spec_or_data)
    report = Report()
    for j, ratio in enumerate(variance_ratios(mc)):
        if not np.isfinite(ratio):
            report.rows.append(CheckRow("variance", j, math.nan, math.nan, tol, 0.0, None))
            continue
        err = abs(ratio - 1.0)
        report.rows.append(CheckRow("variance", j, math.nan, float(ratio), tol, float(err), bool(err < tol)))
    return report


def check_chebyshev(spec_or_data, eps: float = 0.05) -> Report:
    """Coverage of ``|population DGEO| < eps + r`` among sample-feasible models.

    For the federated constraint a (probe, resample) pair is feasible when
    ``|federated estimation| <= eps``; for the local constraints every
    client needs ``|D_hat_i| <= eps``. Two rows are written per side and r:

    * ``*_pooled``: over all feasible pairs, the share with population DGEO
      below ``eps + r`` against ``1 - sigma^2 / r^2`` (sigma^2 averaged over
      the feasible pairs' probes), less ``3 / sqrt(R)``. No feasible pair
      makes the row inconclusive.
    * ``*_joint`` (one per probe): the frequency of "infeasible or covered",
      which Chebyshev bounds below unconditionally.
    """
    if eps < 0:
        raise ParameterError("eps must be >= 0")
    mc = _data(spec_or_data)
    R, N = mc.spec.resamples, mc.spec.n_clients
    margin = 3.0 / math.sqrt(R)
    mu = np.abs(mc.pop.value)
    sigma2_i = np.nanvar(mc.D, axis=1, ddof=1)  # (P, N)
    sides = {
        "cover_fedfair": (np.abs(federated(mc.D)) <= eps, sigma2_i.mean(axis=1) / N),
        "cover_lco": (np.all(np.abs(np.nan_to_num(mc.D, nan=np.inf)) <= eps, axis=2), sigma2_i.min(axis=1)),
    }
    report = Report()
    for name, (feasible, sigma2) in sides.items():
        for r in mc.spec.r_grid:
            covered = mu < eps + r  # per probe
            bound_p = 1.0 - sigma2 / r**2
            n_feas = feasible.sum(axis=1)
            total = int(n_feas.sum())
            if total == 0:
                report.rows.append(CheckRow(f"{name}_pooled", -1, r, math.nan, math.nan, margin, None))
            else:
                freq = float((n_feas * covered).sum() / total)
                bound = float((n_feas * bound_p).sum() / total)
                report.rows.append(CheckRow(f"{name}_pooled", -1, r, freq, bound, margin,
                                            bool(freq >= bound - margin)))
            for j in range(len(mc.probes)):
                freq = float(np.mean(~feasible[j] | covered[j]))
                report.rows.append(CheckRow(f"{name}_joint", j, r, freq, float(bound_p[j]), margin,
                                            bool(freq >= bound_p[j] - margin)))
    return report


def run_all(spec: McSpec, eps: float = 0.05) -> Report:
    mc = simulate(spec)
    return check_unbiased(mc).extend(check_variance(mc)).extend(check_chebyshev(mc, eps))
