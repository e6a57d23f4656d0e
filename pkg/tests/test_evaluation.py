import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedfair.agp import AgpHyper
from fedfair.dataset import SyntheticSpec, make_synthetic
from fedfair.errors import ConfigError, EvaluationError
from fedfair.evaluation import (
    MetricsRecord,
    evaluate,
    grid_search,
    harmonic_mean,
    read_records,
    repeat_seeds,
    run_and_evaluate,
    summarize,
    summary_table,
    top_k,
    write_records,
)
from fedfair.fairness import FairnessSpec
from fedfair.model import LOGREG, init_params
from fedfair.trainers import RunConfig, Seeds

from conftest import RAW_DIR, needs_compas


def rec(hm, eps, **kw):
    base = dict(dataset="d", model=LOGREG, method="fedfair", epsilon=eps, seed=0, accuracy=hm,
                fairness=hm, harmonic_mean=hm, dgeo_test=0.0, afe_train=0.0)
    base.update(kw)
    return MetricsRecord(**base)


def test_harmonic_mean_examples():
    assert harmonic_mean(0.83, 0.97) == pytest.approx(0.894555, abs=1e-6)
    assert round(harmonic_mean(0.83, 0.97), 2) == 0.89
    assert harmonic_mean(1.0, 1.0) == 1.0
    assert harmonic_mean(0.0, 0.9) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0


@settings(max_examples=200)
@given(a=st.floats(1e-6, 1.0), f=st.floats(1e-6, 1.0))
def test_harmonic_mean_bounds(a, f):
    hm = harmonic_mean(a, f)
    assert min(a, f) * (1 - 1e-12) <= hm <= max(a, f) * (1 + 1e-12)


def test_evaluate_single_and_set():
    ds = make_synthetic(SyntheticSpec.shifted(d=2), 400, 0)
    spec = FairnessSpec()
    p1 = init_params(LOGREG, 2).with_theta(np.array([1.0, 0.0, 0.0]))
    p2 = init_params(LOGREG, 2).with_theta(np.array([0.5, 0.5, 0.1]))
    r1, r2 = evaluate(p1, ds, spec), evaluate(p2, ds, spec)
    both = evaluate([(1, p1), (2, p2)], ds, spec)
    assert both.accuracy == pytest.approx((r1.accuracy + r2.accuracy) / 2)
    assert both.fairness == pytest.approx((r1.fairness + r2.fairness) / 2)
    assert both.harmonic_mean == pytest.approx(harmonic_mean(both.accuracy, both.fairness))


def test_evaluate_requires_protected_cells():
    ds = make_synthetic(SyntheticSpec.shifted(d=2), 200, 0)
    only_a = ds.subset(np.flatnonzero(ds.group == 0))
    with pytest.raises(EvaluationError):
        evaluate(init_params(LOGREG, 2), only_a, FairnessSpec())


def test_top_k_ties_prefer_smaller_epsilon():
    records = [rec(0.8, 0.1), rec(0.9, 0.4), rec(0.9, 0.01), rec(0.7, 0.2)]
    assert [r.epsilon for r in top_k(records, 2)] == [0.01, 0.4]
    assert len(top_k(records[:1])) == 1


def test_summarize_two_pass_oracle():
    rng = np.random.default_rng(0)
    vals = rng.random(7)
    records = [rec(v, 0.1, seed=i) for i, v in enumerate(vals)]
    s = summarize(records)
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    assert abs(s.mean["harmonic_mean"] - mean) < 1e-12
    assert abs(s.std["harmonic_mean"] - math.sqrt(var)) < 1e-12
    with pytest.raises(ConfigError):
        summarize(records[:1])


def test_records_csv_roundtrip(tmp_path):
    records = [rec(0.81234567891234, 0.1), rec(0.5, None, method="fedavg")]
    write_records(tmp_path / "r.csv", records)
    assert read_records(tmp_path / "r.csv") == records


def test_summary_table_picks_opt():
    records = [rec(0.8, 0.1, seed=0), rec(0.82, 0.1, seed=1), rec(0.85, 0.2, seed=0), rec(0.75, 0.2, seed=1),
               rec(0.7, None, method="fedavg")]
    table = summary_table(records).splitlines()
    assert table[0] == "model,method,dataset,OPT,AC,FR,HM,n"
    assert "logreg,fedavg,d,-,0.70±0.00,0.70±0.00,0.70±0.00,1" in table
    assert "logreg,fedfair,d,0.1,0.81±0.01,0.81±0.01,0.81±0.01,2" in table


@needs_compas
def test_grid_and_repeats_on_compas():
    base = RunConfig(dataset="compas", hyper=AgpHyper(max_steps=300), data_dir=str(RAW_DIR))
    res = grid_search(base, [0.1])
    assert len(res.records) == 1 and len(res.top) == 1
    summary = repeat_seeds(base.with_(epsilon=0.1), n_repeats=2)
    assert len(summary.records) == 2
    assert [r.seed for r in summary.records] == [0, 1]
    # forcing identical seeds gives zero spread
    same = [run_and_evaluate(base.with_(epsilon=0.1, seeds=Seeds(3, 3, 3))) for _ in range(2)]
    assert summarize(same).std["accuracy"] == 0.0
    with pytest.raises(ConfigError):
        grid_search(base, [])
    with pytest.raises(ConfigError):
        repeat_seeds(base.with_(epsilon=0.1), n_repeats=1)
