import numpy as np
import pytest

from fedfair.dataset import SyntheticSpec
from fedfair.errors import ParameterError
from fedfair.verify import (
    McSpec,
    check_chebyshev,
    check_variance,
    check_unbiased,
    variance_ratios,
    simulate,
)

SMALL = dict(resamples=400, oracle_m=200_000, n_probes=4)


def test_spec_validation():
    with pytest.raises(ParameterError):
        McSpec(resamples=99).validate()
    with pytest.raises(ParameterError):
        McSpec(r_grid=(0.1, -0.1)).validate()


def test_symmetric_distribution_has_zero_population_gap():
    mc = simulate(McSpec(dist=SyntheticSpec.symmetric(d=2), **SMALL))
    np.testing.assert_allclose(mc.pop.value, 0.0, atol=5 * mc.pop.se.max())
    assert check_unbiased(mc).passed


def test_unbiased_shifted():
    report = check_unbiased(McSpec(**SMALL))
    assert report.passed and len(report.rows) == 4


def test_standard_error_scales_with_resamples():
    a = check_unbiased(McSpec(resamples=100, n_probes=2, oracle_m=10_000))
    b = check_unbiased(McSpec(resamples=10_000, n_probes=2, oracle_m=10_000, m=20, n_clients=1))
    c = check_unbiased(McSpec(resamples=100, n_probes=2, oracle_m=10_000, m=20, n_clients=1))
    ratio = np.array([r.margin for r in c.rows]) / np.array([r.margin for r in b.rows])
    np.testing.assert_allclose(ratio, 10.0, rtol=0.25)
    assert a.rows


def test_variance_single_client_is_identity():
    mc = simulate(McSpec(n_clients=1, **SMALL))
    np.testing.assert_allclose(variance_ratios(mc), 1.0, rtol=1e-12)


def test_variance_ratio_near_one():
    report = check_variance(McSpec(resamples=2000, n_probes=4, oracle_m=10_000))
    assert report.passed
    assert all(abs(r.statistic - 1) < 0.1 for r in report.rows)


def test_doubling_clients_halves_variance():
    kw = dict(resamples=2000, n_probes=3, oracle_m=10_000, seed=5)
    v10 = simulate(McSpec(n_clients=10, **kw))
    v20 = simulate(McSpec(n_clients=20, **kw))
    var10 = np.nanmean(v10.D, axis=2).var(axis=1, ddof=1)
    var20 = np.nanmean(v20.D, axis=2).var(axis=1, ddof=1)
    np.testing.assert_allclose(var10 / var20, 2.0, rtol=0.15)


def test_zero_probe_is_degenerate():
    mc = simulate(McSpec(probes=(np.zeros(3),), **SMALL))
    np.testing.assert_allclose(mc.D, 0.0, atol=1e-15)
    cheb = check_chebyshev(mc, eps=1e-12)
    assert cheb.passed
    assert all(r.statistic == 1.0 for r in cheb.rows)
    assert check_variance(mc).rows[0].passed is None


def test_chebyshev_large_r_bound_is_one():
    report = check_chebyshev(McSpec(r_grid=(100.0,), **SMALL), eps=0.05)
    assert report.passed
    for r in report.rows:
        if r.passed is not None:
            assert r.bound > 0.999 and r.statistic == 1.0


def test_chebyshev_empty_feasible_set_is_inconclusive():
    report = check_chebyshev(McSpec(probe_scale=5.0, **SMALL), eps=0.0)
    pooled = [r for r in report.rows if r.check.endswith("pooled")]
    assert all(r.passed is None for r in pooled)
    assert report.passed


def test_report_csv(tmp_path):
    mc = simulate(McSpec(**SMALL))
    report = check_unbiased(mc).extend(check_chebyshev(mc))
    report.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "check,probe,r,statistic,bound,margin,passed"
    assert len(lines) == 1 + len(report.rows)
    assert "unbiased: PASS" in report.summary()
