import os
from pathlib import Path

import numpy as np
import pytest

from fedfair.dataset import SyntheticSpec, make_synthetic, partition_uniform

ROOT = Path(__file__).resolve().parents[1]
RAW_DIR = Path(os.environ.get("FEDFAIR_DATA_DIR", ROOT / "data" / "raw"))


def have_raw(*names) -> bool:
    return all((RAW_DIR / n).is_file() for n in names)


needs_adult = pytest.mark.skipif(not have_raw("adult.data", "adult.test"), reason="ADULT raw files not present")
needs_compas = pytest.mark.skipif(not have_raw("compas-scores-two-years.csv"), reason="COMPAS raw file not present")
needs_drug = pytest.mark.skipif(not have_raw("drug_consumption.data"), reason="DRUG raw file not present")


@pytest.fixture
def toy_data():
    """A small two-group Gaussian dataset with a real fairness gap."""
    return make_synthetic(SyntheticSpec.shifted(d=3, separation=1.0, shift=0.8), 600, seed=11)


@pytest.fixture
def toy_shards(toy_data):
    return partition_uniform(toy_data, 5, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines printed by tests/test_acceptance.py."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [ln for ln in getattr(rep, "capstdout", "").splitlines() if ln.startswith("ACCEPTANCE")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: (len(s.split(":")[0]), s)):
            terminalreporter.write_line(ln)
