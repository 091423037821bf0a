import math

import numpy as np
import pytest

from qebev.bench import (
    BenchConfig,
    ScalingReport,
    _fit_slope,
    run_scaling,
    write_bench_csv,
)
from qebev.numerics import make_rng


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(n_sweep=(4000, 2000, 8000))
    with pytest.raises(ValueError):
        BenchConfig(n_sweep=(1000,))
    with pytest.raises(ValueError):
        BenchConfig(repeats=2)


def test_fit_slope_exact_power_law():
    ns = [1000, 2000, 4000, 8000, 16000]
    ts = [2.5e-6 * n for n in ns]
    slope, (lo, hi) = _fit_slope(ns, ts)
    assert slope == pytest.approx(1.0, abs=1e-9)
    # exact fit collapses the interval onto the slope
    assert lo == pytest.approx(slope, abs=1e-9)
    assert hi == pytest.approx(slope, abs=1e-9)
    # quadratic scaling fits slope 2
    slope2, _ = _fit_slope(ns, [1e-9 * n * n for n in ns])
    assert slope2 == pytest.approx(2.0, abs=1e-9)


def test_fit_slope_ci_tightens_on_clean_data():
    ns = [1000, 2000, 4000, 8000]
    clean = [1e-6 * n for n in ns]
    noisy = [1e-6 * n * f for n, f in zip(ns, (1.0, 1.6, 0.7, 1.3))]
    _, (clo, chi) = _fit_slope(ns, clean)
    _, (nlo, nhi) = _fit_slope(ns, noisy)
    assert (chi - clo) < (nhi - nlo)


def test_run_scaling_tiny_sweep():
    cfg = BenchConfig(n_sweep=(500, 1000, 2000), repeats=3, warmup=1)
    rep = run_scaling(cfg, make_rng(0))
    assert len(rep.rows) == 3
    assert [r.n for r in rep.rows] == [500, 1000, 2000]
    for row in rep.rows:
        assert row.median_seconds > 0
        assert math.isfinite(row.median_seconds)
        assert row.k == cfg.k and row.d == cfg.d
    assert math.isfinite(rep.slope)
    assert rep.slope_ci[0] <= rep.slope <= rep.slope_ci[1]
    assert rep.machine


def test_bench_csv_layout(tmp_path):
    cfg = BenchConfig(n_sweep=(500, 1000), repeats=3, warmup=0)
    rep = run_scaling(cfg, make_rng(1))
    path = tmp_path / "bench.csv"
    write_bench_csv(rep, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "n,K,I,d,median_seconds,slope_running"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert int(first[0]) == 500
    assert float(first[4]) > 0
