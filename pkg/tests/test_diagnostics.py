import math

import numpy as np
import pytest

from otattn import diagnostics as dg


@pytest.fixture(scope="module")
def small_sweep():
    cfg = dg.SweepConfig(num_factors=13, temperatures=[0.1, 1.0], learning_rates=[1.0])
    return cfg, dg.entropy_sweep(cfg)


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        dg.SweepConfig(factor_min=0.0)
    with pytest.raises(ValueError):
        dg.SweepConfig(factor_min=10.0, factor_max=1.0)
    with pytest.raises(ValueError):
        dg.SweepConfig(temperatures=[])
    with pytest.raises(ValueError):
        dg.SweepConfig(seeds=[])


def test_factors_log_grid():
    f = dg.SweepConfig(num_factors=7).factors()
    assert f[0] == pytest.approx(1e-3) and f[-1] == pytest.approx(1e3)
    assert np.allclose(np.diff(np.log10(f)), 1.0)


def test_sweep_cost_prefers_diagonal():
    C = dg.sweep_cost(4, 2.0)
    assert np.all(np.diag(C) == -2.0)
    assert np.all(C[~np.eye(4, dtype=bool)] == 0.0)


def test_sweep_rows_in_range(small_sweep):
    cfg, rows = small_sweep
    assert len(rows) == cfg.num_factors * 3
    for r in rows:
        assert 0.0 <= r.entropy_norm <= 1.0
        assert 0.0 <= r.grad_norm_methodnorm <= 1.0
        assert r.grad_norm_raw >= 0.0
    for key in {(r.method, r.param) for r in rows}:
        assert max(r.grad_norm_methodnorm for r in rows if (r.method, r.param) == key) == pytest.approx(1.0)


def test_sweep_ordering_deterministic(small_sweep):
    _, rows = small_sweep
    keys = [(r.method, r.param, r.factor) for r in rows]
    assert keys == sorted(keys)


def test_sinkhorn_sweep_entropy_monotone(small_sweep):
    _, rows = small_sweep
    e = [r.entropy_norm for r in rows if r.method == "sinkhorn" and r.param == 1.0]
    assert all(b <= a + 1e-9 for a, b in zip(e, e[1:]))


def test_sinkhorn_sweep_closed_form(small_sweep):
    # the plan of -f*I with unit marginals is p on the diagonal, q elsewhere
    _, rows = small_sweep
    n = 10
    for r in rows:
        if r.method != "sinkhorn":
            continue
        z = math.exp(-r.factor / r.param)
        p = 1 / (1 + (n - 1) * z)
        q = z / (1 + (n - 1) * z)
        H = -(n * p * math.log(p) + n * (n - 1) * (q * math.log(q) if q > 0 else 0.0))
        assert r.entropy_norm == pytest.approx(min(H / (n * math.log(n)), 1.0), abs=1e-7)


def test_mesh_lowers_entropy_at_small_factor(small_sweep):
    _, rows = small_sweep
    sk = next(r for r in rows if r.method == "sinkhorn" and r.param == 1.0)
    me = next(r for r in rows if r.method == "mesh" and r.param == 1.0)
    assert sk.entropy_norm >= 0.95
    assert me.entropy_norm < sk.entropy_norm


def test_gradient_width_helper():
    rows = [dg.ResultRow("x", 1.0, f, 0.5, g, g) for f, g in [(1e-2, 0.0), (1e-1, 0.5), (1.0, 1.0), (10.0, 0.02),
                                                              (100.0, 0.001)]]
    assert dg.nontrivial_gradient_width(rows, "x", 1.0) == pytest.approx(2.0)
    assert dg.nontrivial_gradient_width(rows, "x", 2.0) == 0.0


def test_sweep_csv_roundtrip(small_sweep, tmp_path):
    _, rows = small_sweep
    path = tmp_path / "s.csv"
    dg.write_rows(rows, path)
    assert path.read_text().splitlines()[0] == ",".join(dg.CSV_COLUMNS)
    assert dg.read_rows(path) == rows


def test_warmstart_gap_equal_at_one_and_smaller_after():
    rows = dg.warmstart_gap([1, 2, 4], 6, np.random.default_rng(3))
    assert [r.mesh_iterations for r in rows] == [1, 2, 4]
    assert rows[0].gap_warm == rows[0].gap_cold
    for r in rows[1:]:
        assert r.gap_warm < r.gap_cold


def test_warmstart_gap_converged_inner_is_zero():
    rows = dg.warmstart_gap([1, 3], 3, np.random.default_rng(0), inner_iterations=None)
    for r in rows:
        assert r.gap_warm < 1e-9 and r.gap_cold < 1e-9


def test_warmstart_gap_validation():
    with pytest.raises(ValueError):
        dg.warmstart_gap([1], 0)
    with pytest.raises(ValueError):
        dg.warmstart_gap([0, 1], 2)


def test_gap_csv_roundtrip(tmp_path):
    rows = [dg.GapRow(1, 0.1, 0.1), dg.GapRow(2, 1 / 3, 0.7)]
    dg.write_gap_rows(rows, tmp_path / "g.csv")
    assert dg.read_gap_rows(tmp_path / "g.csv") == rows
