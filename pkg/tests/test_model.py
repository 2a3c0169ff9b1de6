import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kroncs.model import (CorrelationInfeasibleError, CorrelationSpec, DimensionError,
                          SignalPrior, load_instance, make_instance, parse_correlation,
                          sample_matrix, sample_signal, save_instance, sqrt_tridiagonal,
                          tridiagonal_factors)


def cyclic_tridiagonal(n, r):
    m = np.eye(n)
    for i in range(n):
        m[i, (i + 1) % n] += r
        m[i, (i - 1) % n] += r
    return m


@given(st.floats(-0.5, 0.5))
def test_factor_identities(r):
    lp, lm = tridiagonal_factors(r)
    assert abs(lp * lm - r) < 1e-14
    assert abs(lp * lp + lm * lm - 1.0) < 1e-14


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 40), st.floats(-0.5, 0.5))
def test_sqrt_identity(n, r):
    s = sqrt_tridiagonal(CorrelationSpec.tridiagonal(n, r))
    np.testing.assert_allclose(s.T @ s, cyclic_tridiagonal(n, r), rtol=0, atol=1e-12)


def test_factor_special_values():
    assert tridiagonal_factors(0.0) == (1.0, 0.0)
    lp, lm = tridiagonal_factors(0.5)
    assert lp == pytest.approx(np.sqrt(2) / 2, abs=1e-15)
    assert lm == pytest.approx(np.sqrt(2) / 2, abs=1e-15)
    np.testing.assert_array_equal(sqrt_tridiagonal(CorrelationSpec.tridiagonal(7, 0.0)), np.eye(7))


def test_sqrt_r03_n6_direct_product():
    spec = CorrelationSpec.tridiagonal(6, 0.3)
    s = spec.sqrt()
    np.testing.assert_allclose(s.T @ s, spec.dense(), atol=1e-12)
    np.testing.assert_allclose(spec.dense(), cyclic_tridiagonal(6, 0.3), atol=0)


@pytest.mark.parametrize("r", [0.6, -0.51, np.nan])
def test_infeasible_r(r):
    with pytest.raises(CorrelationInfeasibleError):
        tridiagonal_factors(r)
    with pytest.raises(CorrelationInfeasibleError):
        CorrelationSpec.tridiagonal(10, r)


def test_trace_normalization():
    for r in (0.0, 0.3, 0.5):
        assert np.trace(CorrelationSpec.tridiagonal(50, r).dense()) / 50 == pytest.approx(1.0)


def test_apply_sqrt_matches_dense():
    rng = np.random.default_rng(1)
    spec = CorrelationSpec.tridiagonal(9, 0.41)
    x = rng.normal(size=9)
    np.testing.assert_allclose(spec.apply_sqrt(x), spec.sqrt() @ x, atol=1e-14)
    np.testing.assert_allclose(spec.apply_sqrt_t(x), spec.sqrt().T @ x, atol=1e-14)


def test_custom_spec_checks():
    good = cyclic_tridiagonal(5, 0.2)
    spec = CorrelationSpec.custom(good)
    s = spec.sqrt()
    np.testing.assert_allclose(s.T @ s, good, atol=1e-12)
    with pytest.raises(CorrelationInfeasibleError):
        CorrelationSpec.custom(cyclic_tridiagonal(5, 0.7))
    bad = good.copy()
    bad[0, 1] += 0.1
    with pytest.raises(CorrelationInfeasibleError):
        CorrelationSpec.custom(bad)
    with pytest.raises(CorrelationInfeasibleError):
        CorrelationSpec.custom(2 * np.eye(3))
    with pytest.raises(DimensionError):
        spec.with_size(6)


def test_signal_prior_cases():
    assert not sample_signal(SignalPrior(0.0), 100, 3).any()
    x = sample_signal(SignalPrior(1.0), 100_000, 4)
    assert abs(x.mean()) < 0.02 and abs(x.var() - 1) < 0.02
    x = sample_signal(SignalPrior(0.5), 100_000, 5)
    assert abs(np.count_nonzero(x) / x.size - 0.5) < 0.01
    with pytest.raises(ValueError):
        SignalPrior(1.5)


def test_matrix_entry_variance():
    f = sample_matrix(10_000, 5000, CorrelationSpec.identity(10_000), CorrelationSpec.identity(5000), 0)
    v = f.entries.var()
    assert abs(v * 10_000 - 1) < 0.05
    # expected column squared norm P/N
    assert np.mean(np.sum(f.entries[:, :200] ** 2, axis=0)) == pytest.approx(0.5, rel=0.05)


def test_column_correlation_from_rt():
    n, p = 500, 250
    acc = np.zeros(2)
    for s in range(100):
        f = sample_matrix(n, p, CorrelationSpec.tridiagonal(n, 0.5), CorrelationSpec.identity(p), s).entries
        g = f.T @ f
        acc += [np.mean(np.diag(g, 1)), np.mean(np.diag(g, 2))]
    acc /= 100
    assert acc[0] == pytest.approx(0.5 * 0.5, abs=0.01)
    assert abs(acc[1]) < 0.01


def test_row_correlation_from_rr():
    n, p = 500, 250
    row = col = 0.0
    for s in range(100):
        f = sample_matrix(n, p, CorrelationSpec.identity(n), CorrelationSpec.tridiagonal(p, 0.4), s).entries
        row += np.mean(np.sum(f[:-1] * f[1:], axis=1))
        col += np.mean(np.sum(f[:, :-1] * f[:, 1:], axis=0))
    # adjacent rows carry correlation r (rows have squared norm ~1), columns none
    assert row / 100 == pytest.approx(0.4, abs=0.01)
    assert abs(col / 100) < 0.01


def test_factorwise_matches_dense():
    rng = np.random.default_rng(0)
    f = sample_matrix(40, 20, CorrelationSpec.tridiagonal(40, 0.3),
                      CorrelationSpec.tridiagonal(20, -0.2), 9)
    x = rng.normal(size=40)
    v = rng.normal(size=20)
    rt, rr = CorrelationSpec.tridiagonal(40, 0.3), CorrelationSpec.tridiagonal(20, -0.2)
    np.testing.assert_allclose(rr.sqrt() @ f.xi @ rt.sqrt(), f.entries, atol=1e-14)
    np.testing.assert_allclose(f.matvec(x), f.entries @ x, atol=1e-12)
    np.testing.assert_allclose(f.rmatvec(v), f.entries.T @ v, atol=1e-12)


def test_instance_basics():
    inst = make_instance(SignalPrior(0.5), 100, 0.5, CorrelationSpec.identity(1),
                         CorrelationSpec.identity(1), 11)
    assert inst.p == 50 and inst.alpha == 0.5
    assert np.max(np.abs(inst.y - inst.matrix.entries @ inst.x0)) == 0.0
    again = make_instance(SignalPrior(0.5), 100, 0.5, CorrelationSpec.identity(1),
                          CorrelationSpec.identity(1), 11)
    np.testing.assert_array_equal(inst.matrix.entries, again.matrix.entries)
    np.testing.assert_array_equal(inst.x0, again.x0)
    zero = make_instance(SignalPrior(0.0), 50, 0.4, CorrelationSpec.identity(1),
                         CorrelationSpec.identity(1), 1)
    assert not zero.y.any()
    with pytest.raises(ValueError):
        make_instance(SignalPrior(0.5), 100, 1.0, CorrelationSpec.identity(1),
                      CorrelationSpec.identity(1), 1)


def test_save_load_round_trip(tmp_path):
    inst = make_instance(SignalPrior(0.3), 30, 0.6, CorrelationSpec.tridiagonal(3, 0.25),
                         CorrelationSpec.tridiagonal(3, 0.1), 5)
    save_instance(inst, tmp_path / "inst")
    back = load_instance(tmp_path / "inst")
    np.testing.assert_array_equal(back.matrix.entries, inst.matrix.entries)
    np.testing.assert_array_equal(back.x0, inst.x0)
    np.testing.assert_array_equal(back.y, inst.y)
    raw = np.fromfile(tmp_path / "inst.bin", dtype="<f8").reshape(inst.p, inst.n)
    np.testing.assert_array_equal(raw, inst.matrix.entries)


def test_parse_correlation(tmp_path):
    assert parse_correlation("identity", 4).kind == "identity"
    spec = parse_correlation("tridiag:0.25", 8)
    assert spec.kind == "tridiagonal" and spec.r == 0.25 and spec.n == 8
    path = tmp_path / "rt.csv"
    np.savetxt(path, cyclic_tridiagonal(4, 0.1), delimiter=",")
    assert parse_correlation(f"file:{path}", 4).kind == "custom"
    with pytest.raises(ValueError):
        parse_correlation("banded:3", 4)
