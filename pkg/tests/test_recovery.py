import numpy as np
import pytest

from kroncs.model import (CorrelationSpec, KroneckerMatrix, ProblemInstance, SignalPrior,
                          make_instance, save_instance, load_instance)
from kroncs.recovery import (BPParams, RankDeficientError, basis_pursuit,
                             basis_pursuit_lp_oracle, dual_margin)

IDENT = CorrelationSpec.identity(1)


def instance(n, alpha, rho=0.5, r=0.0, seed=0):
    return make_instance(SignalPrior(rho), n, alpha, CorrelationSpec.tridiagonal(n, r), IDENT, seed)


def with_x0(inst, x0):
    x0 = np.asarray(x0, dtype=float)
    return ProblemInstance(inst.matrix, x0, inst.matrix.entries @ x0)


def test_admm_matches_lp_oracle_100_cases():
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        n = [20, 50, 100][k % 3]
        r = [0.0, 0.3, 0.5][(k // 3) % 3]
        alpha = float(rng.uniform(0.3, 0.9))
        rho = float(rng.uniform(0.1, 0.6))
        inst = instance(n, alpha, rho, r, seed=1000 + k)
        got = basis_pursuit(inst)
        ref = basis_pursuit_lp_oracle(inst)
        rel = abs(got.objective - ref.objective) / max(ref.objective, 1e-12)
        worst = max(worst, rel)
        assert rel < 1e-6, (k, n, r, alpha, rel, got.stop_reason)
    assert worst < 1e-6


def test_zero_signal():
    inst = with_x0(instance(40, 0.5), np.zeros(40))
    res = basis_pursuit(inst)
    assert not res.x_hat.any() and res.success and res.converged
    assert basis_pursuit_lp_oracle(inst).objective == 0.0


def test_one_sparse_heavily_oversampled():
    x0 = np.zeros(50)
    x0[17] = -1.3
    inst = with_x0(instance(50, 0.9, seed=3), x0)
    res = basis_pursuit(inst)
    assert res.success and res.rel_error < 1e-6
    assert basis_pursuit_lp_oracle(inst).success


def test_feasibility_of_returned_point():
    for seed in range(5):
        inst = instance(80, 0.6, 0.5, 0.5, seed)
        for params in (BPParams(), BPParams(max_iters=30), BPParams(certify=True)):
            res = basis_pursuit(inst, params)
            resid = np.linalg.norm(inst.matrix.entries @ res.x_hat - inst.y)
            assert resid <= 1e-8 * max(np.linalg.norm(inst.y), 1e-300)


def test_max_iters_flags_unconverged():
    res = basis_pursuit(instance(60, 0.6, seed=4), BPParams(max_iters=5))
    assert not res.converged and res.iters == 5 and res.stop_reason == "max_iters"


def test_scale_equivariance():
    inst = instance(60, 0.7, 0.4, 0.3, seed=6)
    base = basis_pursuit(inst)
    c = 3.7
    scaled = basis_pursuit(ProblemInstance(inst.matrix, c * inst.x0, c * inst.y),
                           BPParams(penalty=1.0 / c))
    np.testing.assert_allclose(scaled.x_hat, c * base.x_hat, atol=1e-8 * c)
    assert scaled.success == base.success


def test_rank_deficient_raises():
    inst = instance(30, 0.5, seed=2)
    f = inst.matrix.entries.copy()
    f[1] = f[0]
    mat = KroneckerMatrix(inst.matrix.rt_spec, inst.matrix.rr_spec, None, f)
    with pytest.raises(RankDeficientError):
        basis_pursuit(ProblemInstance(mat, inst.x0, f @ inst.x0))


def test_success_flag_matches_rel_error():
    for seed in range(10):
        res = basis_pursuit(instance(60, 0.75, seed=seed))
        assert res.success == (res.rel_error < 1e-4)


def test_certified_runs_agree_with_oracle():
    for seed in range(40):
        inst = instance(100, 0.82, 0.5, 0.5, seed=500 + seed)
        cert = basis_pursuit(inst, BPParams(certify=True))
        assert cert.converged
        assert cert.success == basis_pursuit_lp_oracle(inst).success


def test_dual_margin_classifies():
    for seed in range(20):
        inst = instance(60, 0.75, 0.4, 0.5, seed=900 + seed)
        unique = dual_margin(inst.matrix.entries, inst.x0) < 1 - 1e-9
        assert unique == basis_pursuit_lp_oracle(inst).success


def test_regimes_at_400():
    # deep success and deep failure at r = 0, N = 400
    params = BPParams(certify=True)
    hi = [basis_pursuit(instance(400, 0.95, seed=s), params).success for s in range(100)]
    lo = [basis_pursuit(instance(400, 0.60, seed=s), params).success for s in range(100)]
    assert sum(hi) >= 99
    assert sum(lo) <= 1


def test_loaded_instance_gives_same_result(tmp_path):
    inst = instance(50, 0.7, 0.3, 0.5, seed=8)
    save_instance(inst, tmp_path / "i")
    back = load_instance(tmp_path / "i")
    a = basis_pursuit(inst)
    b = basis_pursuit(back)
    np.testing.assert_array_equal(a.x_hat, b.x_hat)


def test_lp_oracle_size_guard():
    with pytest.raises(ValueError):
        basis_pursuit_lp_oracle(instance(300, 0.5))
