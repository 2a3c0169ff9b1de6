"""End-to-end acceptance checks at full scale.

Each test appends one PASS/FAIL line to the summary printed at the end of the
pytest run. The full module takes roughly half an hour on one core; the
empirical experiment dominates.
"""
import csv
import io
import json
import math
from pathlib import Path

import numpy as np
import pytest

import test_chain
import test_recovery
from conftest import ACCEPTANCE_LINES
from kroncs import uncorrelated as scalar
from kroncs.cli import main
from kroncs.model import CorrelationSpec, SignalPrior, tridiagonal_factors
from kroncs.replica import MCConfig, find_threshold

pytestmark = pytest.mark.slow

FULL_MC = ["--n-chain", "100000", "--samples", "50", "--seed", "0"]
_cache: dict = {}


def record(label: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")


def cli(argv, capsys) -> str:
    code = main(argv)
    out, err = capsys.readouterr()
    assert code == 0, err
    return out


def threshold(r: float, tmp_path_factory, capsys) -> tuple[float, float]:
    if r not in _cache:
        prefix = tmp_path_factory.mktemp("threshold") / f"r{r}"
        cli(["threshold", "--rho", "0.5", "--r", str(r), *FULL_MC, "--out", str(prefix)], capsys)
        res = json.loads(Path(f"{prefix}.json").read_text())["result"]
        _cache[r] = (res["alpha_c"], res["mc_stderr"])
    return _cache[r]


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    prefix = tmp_path_factory.mktemp("experiment") / "fig"
    code = main(["experiment", "--n", "100,200,400,800", "--rho", "0.5", "--r", "0.5",
                 "--trials", "500", "--points", "9", "--step", "0.02", "--seed", "2024",
                 "--workers", "1", "--out", str(prefix)])
    assert code == 0
    return json.loads(Path(f"{prefix}.json").read_text())


def test_criterion_1_uncorrelated_threshold(tmp_path_factory, capsys):
    a, se = threshold(0.0, tmp_path_factory, capsys)
    ok = abs(a - 0.8312) <= 0.006
    record("1 uncorrelated threshold", ok, f"alpha_c = {a:.5f} +- {se:.5f}, target 0.8312 +- 0.006")
    assert ok


def test_criterion_2_correlated_threshold(tmp_path_factory, capsys):
    a0, se0 = threshold(0.0, tmp_path_factory, capsys)
    a5, se5 = threshold(0.5, tmp_path_factory, capsys)
    sigma = math.hypot(se0, se5)
    diff = a5 - a0
    ok_value = abs(a5 - 0.8406) <= 0.006
    ok_diff = diff >= 2 * sigma
    record("2 correlated threshold", ok_value and ok_diff,
           f"alpha_c(r=0.5) = {a5:.5f} +- {se5:.5f} (target 0.8406 +- 0.006); "
           f"difference = {diff:.5f} = {diff / sigma:.1f} sigma (need >= 2)")
    assert ok_value and ok_diff


def test_criterion_3_small_r_flatness(tmp_path_factory, capsys):
    a0, se0 = threshold(0.0, tmp_path_factory, capsys)
    out = cli(["sweep", "--rho", "0.5", "--r-grid", "0.1,0.2,0.3", *FULL_MC,
               "--out", str(tmp_path_factory.mktemp("sweep") / "s")], capsys)
    rows = list(csv.DictReader(io.StringIO(out)))
    zs = []
    for row in rows:
        a, se = float(row["alpha_c"]), float(row["mc_stderr"])
        zs.append((float(row["r"]), a, (a - a0) / math.hypot(se, se0)))
    ok = len(zs) == 3 and all(abs(z) <= 2 for _, _, z in zs)
    record("3 small-r flatness", ok,
           "; ".join(f"r={r:g}: {a:.5f} ({z:+.2f} sigma)" for r, a, z in zs))
    assert ok


def test_criterion_4_empirical_extrapolation(experiment):
    fit = experiment["fits"][experiment["preferred_scaling"]]
    per_n = [(c["n"], c["alpha_c_n"]) for c in experiment["curves"]]
    in_range = 0.83 <= fit["alpha_c_inf"] <= 0.85
    decreasing = all(b < a for (_, a), (_, b) in zip(per_n, per_n[1:]))
    record("4 empirical extrapolation", in_range and decreasing,
           f"alpha_c_inf = {fit['alpha_c_inf']:.5f} +- {fit['alpha_c_inf_stderr']:.5f} "
           f"({experiment['preferred_scaling']}, in [0.83, 0.85]: {in_range}); per-N "
           + ", ".join(f"{n}: {a:.4f}" for n, a in per_n) + f" (decreasing: {decreasing})")
    assert in_range and decreasing


def test_criterion_5_replica_vs_empirical(experiment, tmp_path_factory, capsys):
    a5, _ = threshold(0.5, tmp_path_factory, capsys)
    fit = experiment["fits"][experiment["preferred_scaling"]]
    gap = abs(a5 - fit["alpha_c_inf"])
    ok = gap < 0.01
    record("5 replica vs empirical", ok,
           f"|{a5:.5f} - {fit['alpha_c_inf']:.5f}| = {gap:.5f} (need < 0.01)")
    assert ok


def test_invariant_finite_size_above_replica(experiment, tmp_path_factory, capsys):
    a5, _ = threshold(0.5, tmp_path_factory, capsys)
    per_n = [(c["n"], c["alpha_c_n"]) for c in experiment["curves"]]
    ok = all(a > a5 for _, a in per_n)
    record("invariant alpha_c_n above replica", ok,
           f"replica {a5:.5f}; " + ", ".join(f"{n}: {a:.4f}" for n, a in per_n))
    assert ok


def test_invariant_scaling_fit_quality(experiment):
    fits = {k: v for k, v in experiment["fits"].items() if isinstance(v, dict)}
    ok = all(v["chi2_dof"] < 3 for v in fits.values())
    record("invariant scaling chi2/dof < 3", ok,
           ", ".join(f"{k}: {v['chi2_dof']:.2f} (dof {v['dof']})" for k, v in fits.items()))
    assert ok


def test_criterion_6a_chain_vs_convex_oracle():
    try:
        test_chain.test_matches_convex_oracle_200_cases()
        ok = True
    except AssertionError:
        ok = False
    record("6a chain solver vs convex oracle", ok, "200 cases, N <= 8, objective to 1e-6")
    assert ok


def test_criterion_6b_basis_pursuit_vs_lp():
    try:
        test_recovery.test_admm_matches_lp_oracle_100_cases()
        ok = True
    except AssertionError:
        ok = False
    record("6b basis pursuit vs LP oracle", ok, "100 cases, N <= 100, objective to 1e-6 relative")
    assert ok


def test_criterion_6c_r0_threshold_vs_quadrature():
    mc = MCConfig(n_chain=20_000, n_samples=20, seed=1)
    rows = []
    for rho in (0.1, 0.3, 0.5, 0.7, 0.9):
        res = find_threshold(SignalPrior(rho), 0.0, mc)
        rows.append((rho, (res.alpha_c - scalar.alpha_c(rho)) / res.mc_stderr))
    ok = all(abs(z) < 3 for _, z in rows)
    record("6c r=0 threshold vs quadrature", ok,
           ", ".join(f"rho={rho:g}: {z:+.2f} se" for rho, z in rows))
    assert ok


def test_criterion_6d_factor_identities():
    worst_sq = worst_id = 0.0
    for r in np.concatenate([np.linspace(-0.5, 0.5, 201), [-0.5, 0.0, 0.5]]):
        lp, lm = tridiagonal_factors(float(r))
        worst_id = max(worst_id, abs(lp * lm - r), abs(lp**2 + lm**2 - 1))
        for n in (3, 4, 17):
            spec = CorrelationSpec.tridiagonal(n, float(r))
            s = spec.sqrt()
            worst_sq = max(worst_sq, np.max(np.abs(s.T @ s - spec.dense())))
    ok = worst_id <= 1e-14 and worst_sq <= 1e-12
    record("6d factor identities", ok,
           f"max |l+l- - r|, |l+^2 + l-^2 - 1| = {worst_id:.1e}; max |S^T S - Rt| = {worst_sq:.1e}")
    assert ok


def test_criterion_6e_rr_independence(tmp_path_factory, capsys):
    prefix = tmp_path_factory.mktemp("rr") / "rr"
    cli(["rr-check", "--n", "400", "--rho", "0.5", "--r", "0.5", "--alpha", "0.85",
         "--trials", "500", "--rr", "identity", "--rr", "tridiag:0.4", "--rr", "tridiag:-0.4",
         "--seed", "7", "--workers", "1", "--out", str(prefix)], capsys)
    rep = json.loads(Path(f"{prefix}.json").read_text())
    zmax = max(abs(z) for _, _, z in rep["z_scores"])
    ok = rep["supported"] and zmax <= 3
    record("6e Rr independence", ok,
           ", ".join(f"{lab}: {f:.3f}" for lab, f in zip(rep["labels"], rep["fractions"]))
           + f"; max |z| = {zmax:.2f}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
