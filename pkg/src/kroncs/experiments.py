"""Empirical phase-transition study for basis pursuit.

Each trial is fully determined by ``(seed, n, alpha, trial, stream)``: the
instance seed is hashed from those keys, so refining the alpha grid or
changing the worker count never changes the outcome of an existing trial.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from .model import CorrelationSpec, SignalPrior, make_instance, n_observations
from .recovery import BPParams, basis_pursuit

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
# curves with more excluded (unconverged) trials than this are flagged
EXCLUDED_FLAG_FRACTION = 0.01
SCALING_VARIABLES = ("inv_sqrt_n", "inv_n")


def trial_seed(seed: int, n: int, alpha: float, trial: int, stream: int = 0) -> int:
    """Instance seed for one trial; alpha enters rounded to 1e-9."""
    ss = np.random.SeedSequence([seed, stream, n, int(round(alpha * 1e9)), trial])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class TrialTask:
    n: int
    rho: float
    rt: CorrelationSpec
    rr: CorrelationSpec
    alpha: float
    seed: int
    params: BPParams


def run_trial(task: TrialTask) -> tuple[bool, bool, int]:
    """``(success, converged, iterations)`` for one random instance."""
    inst = make_instance(SignalPrior(task.rho), task.n, task.alpha, task.rt, task.rr, task.seed)
    res = basis_pursuit(inst, task.params)
    return res.success, res.converged, res.iters


def _run_tasks(tasks: list[TrialTask], workers: int) -> list[tuple[bool, bool, int]]:
    if workers <= 1 or len(tasks) < 2:
        return [run_trial(t) for t in tasks]
    chunk = max(1, len(tasks) // (8 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_trial, tasks, chunksize=chunk))


def _check_grid(alpha_grid: Sequence[float]) -> np.ndarray:
    grid = np.asarray(alpha_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("alpha grid is empty")
    if np.any(grid <= 0) or np.any(grid >= 1):
        raise ValueError("alpha grid must lie inside (0, 1)")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("alpha grid must be strictly increasing")
    return grid


def _check_rr(rr: CorrelationSpec, n: int, grid: np.ndarray) -> None:
    for a in grid:
        p = n_observations(n, float(a))
        if rr.kind == "custom" and rr.n != p:
            raise ValueError(f"custom Rr has size {rr.n} but alpha={a} needs {p}")


@dataclass
class TransitionPoint:
    alpha: float
    trials: int
    successes: int
    excluded: int = 0

    @property
    def fraction(self) -> float:
        return self.successes / self.trials if self.trials else float("nan")


@dataclass
class LogisticFit:
    alpha50: float
    alpha50_stderr: float
    slope: float
    separated: bool


def fit_logistic(alphas, trials, successes) -> LogisticFit:
    """Maximum-likelihood fit of ``P(success) = expit(slope * (alpha - alpha50))``.

    Perfectly separated data has no finite maximum; the 50% point is then
    put midway between the last all-failure and first all-success alpha
    with half that gap as its error.
    """
    a = np.asarray(alphas, dtype=float)
    t = np.asarray(trials, dtype=float)
    s = np.asarray(successes, dtype=float)
    keep = t > 0
    a, t, s = a[keep], t[keep], s[keep]
    if a.size < 2:
        raise ValueError("need at least two alpha values with trials to fit a transition")
    frac = s / t
    if np.all(frac == frac[0]) and frac[0] in (0.0, 1.0):
        raise ValueError("no transition inside the alpha grid (all trials fail or all succeed)")
    center = float(np.average(a, weights=t))
    x = a - center

    def nll(beta):
        eta = beta[0] + beta[1] * x
        # -log-likelihood of the binomial model, written stably
        val = np.sum(t * np.logaddexp(0.0, eta) - s * eta)
        p = special.expit(eta)
        grad = np.array([np.sum(t * p - s), np.sum((t * p - s) * x)])
        return val, grad

    mixed = (frac > 0) & (frac < 1)
    if not np.any(mixed):
        fails = a[frac == 0.0]
        wins = a[frac == 1.0]
        lo, hi = fails.max(), wins.min()
        if lo < hi:
            return LogisticFit(float(0.5 * (lo + hi)), float(0.5 * (hi - lo)), math.inf, True)
    res = optimize.minimize(nll, np.array([0.0, 1.0 / max(np.ptp(a), 1e-6)]),
                            jac=True, method="BFGS", options={"gtol": 1e-10})
    b0, b1 = res.x
    if b1 <= 0:
        raise ValueError("fitted success probability decreases with alpha")
    eta = b0 + b1 * x
    w = t * special.expit(eta) * special.expit(-eta)
    info = np.array([[w.sum(), (w * x).sum()], [(w * x).sum(), (w * x * x).sum()]])
    cov = np.linalg.inv(info)
    alpha50 = center - b0 / b1
    grad = np.array([-1.0 / b1, b0 / b1 ** 2])
    se = float(np.sqrt(grad @ cov @ grad))
    return LogisticFit(float(alpha50), se, float(b1), False)


@dataclass
class TransitionCurve:
    n: int
    rho: float
    r: float
    rr: str
    seed: int
    points: list[TransitionPoint]
    alpha_c_n: float = float("nan")
    alpha_c_n_stderr: float = float("nan")
    slope: float = float("nan")
    flagged: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def excluded(self) -> int:
        return sum(p.excluded for p in self.points)

    @property
    def attempted(self) -> int:
        return sum(p.trials + p.excluded for p in self.points)

    def is_monotone(self, k: float = 2.0) -> bool:
        """Success fraction non-decreasing in alpha within ``k`` binomial stderr."""
        pts = [p for p in self.points if p.trials]
        for p1, p2 in zip(pts, pts[1:]):
            se = math.sqrt(_binom_var(p1) + _binom_var(p2))
            if p2.fraction < p1.fraction - k * max(se, 1e-12):
                return False
        return True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["excluded"] = self.excluded
        return d


def _binom_var(p: TransitionPoint) -> float:
    # floor the variance with a half-count so all-or-nothing points keep a width
    f = min(max(p.fraction, 0.5 / p.trials), 1 - 0.5 / p.trials)
    return f * (1 - f) / p.trials


def run_transition(n: int, rho: float, r: float, rr_spec: CorrelationSpec,
                   alpha_grid: Sequence[float], trials_per_alpha: int, seed: int,
                   params: BPParams = BPParams(certify=True), workers: int = 1,
                   stream: int = 0, rt_spec: Optional[CorrelationSpec] = None) -> TransitionCurve:
    """Success counts over ``alpha_grid`` and the logistic 50% point.

    ``rt_spec`` overrides the tridiagonal ``Rt(r)`` when a custom column
    correlation is wanted. Unconverged runs are excluded from the counts.
    """
    grid = _check_grid(alpha_grid)
    if trials_per_alpha < 1:
        raise ValueError("trials_per_alpha must be at least 1")
    rt = rt_spec if rt_spec is not None else CorrelationSpec.tridiagonal(n, r)
    if rt.n != n:
        rt = rt.with_size(n)
    _check_rr(rr_spec, n, grid)
    tasks = [TrialTask(n, rho, rt, rr_spec, float(a),
                       trial_seed(seed, n, float(a), k, stream), params)
             for a in grid for k in range(trials_per_alpha)]
    outcomes = _run_tasks(tasks, workers)
    points = []
    for j, a in enumerate(grid):
        chunk = outcomes[j * trials_per_alpha:(j + 1) * trials_per_alpha]
        conv = [o for o in chunk if o[1]]
        points.append(TransitionPoint(float(a), len(conv), sum(o[0] for o in conv),
                                      len(chunk) - len(conv)))
        logger.info("n=%d alpha=%.4f successes=%d/%d excluded=%d", n, a,
                    points[-1].successes, points[-1].trials, points[-1].excluded)
    curve = TransitionCurve(n, float(rho), float(r), rr_spec.describe(), int(seed), points)
    if curve.excluded > EXCLUDED_FLAG_FRACTION * curve.attempted:
        curve.flagged = True
        curve.notes.append(f"{curve.excluded} of {curve.attempted} runs unconverged")
    try:
        fit = fit_logistic([p.alpha for p in points], [p.trials for p in points],
                           [p.successes for p in points])
    except ValueError as exc:
        curve.flagged = True
        curve.notes.append(f"logistic fit failed: {exc}")
        return curve
    curve.alpha_c_n, curve.alpha_c_n_stderr, curve.slope = (
        fit.alpha50, fit.alpha50_stderr, fit.slope)
    if fit.separated:
        curve.notes.append("perfectly separated data; 50% point from grid spacing")
    if not grid[0] <= fit.alpha50 <= grid[-1]:
        curve.flagged = True
        curve.notes.append("50% point outside the sampled alpha range")
    if not curve.is_monotone():
        curve.flagged = True
        curve.notes.append("success fraction not monotone within 2 stderr")
    return curve


@dataclass
class ScalingFit:
    curve: list[tuple[int, float, float]]
    coefficients: list[float]
    alpha_c_inf: float
    alpha_c_inf_stderr: float
    scaling_variable: str
    chi2_dof: float
    dof: int

    def to_dict(self) -> dict:
        return asdict(self)


def scaling_x(n, variable: str) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    if variable == "inv_sqrt_n":
        return 1.0 / np.sqrt(n)
    if variable == "inv_n":
        return 1.0 / n
    raise ValueError(f"unknown scaling variable {variable!r}; use one of {SCALING_VARIABLES}")


def fit_scaling(curves: Sequence, variable: str = "inv_sqrt_n", max_cond: float = 1e10) -> ScalingFit:
    """Weighted quadratic fit of ``alpha_c_n`` in the scaling variable.

    ``curves`` holds ``TransitionCurve`` objects or ``(n, alpha_c_n, stderr)``
    triples. The intercept is the ``N -> inf`` extrapolation; its error comes
    from the fit covariance with the per-point errors taken as absolute.
    """
    rows = []
    for c in curves:
        if isinstance(c, TransitionCurve):
            rows.append((c.n, c.alpha_c_n, c.alpha_c_n_stderr))
        else:
            rows.append(tuple(c))
    rows = [(int(n), float(a), float(s)) for n, a, s in rows]
    if len({n for n, _, _ in rows}) < 4:
        raise ValueError("fit_scaling needs at least 4 distinct N values")
    ns, ys, ses = map(np.asarray, zip(*rows))
    if not np.all(np.isfinite(ys)) or not np.all(np.isfinite(ses)) or np.any(ses <= 0):
        raise ValueError("every point needs a finite alpha_c_n and a positive stderr")
    x = scaling_x(ns, variable)
    design = np.vander(x, 3, increasing=True) / ses[:, None]
    if np.linalg.cond(design) > max_cond:
        raise np.linalg.LinAlgError("ill-conditioned scaling design matrix")
    # polyfit weights multiply residuals, so 1/stderr gives chi-square weighting
    coef, cov = np.polyfit(x, ys, 2, w=1.0 / ses, cov="unscaled")
    coef = coef[::-1]
    cov = cov[::-1, ::-1]
    resid = (ys - np.polyval(coef[::-1], x)) / ses
    dof = len(rows) - 3
    chi2 = float(resid @ resid)
    return ScalingFit(curve=[(int(n), float(a), float(s)) for n, a, s in rows],
                      coefficients=[float(c) for c in coef], alpha_c_inf=float(coef[0]),
                      alpha_c_inf_stderr=float(math.sqrt(cov[0, 0])),
                      scaling_variable=variable,
                      chi2_dof=chi2 / dof if dof > 0 else float("nan"), dof=dof)


def default_alpha_grid(n: int, center: float, points: int = 9, step_at_200: float = 0.02) -> np.ndarray:
    """``points`` alphas around ``center`` with spacing shrinking like ``N^-1/2``."""
    step = step_at_200 * math.sqrt(200.0 / n)
    half = (points - 1) / 2
    grid = center + step * (np.arange(points) - half)
    return np.round(grid, 6)


@dataclass
class ExperimentResult:
    config: dict
    curves: list[TransitionCurve]
    fits: dict
    preferred: Optional[str]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "config": self.config,
                "curves": [c.to_dict() for c in self.curves],
                "fits": {k: (v.to_dict() if isinstance(v, ScalingFit) else v)
                         for k, v in self.fits.items()},
                "preferred_scaling": self.preferred}


def run_experiment(ns: Sequence[int], rho: float, r: float, rr_spec: CorrelationSpec,
                   center: float, trials: int, seed: int, points: int = 9,
                   step_at_200: float = 0.02, workers: int = 1,
                   params: BPParams = BPParams(certify=True),
                   grids: Optional[dict] = None) -> ExperimentResult:
    """Transition curves for every ``n`` plus both finite-size fits."""
    if not ns:
        raise ValueError("the N list is empty")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    curves = []
    used_grids = {}
    for n in ns:
        grid = grids[n] if grids and n in grids else default_alpha_grid(n, center, points, step_at_200)
        used_grids[int(n)] = [float(a) for a in grid]
        curves.append(run_transition(int(n), rho, r, rr_spec, grid, trials, seed,
                                     params=params, workers=workers))
    fits = {}
    for var in SCALING_VARIABLES:
        try:
            fits[var] = fit_scaling([c for c in curves if np.isfinite(c.alpha_c_n)], var)
        except (ValueError, np.linalg.LinAlgError) as exc:
            fits[var] = str(exc)
    good = {k: v for k, v in fits.items() if isinstance(v, ScalingFit)}
    preferred = min(good, key=lambda k: good[k].chi2_dof) if good else None
    config = {"ns": [int(n) for n in ns], "rho": rho, "r": r, "rr": rr_spec.describe(),
              "center": center, "trials": trials, "seed": seed, "points": points,
              "step_at_200": step_at_200, "grids": used_grids, "solver": asdict(params)}
    return ExperimentResult(config, curves, fits, preferred)


@dataclass
class RrComparison:
    alpha: float
    labels: list[str]
    trials: list[int]
    successes: list[int]
    excluded: list[int]
    z_scores: list[tuple[int, int, float]]
    supported: bool

    @property
    def fractions(self) -> list[float]:
        return [s / t if t else float("nan") for s, t in zip(self.successes, self.trials)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = self.fractions
        d["schema_version"] = SCHEMA_VERSION
        return d


def two_proportion_z(s1: int, t1: int, s2: int, t2: int) -> float:
    pooled = (s1 + s2) / (t1 + t2)
    var = pooled * (1 - pooled) * (1 / t1 + 1 / t2)
    if var == 0:
        return 0.0
    return (s1 / t1 - s2 / t2) / math.sqrt(var)


def rr_independence_check(n: int, rho: float, r_t: float, rr_specs: Sequence[CorrelationSpec],
                          alpha: float, trials: int, seed: int, workers: int = 1,
                          params: BPParams = BPParams(certify=True), k_sigma: float = 3.0) -> RrComparison:
    """Success fractions at one ``alpha`` for several ``Rr``, compared pairwise.

    Each ``Rr`` gets its own independent instance stream, so the pairwise
    two-proportion z-test applies directly.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if len(rr_specs) < 2:
        raise ValueError("need at least two Rr specs to compare")
    grid = _check_grid([alpha])
    labels, tr, su, ex = [], [], [], []
    for i, rr in enumerate(rr_specs):
        _check_rr(rr, n, grid)
        rt = CorrelationSpec.tridiagonal(n, r_t)
        tasks = [TrialTask(n, rho, rt, rr, float(alpha), trial_seed(seed, n, float(alpha), k, i + 1), params)
                 for k in range(trials)]
        out = _run_tasks(tasks, workers)
        conv = [o for o in out if o[1]]
        labels.append(f"{i}:{rr.describe()}")
        tr.append(len(conv))
        su.append(sum(o[0] for o in conv))
        ex.append(len(out) - len(conv))
    zs = []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            if tr[i] and tr[j]:
                zs.append((i, j, two_proportion_z(su[i], tr[i], su[j], tr[j])))
    supported = all(abs(z) < k_sigma for _, _, z in zs) and len(zs) > 0
    return RrComparison(float(alpha), labels, tr, su, ex, zs, supported)


def write_curves_csv(curves: Sequence[TransitionCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "n", "rho", "r", "rr", "seed", "alpha", "trials",
                    "successes", "excluded"])
        for c in curves:
            for p in c.points:
                w.writerow([SCHEMA_VERSION, c.n, repr(c.rho), repr(c.r), c.rr, c.seed,
                            repr(p.alpha), p.trials, p.successes, p.excluded])


def write_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
