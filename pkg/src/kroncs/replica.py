"""Monte Carlo solution of the replica saddle-point and threshold equations.

Expectations over ``(z, x0)`` are replaced by averages over ``n_samples``
chains of length ``n_chain``. Sample ``k`` always draws from sub-stream ``k``
of the seed, and the same sample set is reused for every ``alpha`` and
``chihat`` value of one run (common random numbers), so the Monte Carlo
estimates are smooth deterministic functions of the parameters.

Threshold mode exploits a scaling property of the rescaled chain: ``x_hat``
depends on ``chihat`` but not on ``alpha``. For a trial ``chihat`` the
compression rate that makes it a fixed point of its own equation is

    alpha(chihat) = E[x_hat^T Rt x_hat] / (N chihat),

and the bracket factor at that rate is ``E[z^T sqrt(Rt) x_hat] /
(alpha sqrt(chihat) N)``. The reconstruction limit is the ``chihat`` where
the bracket factor crosses one; it coincides with the minimum of
``alpha(chihat)``. Larger ``alpha`` on the stable branch gives a bracket
factor below one.

Correlations between observations (``Rr``) do not enter any equation here.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from .chain import ring_quadratic, ring_sqrt, ring_sqrt_t, solve_batch
from .model import SignalPrior, draw_signal, tridiagonal_factors
from .rng import substream

logger = logging.getLogger(__name__)

CHI_FLOOR = 1e-8
CHIHAT_CAP = 1e8


class ReplicaError(RuntimeError):
    pass


class BracketingError(ReplicaError):
    """The threshold is not inside the requested alpha interval."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class MCConfig:
    n_chain: int = 100_000
    n_samples: int = 50
    seed: int = 0


@dataclass(frozen=True)
class IterConfig:
    damping: float = 0.5
    tol: float = 1e-6
    max_iters: int = 2000


@dataclass(frozen=True)
class BisectConfig:
    alpha_lo: float = 0.01
    alpha_hi: float = 0.999
    tol_alpha: float = 1e-4


class Ensemble:
    """Fixed Monte Carlo sample set ``(z, x0)`` with warm-start buffers."""

    def __init__(self, prior: SignalPrior, r: float, mc: MCConfig):
        tridiagonal_factors(r)
        if mc.n_chain < 3 or mc.n_samples < 2:
            raise ValueError("need n_chain >= 3 and n_samples >= 2")
        self.prior = prior
        self.r = float(r)
        self.mc = mc
        shape = (mc.n_samples, mc.n_chain)
        self.z = np.empty(shape)
        self.x0 = np.empty(shape)
        for k in range(mc.n_samples):
            rng = substream(mc.seed, k)
            self.z[k] = rng.standard_normal(mc.n_chain)
            self.x0[k] = draw_signal(prior, mc.n_chain, rng)
        self.sign0 = np.sign(self.x0)
        self.noise = ring_sqrt_t(self.z, self.r)
        self.signal = self.x0 + self.r * (np.roll(self.x0, 1, axis=1) + np.roll(self.x0, -1, axis=1))
        self.u = ring_quadratic(self.x0, self.x0, self.r)
        self._xhat = np.zeros(shape)
        self._xhat_chihat = None
        self._x = np.zeros(shape)

    def _check(self, converged):
        if not converged.all():
            raise ReplicaError(f"{(~converged).sum()} of {converged.size} chains did not converge")

    def threshold_samples(self, chihat: float):
        """Per-sample ``x_hat^T Rt x_hat / N`` and ``z^T sqrt(Rt) x_hat / (sqrt(chihat) N)``."""
        if chihat < 0:
            raise ValueError("chihat must be non-negative")
        if self._xhat_chihat and chihat > 0:
            # x_hat grows roughly like sqrt(chihat)
            self._xhat *= math.sqrt(chihat / self._xhat_chihat)
        c = math.sqrt(chihat) * self.noise
        _, ok = solve_batch(c, self.sign0, 1.0, self.r, self._xhat)
        self._check(ok)
        self._xhat_chihat = chihat
        a = ring_quadratic(self._xhat, self._xhat, self.r)
        if chihat > 0:
            b = np.einsum("ij,ij->i", self.z, ring_sqrt(self._xhat, self.r)) / (
                math.sqrt(chihat) * self.mc.n_chain)
        else:
            b = np.full(self.mc.n_samples, np.nan)
        return a, b

    def saddle_samples(self, qhat: float, mhat: float, chihat: float):
        """Per-sample ``(q, m, chi, d)`` with ``d = (x - x0)^T Rt (x - x0) / N``."""
        c = mhat * self.signal + math.sqrt(chihat) * self.noise
        _, ok = solve_batch(c, np.zeros_like(c), qhat, self.r, self._x)
        self._check(ok)
        x = self._x
        q = ring_quadratic(x, x, self.r)
        m = ring_quadratic(x, self.x0, self.r)
        diff = x - self.x0
        d = ring_quadratic(diff, diff, self.r)
        if chihat > 0:
            # z is independent of x0, so correlating z with x - x0 instead of x
            # leaves the mean unchanged and removes the x0 noise floor
            chi = np.einsum("ij,ij->i", self.z, ring_sqrt(diff, self.r)) / (
                math.sqrt(chihat) * self.mc.n_chain)
        else:
            chi = np.full(self.mc.n_samples, np.nan)
        return q, m, chi, d


def _stderr(v) -> float:
    return float(np.std(v, ddof=1) / math.sqrt(len(v)))


@dataclass
class SaddleState:
    q: float
    m: float
    chi: float
    qhat: float
    mhat: float
    chihat: float
    success: bool = False
    converged: bool = False
    iterations: int = 0
    residual: float = float("nan")
    q_stderr: float = float("nan")


def solve_saddle(prior: SignalPrior, r: float, alpha: float, mc: MCConfig = MCConfig(),
                 it: IterConfig = IterConfig(), chi_init: float = 1.0,
                 ensemble: Optional[Ensemble] = None) -> SaddleState:
    """Damped fixed-point iteration of the six saddle-point equations.

    ``chi`` dropping below ``CHI_FLOOR`` is the successful-reconstruction
    branch and is reported as success, not as a failure to converge.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if not chi_init > 0:
        raise ValueError("chi must start positive")
    rho = prior.rho
    if rho == 0.0:
        return SaddleState(0.0, 0.0, 0.0, math.inf, math.inf, 0.0, True, True, 0, 0.0, 0.0)
    ens = ensemble or Ensemble(prior, r, mc)
    lam = it.damping
    q, m, chi = rho, rho / 2, chi_init
    d = q - 2 * m + rho
    residual = math.inf
    q_se = float("nan")
    converged = False
    k = 0
    for k in range(1, it.max_iters + 1):
        qhat = alpha / chi
        chihat = alpha * d / chi ** 2
        qs, ms, chis, ds = ens.saddle_samples(qhat, qhat, chihat)
        q_se = _stderr(qs)
        new = np.array([qs.mean(), ms.mean(), chis.mean(), ds.mean()])
        old = np.array([q, m, chi, d])
        q, m, chi, d = (1 - lam) * old + lam * new
        residual = float(np.max(np.abs(new[:3] - old[:3]) / np.maximum(np.abs(old[:3]), 1e-300)))
        if chi < CHI_FLOOR or residual < it.tol:
            converged = True
            break
    qhat = alpha / chi
    success = chi < CHI_FLOOR or (abs(q - m) < 3 * q_se and abs(q - rho) < 3 * q_se)
    if not converged:
        logger.warning("saddle iteration stopped after %d iterations (residual %.3g)", k, residual)
    return SaddleState(float(q), float(m), float(chi), float(qhat), float(qhat),
                       float(alpha * d / chi ** 2), bool(success), converged, k, residual, q_se)


@dataclass
class BracketFactor:
    mean: float
    stderr: float
    chihat: float
    converged: bool
    iterations: int


def bracket_factor(prior: SignalPrior, r: float, alpha: float, mc: MCConfig = MCConfig(),
                   it: IterConfig = IterConfig(), ensemble: Optional[Ensemble] = None) -> BracketFactor:
    """Bracket factor at the self-consistent ``chihat`` for a given ``alpha``.

    The chihat map is increasing, so iterating from ``chihat = 0`` climbs
    monotonically to the smallest (stable) fixed point. Below the threshold
    there is none and chihat grows without bound; the iteration then stops
    at ``CHIHAT_CAP`` with ``converged=False`` and a bracket factor above one.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    ens = ensemble or Ensemble(prior, r, mc)
    lam = it.damping
    chihat = 0.0
    converged = False
    k = 0
    for k in range(1, it.max_iters + 1):
        a, _ = ens.threshold_samples(chihat)
        new = a.mean() / alpha
        nxt = (1 - lam) * chihat + lam * new
        change = abs(nxt - chihat) / max(nxt, 1e-300)
        chihat = nxt
        if change < it.tol:
            converged = True
            break
        if chihat > CHIHAT_CAP:
            break
    a, b = ens.threshold_samples(chihat)
    mean = float(b.mean() / alpha)
    if not converged:
        return BracketFactor(mean, _stderr(b) / alpha, float(chihat), False, k)
    # chihat is itself estimated from the samples; propagate its fluctuation
    # through the fixed-point equation with a finite-difference slope
    h = 1e-4 * chihat
    a2, b2 = ens.threshold_samples(chihat + h)
    ens.threshold_samples(chihat)
    slope_a = (a2.mean() - a.mean()) / (h * alpha)
    slope_b = (b2.mean() - b.mean()) / (h * alpha)
    dchihat = (a - a.mean()) / alpha / (1.0 - slope_a)
    influence = (b - b.mean()) / alpha + slope_b * dchihat
    return BracketFactor(mean, _stderr(influence), float(chihat), True, k)


@dataclass
class ThresholdResult:
    rho: float
    r: float
    alpha_c: float
    mc_stderr: float
    chihat_at_threshold: float
    bracket_trace: list = field(default_factory=list)
    samples_used: int = 0
    n_used: int = 0
    seed: int = 0
    width: float = 0.0
    conclusive: bool = True
    monotone: bool = True

    def to_dict(self):
        return asdict(self)


def _trace_point(ens: Ensemble, chihat: float):
    a, b = ens.threshold_samples(chihat)
    alpha = a.mean() / chihat
    bracket = b.mean() / alpha
    # delta method for the ratio mean(b) * chihat / mean(a)
    lin = (b - bracket * a / chihat) / alpha
    return alpha, bracket, _stderr(lin), a


def find_threshold(prior: SignalPrior, r: float, mc: MCConfig = MCConfig(),
                   bisect: BisectConfig = BisectConfig(),
                   ensemble: Optional[Ensemble] = None) -> ThresholdResult:
    """Locate the reconstruction limit ``alpha_c`` for ``(rho, r)``.

    The search runs over ``log(chihat)``: the crossing of the bracket factor
    through one is bracketed by geometric expansion from ``chihat = 1`` and
    then refined by Brent's method (bisection safeguarded by secant and
    inverse-quadratic steps). ``alpha_c`` is ``alpha(chihat)`` at the
    crossing. Since ``alpha(chihat)`` is stationary there, the reported
    uncertainty is dominated by the Monte Carlo standard error; the
    remaining bisection width is added in quadrature.
    """
    rho = prior.rho
    if not 0.0 < rho < 1.0:
        raise ValueError("find_threshold needs 0 < rho < 1")
    ens = ensemble or Ensemble(prior, r, mc)
    trace = []
    memo = {}

    def g(log_chihat):
        if log_chihat in memo:
            return memo[log_chihat]
        ch = math.exp(log_chihat)
        alpha, bracket, se, _ = _trace_point(ens, ch)
        trace.append((float(alpha), float(bracket), float(se), float(ch)))
        logger.debug("chihat=%.6g alpha=%.6f bracket=%.6f", ch, alpha, bracket)
        memo[log_chihat] = bracket - 1.0
        return bracket - 1.0

    lo = hi = 0.0
    g0 = g(0.0)
    step = math.log(4.0)
    if g0 < 0:
        while True:
            hi = lo + step
            if g(hi) > 0:
                break
            lo = hi
            if hi > math.log(CHIHAT_CAP):
                raise BracketingError("bracket factor never exceeded one", trace)
    else:
        while True:
            lo = hi - step
            if g(lo) < 0:
                break
            hi = lo
            if lo < -math.log(CHIHAT_CAP):
                raise BracketingError("bracket factor never dropped below one", trace)
    root = optimize.brentq(g, lo, hi, xtol=1e-6, rtol=1e-10)
    chihat_c = math.exp(root)
    alpha_c, bracket, se, a = _trace_point(ens, chihat_c)
    if root not in memo:
        trace.append((float(alpha_c), float(bracket), float(se), chihat_c))
    mc_se = _stderr(a / chihat_c)
    # nearest evaluated points on either side of the crossing
    below = [t for t in trace if t[3] < chihat_c and t[1] < 1.0]
    above = [t for t in trace if t[3] > chihat_c and t[1] > 1.0]
    width = 0.0
    if below and above:
        lo_pt = max(below, key=lambda t: t[3])
        hi_pt = min(above, key=lambda t: t[3])
        width = 0.5 * abs(hi_pt[0] - lo_pt[0])
    # the bracket factor returns toward one far above the crossing, so
    # monotonicity is only checked on the bracketing region
    ordered = sorted((t for t in trace if t[2] > 0 and chihat_c / 16 <= t[3] <= 4 * chihat_c),
                     key=lambda t: t[3])
    monotone = all(b2[1] >= b1[1] - 2 * max(b1[2], b2[2])
                   for b1, b2 in zip(ordered, ordered[1:]))
    result = ThresholdResult(rho=rho, r=float(r), alpha_c=float(alpha_c),
                             mc_stderr=float(math.hypot(mc_se, width)),
                             chihat_at_threshold=chihat_c, bracket_trace=trace,
                             samples_used=mc.n_samples, n_used=mc.n_chain, seed=mc.seed,
                             width=width, conclusive=width < bisect.tol_alpha,
                             monotone=monotone)
    if not bisect.alpha_lo < alpha_c < bisect.alpha_hi:
        raise BracketingError(
            f"alpha_c={alpha_c:.6f} outside [{bisect.alpha_lo}, {bisect.alpha_hi}]", trace)
    return result


def threshold_curve(rhos, r: float, mc: MCConfig = MCConfig(),
                    bisect: BisectConfig = BisectConfig()):
    """``[(rho, ThresholdResult or error message)]`` with one independent search per rho."""
    out = []
    for rho in rhos:
        try:
            res = find_threshold(SignalPrior(rho), r, mc, bisect)
        except (ValueError, ReplicaError) as exc:
            logger.warning("rho=%s failed: %s", rho, exc)
            res = str(exc)
        out.append((rho, res))
    return out
