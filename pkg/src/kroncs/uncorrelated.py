"""Uncorrelated (``r = 0``) reference by one-dimensional quadrature.

With ``Rt = I`` every chain decouples into scalar soft-threshold problems and
all Monte Carlo averages reduce to Gaussian integrals. Nothing here touches
the chain solver, so the module serves as an independent check of the
Monte Carlo machinery.

Threshold-mode quantities are written in terms of ``tau = 1/sqrt(chihat)``:
``alpha_of_tau`` is the compression rate at which ``chihat`` solves its own
equation and ``bracket_numerator`` is ``alpha`` times the bracket factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, stats

_phi = stats.norm.pdf


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def soft_second_moment(tau: float) -> float:
    """``E[soft(z, tau)^2]`` for standard normal ``z``."""
    return 2.0 * integrate.quad(lambda z: (z - tau) ** 2 * _phi(z), tau, np.inf,
                                epsabs=1e-13, epsrel=1e-12)[0]


def alpha_of_tau(tau: float, rho: float) -> float:
    # support sites: x_hat = sqrt(chihat) z - sign(x0), so E x_hat^2 / chihat = 1 + tau^2
    return rho * (1.0 + tau * tau) + (1.0 - rho) * soft_second_moment(tau)


def bracket_numerator(tau: float, rho: float) -> float:
    # E[z x_hat] / sqrt(chihat) is the probability that x_hat moves with z
    active = 2.0 * integrate.quad(_phi, tau, np.inf, epsabs=1e-14, epsrel=1e-12)[0]
    return rho + (1.0 - rho) * active


def critical_tau(rho: float) -> float:
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    res = optimize.minimize_scalar(lambda t: alpha_of_tau(t, rho), bounds=(1e-6, 10.0),
                                   method="bounded", options={"xatol": 1e-10})
    return float(res.x)


def alpha_c(rho: float) -> float:
    return alpha_of_tau(critical_tau(rho), rho)


def chihat_fixed_point(rho: float, alpha: float):
    """Stable fixed point of the chihat equation, or None below threshold."""
    t_c = critical_tau(rho)
    if alpha_of_tau(t_c, rho) > alpha:
        return None
    hi = t_c
    while alpha_of_tau(hi, rho) < alpha:
        hi *= 2.0
    tau = optimize.brentq(lambda t: alpha_of_tau(t, rho) - alpha, t_c, hi, xtol=1e-14)
    return 1.0 / tau ** 2


def bracket_factor(rho: float, alpha: float):
    chihat = chihat_fixed_point(rho, alpha)
    if chihat is None:
        return None
    return bracket_numerator(1.0 / np.sqrt(chihat), rho) / alpha


@dataclass
class ScalarSaddle:
    q: float
    m: float
    chi: float
    qhat: float
    mhat: float
    chihat: float
    success: bool
    iterations: int


def _soft_moments(sd: float) -> tuple[float, float]:
    """``E soft(h, 1)^2`` and ``E h soft(h, 1)`` for ``h ~ N(0, sd^2)``, in closed form."""
    if sd <= 0.0:
        return 0.0, 0.0
    a = 1.0 / sd
    tail = stats.norm.sf(a)
    return (2.0 * ((sd * sd + 1.0) * tail - sd * _phi(a)),
            2.0 * sd * sd * tail)


def saddle_moments(qhat: float, mhat: float, chihat: float, rho: float):
    """``(q, m, chi, d)`` with ``d = E (x - x0)^2`` for the scalar saddle problem.

    The minimizer is ``soft(h, 1) / qhat``. Off the support ``h = sqrt(chihat) z``;
    on it ``h = mhat x0 + sqrt(chihat) z`` is Gaussian, and ``x0`` and ``z``
    are recovered from ``h`` by linear regression.
    """
    s0 = np.sqrt(chihat)
    s1 = np.sqrt(mhat * mhat + chihat)
    q0, hx0 = _soft_moments(s0)
    q1, hx1 = _soft_moments(s1)
    q0, q1 = q0 / qhat ** 2, q1 / qhat ** 2
    c0 = hx0 / (qhat * s0 * s0) if s0 > 0 else 0.0
    c1 = hx1 / (qhat * s1 * s1) if s1 > 0 else 0.0
    q = (1 - rho) * q0 + rho * q1
    m = rho * mhat * c1
    chi = (1 - rho) * c0 + rho * c1
    return q, m, chi, q - 2 * m + rho


def solve_saddle(rho: float, alpha: float, damping: float = 0.5, tol: float = 1e-10,
                 max_iters: int = 5000, chi_floor: float = 1e-8) -> ScalarSaddle:
    q, m, chi = rho, rho / 2, 1.0
    d = q - 2 * m + rho
    for it in range(1, max_iters + 1):
        qhat = alpha / chi
        chihat = alpha * d / chi ** 2
        qn, mn, chin, dn = saddle_moments(qhat, qhat, chihat, rho)
        new = np.array([qn, mn, chin, dn])
        old = np.array([q, m, chi, d])
        q, m, chi, d = (1 - damping) * old + damping * new
        if chi < chi_floor:
            break
        if np.max(np.abs(new - old) / np.maximum(np.abs(old), 1e-300)) < tol:
            break
    qhat = alpha / chi
    return ScalarSaddle(float(q), float(m), float(chi), float(qhat), float(qhat),
                        float(alpha * d / chi ** 2),
                        bool(chi < chi_floor or abs(q - m) + abs(q - rho) < 1e-6), it)
