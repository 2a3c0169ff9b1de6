"""Convex minimization on a cyclic one-dimensional chain.

Both the saddle-point and threshold equations need, per Monte Carlo sample,
the minimizer of

    (a/2) x^T Rt x - c^T x + sum_i psi_i(x_i)

with ``Rt`` the cyclic tridiagonal correlation (unit diagonal, ``r`` off the
diagonal). ``psi_i`` is ``|v|`` for ordinary coordinates and the linear
function ``s_i * v`` for coordinates pinned to a known sign ``s_i``.

The solver runs ascending cyclic coordinate sweeps, each coordinate update
being an exact scalar minimization (a soft threshold). Near ``|r| = 1/2`` the
quadratic form is (almost) singular and plain sweeps crawl, so between sweeps
a face step minimizes the quadratic on the current sign pattern (one
tridiagonal solve per free segment of the chain) and moves toward it as far
as the orthant allows. Both moves never increase the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .model import tridiagonal_factors

SADDLE = "saddle"
MAX_FACE_STEPS = 20
# sweeps before the objective-change stopping rule may be used at |r| = 1/2
FALLBACK_AFTER = 50
THRESHOLD = "threshold"


@numba.njit(cache=True)
def _objective(c, lin, a, r, x):
    n = x.shape[0]
    total = 0.0
    for i in range(n):
        xi = x[i]
        total += 0.5 * a * xi * xi + a * r * xi * x[(i + 1) % n] - c[i] * xi
        if lin[i] != 0.0:
            total += lin[i] * xi
        else:
            total += abs(xi)
    return total


@numba.njit(cache=True)
def _sweep(c, lin, a, r, x):
    """One ascending pass of exact coordinate minimizations.

    Returns the largest coordinate change and the objective decrease.
    """
    n = x.shape[0]
    dmax = 0.0
    decrease = 0.0
    for i in range(n):
        old = x[i]
        b = c[i] - a * r * (x[i - 1] + x[(i + 1) % n])
        if lin[i] != 0.0:
            new = (b - lin[i]) / a
            pen_old = lin[i] * old
            pen_new = lin[i] * new
        else:
            if b > 1.0:
                new = (b - 1.0) / a
            elif b < -1.0:
                new = (b + 1.0) / a
            else:
                new = 0.0
            pen_old = abs(old)
            pen_new = abs(new)
        x[i] = new
        d = abs(new - old)
        if d > dmax:
            dmax = d
        decrease += 0.5 * a * (old * old - new * new) - b * (old - new) + pen_old - pen_new
    return dmax, decrease


@numba.njit(cache=True)
def _run_objective(c, lin, a, r, x, start, k0, k1):
    n = x.shape[0]
    total = 0.0
    for t in range(k0, k1):
        i = (start + t) % n
        xi = x[i]
        total += 0.5 * a * xi * xi - c[i] * xi
        if t + 1 < k1:
            total += a * r * xi * x[(i + 1) % n]
        if lin[i] != 0.0:
            total += lin[i] * xi
        else:
            total += abs(xi)
    return total


@numba.njit(cache=True)
def _face_step(c, lin, a, r, x, target, work):
    """Move toward the minimizer of the quadratic on the current face.

    Coordinates with ``lin == 0`` and ``x == 0`` stay pinned at zero; every
    other coordinate keeps its sign (``lin`` or ``sign(x)``). Pinned zeros
    split the ring into independent runs of free coordinates; each run is a
    tridiagonal system (Thomas algorithm) and takes its own step, truncated
    where a ``|.|`` coordinate would change sign. A run whose objective would
    rise through rounding is left untouched.
    Returns the number of runs whose step was truncated (-1 if nothing is
    pinned, since the cyclic system may be singular).
    """
    n = x.shape[0]
    start = -1
    for i in range(n):
        if lin[i] == 0.0 and x[i] == 0.0:
            start = i
            break
    if start < 0:
        return -1
    ar = a * r
    truncated = 0
    k = 1
    while k < n:
        i = (start + k) % n
        if lin[i] == 0.0 and x[i] == 0.0:
            k += 1
            continue
        k_end = k
        while k_end < n:
            j = (start + k_end) % n
            if lin[j] == 0.0 and x[j] == 0.0:
                break
            k_end += 1
        # forward elimination; work holds the modified superdiagonal
        for t in range(k, k_end):
            j = (start + t) % n
            s = lin[j] if lin[j] != 0.0 else (1.0 if x[j] > 0.0 else -1.0)
            rhs = c[j] - s
            if t == k:
                work[j] = ar / a
                target[j] = rhs / a
            else:
                jp = (start + t - 1) % n
                denom = a - ar * work[jp]
                work[j] = ar / denom
                target[j] = (rhs - ar * target[jp]) / denom
        for t in range(k_end - 2, k - 1, -1):
            j = (start + t) % n
            target[j] -= work[j] * target[(start + t + 1) % n]
        step = 1.0
        for t in range(k, k_end):
            j = (start + t) % n
            if lin[j] == 0.0 and target[j] * x[j] <= 0.0:
                tj = x[j] / (x[j] - target[j])
                if tj < step:
                    step = tj
        if step < 1.0:
            truncated += 1
        before = _run_objective(c, lin, a, r, x, start, k, k_end)
        for t in range(k, k_end):
            j = (start + t) % n
            work[j] = x[j]
            if lin[j] == 0.0 and target[j] * x[j] <= 0.0 and x[j] / (x[j] - target[j]) <= step:
                x[j] = 0.0
            else:
                x[j] += step * (target[j] - x[j])
        if _run_objective(c, lin, a, r, x, start, k, k_end) > before:
            for t in range(k, k_end):
                j = (start + t) % n
                x[j] = work[j]
        k = k_end
    return truncated


@numba.njit(cache=True)
def _solve(c, lin, a, r, x, tol, max_sweeps, obj_tol, use_face):
    n = x.shape[0]
    target = np.empty(n)
    work = np.empty(n)
    obj = _objective(c, lin, a, r, x)
    singular = abs(r) >= 0.5
    for sweep in range(1, max_sweeps + 1):
        dmax, dec = _sweep(c, lin, a, r, x)
        obj -= dec
        if dmax < tol:
            return sweep, True
        if singular and sweep > FALLBACK_AFTER and dec <= obj_tol * max(1.0, abs(obj)):
            return sweep, True
        if use_face:
            for _ in range(MAX_FACE_STEPS):
                if _face_step(c, lin, a, r, x, target, work) <= 0:
                    break
    return max_sweeps, False


@numba.njit(cache=True)
def _solve_batch(C, LIN, a, r, X, tol, max_sweeps, obj_tol, use_face, sweeps, converged):
    for s in range(X.shape[0]):
        k, ok = _solve(C[s], LIN[s], a, r, X[s], tol, max_sweeps, obj_tol, use_face)
        sweeps[s] = k
        converged[s] = ok


def default_max_sweeps(n: int) -> int:
    return int(10 * np.sqrt(n)) + 500


def solve_batch(C, LIN, a, r, X, tol=1e-10, max_sweeps=None, obj_tol=1e-12):
    """Solve many chains in place (rows of ``X`` are warm starts).

    Returns ``(sweeps, converged)`` arrays, one entry per row.
    """
    X = np.asarray(X)
    if max_sweeps is None:
        max_sweeps = default_max_sweeps(X.shape[1])
    sweeps = np.zeros(X.shape[0], dtype=np.int64)
    converged = np.zeros(X.shape[0], dtype=np.bool_)
    _solve_batch(np.ascontiguousarray(C, dtype=float), np.ascontiguousarray(LIN, dtype=float),
                 float(a), float(r), X, float(tol), int(max_sweeps), float(obj_tol),
                 r != 0.0, sweeps, converged)
    return sweeps, converged


def ring_quadratic(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    """Per-row ``x^T Rt y / n`` for the cyclic tridiagonal ``Rt``."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    ry = y + r * (np.roll(y, 1, axis=-1) + np.roll(y, -1, axis=-1))
    return np.einsum("ij,ij->i", x, ry) / x.shape[-1]


def ring_sqrt(x: np.ndarray, r: float) -> np.ndarray:
    """Rows of ``sqrt(Rt) x``, i.e. ``l+ x_j + l- x_{j+1}``."""
    lp, lm = tridiagonal_factors(r)
    return lp * x + lm * np.roll(x, -1, axis=-1)


def ring_sqrt_t(x: np.ndarray, r: float) -> np.ndarray:
    """Rows of ``sqrt(Rt)^T x``, i.e. ``l+ x_j + l- x_{j-1}``."""
    lp, lm = tridiagonal_factors(r)
    return lp * x + lm * np.roll(x, 1, axis=-1)


@dataclass(frozen=True, eq=False)
class ChainProblem:
    """One chain minimization.

    In ``saddle`` mode the objective is
    ``(qhat/2) x^T Rt x - h^T sqrt(Rt) x + |x|_1`` with
    ``h = mhat sqrt(Rt) x0 + sqrt(chihat) z``. In ``threshold`` mode it is
    ``(1/2) x^T Rt x - g^T x + sum psi_i(x_i)`` with
    ``g = sqrt(chihat) sqrt(Rt)^T z`` and ``psi_i(v) = sign(x0_i) v`` on the
    support of ``x0`` and ``|v|`` elsewhere.
    """

    mode: str
    r: float
    z: np.ndarray
    x0: np.ndarray
    chihat: float
    qhat: float = 1.0
    mhat: float = 0.0

    def __post_init__(self):
        if self.mode not in (SADDLE, THRESHOLD):
            raise ValueError(f"unknown chain mode {self.mode!r}")
        tridiagonal_factors(self.r)
        if self.z.ndim != 1 or self.z.shape != self.x0.shape:
            raise ValueError("z and x0 must be 1-d arrays of equal length")
        if self.z.size < 3:
            raise ValueError("chain needs at least 3 sites")
        if not self.chihat >= 0.0:
            raise ValueError("chihat must be non-negative")
        if self.mode == SADDLE and not self.qhat > 0.0:
            raise ValueError("qhat must be positive")

    @property
    def n(self) -> int:
        return self.z.size

    @property
    def l_plus(self) -> float:
        return tridiagonal_factors(self.r)[0]

    @property
    def l_minus(self) -> float:
        return tridiagonal_factors(self.r)[1]

    @property
    def quad_scale(self) -> float:
        return self.qhat if self.mode == SADDLE else 1.0

    def linear_term(self) -> np.ndarray:
        c = np.sqrt(self.chihat) * ring_sqrt_t(self.z, self.r)
        if self.mode == SADDLE and self.mhat != 0.0:
            r = self.r
            c = c + self.mhat * (self.x0 + r * (np.roll(self.x0, 1) + np.roll(self.x0, -1)))
        return c

    def linear_penalty(self) -> np.ndarray:
        if self.mode == SADDLE:
            return np.zeros(self.n)
        return np.sign(self.x0)

    def objective(self, x: np.ndarray) -> float:
        return float(_objective(self.linear_term(), self.linear_penalty(),
                                self.quad_scale, self.r, np.asarray(x, dtype=float)))


@dataclass(frozen=True, eq=False)
class ChainSolution:
    x_star: np.ndarray
    objective: float
    sweeps: int
    converged: bool


def solve_chain(problem: ChainProblem, tol: float = 1e-10, max_sweeps: Optional[int] = None,
                x_init: Optional[np.ndarray] = None) -> ChainSolution:
    c = problem.linear_term()
    lin = problem.linear_penalty()
    x = np.zeros(problem.n) if x_init is None else np.array(x_init, dtype=float)
    if max_sweeps is None:
        max_sweeps = default_max_sweeps(problem.n)
    sweeps, ok = _solve(c, lin, problem.quad_scale, problem.r, x, float(tol),
                        int(max_sweeps), 1e-12, problem.r != 0.0)
    obj = float(_objective(c, lin, problem.quad_scale, problem.r, x)) / problem.n
    x.setflags(write=False)
    return ChainSolution(x, obj, int(sweeps), bool(ok))


def stationarity_violation(problem: ChainProblem, x: np.ndarray) -> float:
    """Largest violation of the per-coordinate optimality condition.

    For nonzero ``|.|`` coordinates and all sign-pinned coordinates the
    gradient must vanish; at ``x_i = 0`` the remaining terms must lie in
    ``[-1, 1]``.
    """
    a = problem.quad_scale
    r = problem.r
    grad = a * (x + r * (np.roll(x, 1) + np.roll(x, -1))) - problem.linear_term()
    lin = problem.linear_penalty()
    viol = np.where(lin != 0.0, np.abs(grad + lin),
                    np.where(x != 0.0, np.abs(grad + np.sign(x)),
                             np.maximum(np.abs(grad) - 1.0, 0.0)))
    return float(viol.max())


def _require(solution: ChainSolution):
    if not solution.converged:
        raise ValueError("chain solution did not converge")


def chain_order_params(solution: ChainSolution, problem: ChainProblem) -> tuple[float, float, float]:
    """Per-sample ``(q, m, chi)`` integrands of the saddle-point equations."""
    _require(solution)
    if problem.chihat <= 0.0:
        raise ValueError("chi contribution is undefined for chihat = 0")
    x = solution.x_star
    r = problem.r
    q = ring_quadratic(x, x, r)[0]
    m = ring_quadratic(x, problem.x0, r)[0]
    chi = float(problem.z @ ring_sqrt(x, r)) / (np.sqrt(problem.chihat) * problem.n)
    return float(q), float(m), chi


def threshold_contribs(solution: ChainSolution, problem: ChainProblem,
                       alpha: float) -> tuple[float, float]:
    """Per-sample ``(chihat, bracket)`` integrands of the threshold equations."""
    _require(solution)
    if problem.mode != THRESHOLD:
        raise ValueError("threshold_contribs needs a threshold-mode problem")
    if problem.chihat <= 0.0:
        raise ValueError("bracket contribution is undefined for chihat = 0")
    x = solution.x_star
    r = problem.r
    chihat_c = ring_quadratic(x, x, r)[0] / alpha
    bracket_c = float(problem.z @ ring_sqrt(x, r)) / (alpha * np.sqrt(problem.chihat) * problem.n)
    return float(chihat_c), bracket_c


def dump_triples(path, problem: ChainProblem, solution: ChainSolution) -> None:
    """Debug CSV of ``(z, x0, x_star)`` per site."""
    data = np.column_stack([problem.z, problem.x0, solution.x_star])
    np.savetxt(path, data, delimiter=",", header="z,x0,x_star", comments="", fmt="%.17g")
