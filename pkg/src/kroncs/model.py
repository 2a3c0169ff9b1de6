"""Signal prior, correlation structures and Kronecker compression matrices.

A compression matrix has the form ``F = sqrt(Rr) @ Xi @ sqrt(Rt)`` where
``Xi`` is a ``P x N`` matrix of i.i.d. ``N(0, 1/N)`` entries, ``Rt`` correlates
the columns (expansion bases) and ``Rr`` correlates the rows (observations).
Square roots follow the convention ``R = sqrt(R).T @ sqrt(R)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .rng import substream

# Above this column count matrices are applied factor-wise instead of
# being materialized.
DENSE_LIMIT = 4096

# Stream tags for the two independent draws of one instance.
_MATRIX_STREAM = 0
_SIGNAL_STREAM = 1


class CorrelationInfeasibleError(ValueError):
    """Correlation parameters that do not define a PSD matrix."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SignalPrior:
    """Bernoulli-Gaussian prior: zero w.p. ``1 - rho``, else standard normal."""

    rho: float

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0) or not np.isfinite(self.rho):
            raise ValueError(f"rho must lie in [0, 1], got {self.rho!r}")


def draw_signal(prior: SignalPrior, n: int, rng: np.random.Generator) -> np.ndarray:
    # Both arrays are always drawn so the stream layout does not depend on rho.
    mask = rng.random(n) < prior.rho
    values = rng.standard_normal(n)
    return np.where(mask, values, 0.0)


def sample_signal(prior: SignalPrior, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return draw_signal(prior, n, substream(seed, _SIGNAL_STREAM))


def tridiagonal_factors(r: float) -> tuple[float, float]:
    """Return ``(l_plus, l_minus)`` for the cyclic tridiagonal correlation."""
    if not np.isfinite(r) or abs(r) > 0.5:
        raise CorrelationInfeasibleError(
            f"tridiagonal correlation needs |r| <= 1/2, got r={r!r}")
    a = np.sqrt(1.0 + 2.0 * r)
    b = np.sqrt(1.0 - 2.0 * r)
    return 0.5 * (a + b), 0.5 * (a - b)


@dataclass(frozen=True, eq=False)
class CorrelationSpec:
    """Correlation matrix description of size ``n``.

    ``kind`` is one of ``"identity"``, ``"tridiagonal"`` or ``"custom"``.
    Use the ``identity``/``tridiagonal``/``custom`` constructors rather than
    building instances directly.
    """

    kind: str
    n: int
    r: float = 0.0
    matrix: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("identity", "tridiagonal", "custom"):
            raise ValueError(f"unknown correlation kind {self.kind!r}")
        if self.n < 1:
            raise DimensionError("correlation dimension must be >= 1")
        if self.kind == "tridiagonal":
            tridiagonal_factors(self.r)
            if self.n < 3 and self.r != 0.0:
                raise DimensionError("cyclic tridiagonal correlation needs n >= 3")
        if self.kind == "custom":
            m = self.matrix
            if m is None or m.shape != (self.n, self.n):
                raise DimensionError("custom correlation matrix must be n x n")

    @classmethod
    def identity(cls, n: int) -> "CorrelationSpec":
        return cls("identity", int(n))

    @classmethod
    def tridiagonal(cls, n: int, r: float) -> "CorrelationSpec":
        return cls("tridiagonal", int(n), float(r))

    @classmethod
    def custom(cls, matrix, atol: float = 1e-10) -> "CorrelationSpec":
        m = np.array(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError("custom correlation matrix must be square")
        if not np.allclose(m, m.T, atol=atol, rtol=0.0):
            raise CorrelationInfeasibleError("custom correlation matrix is not symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=atol, rtol=0.0):
            raise CorrelationInfeasibleError("custom correlation matrix needs unit diagonal")
        m = 0.5 * (m + m.T)
        if np.linalg.eigvalsh(m)[0] < -atol * m.shape[0]:
            raise CorrelationInfeasibleError("custom correlation matrix is not PSD")
        m.setflags(write=False)
        return cls("custom", m.shape[0], 0.0, m)

    def with_size(self, n: int) -> "CorrelationSpec":
        """Same correlation law at dimension ``n`` (not defined for custom)."""
        if n == self.n:
            return self
        if self.kind == "custom":
            raise DimensionError(
                f"custom correlation has fixed size {self.n}, cannot resize to {n}")
        return CorrelationSpec(self.kind, int(n), self.r)

    @property
    def factors(self) -> tuple[float, float]:
        if self.kind == "identity":
            return 1.0, 0.0
        if self.kind == "tridiagonal":
            return tridiagonal_factors(self.r)
        raise ValueError("l+/l- factors only exist for identity/tridiagonal kinds")

    def dense(self) -> np.ndarray:
        n = self.n
        if self.kind == "identity":
            return np.eye(n)
        if self.kind == "custom":
            return np.array(self.matrix)
        out = np.eye(n)
        if self.r != 0.0:
            idx = np.arange(n)
            out[idx, (idx + 1) % n] = self.r
            out[idx, (idx - 1) % n] = self.r
        return out

    def sqrt(self) -> np.ndarray:
        """Dense square root ``S`` with ``S.T @ S`` equal to the correlation."""
        if self.kind == "tridiagonal":
            return sqrt_tridiagonal(self)
        if self.kind == "identity":
            return np.eye(self.n)
        w, v = np.linalg.eigh(self.matrix)
        return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T

    def apply_sqrt(self, x: np.ndarray) -> np.ndarray:
        """``sqrt(R) @ x`` along axis 0 without materializing structured factors."""
        if self.kind == "identity":
            return np.array(x, dtype=float)
        if self.kind == "tridiagonal":
            lp, lm = self.factors
            return lp * x + lm * np.roll(x, -1, axis=0)
        return self.sqrt() @ x

    def apply_sqrt_t(self, x: np.ndarray) -> np.ndarray:
        """``sqrt(R).T @ x`` along axis 0."""
        if self.kind == "identity":
            return np.array(x, dtype=float)
        if self.kind == "tridiagonal":
            lp, lm = self.factors
            return lp * x + lm * np.roll(x, 1, axis=0)
        return self.sqrt().T @ x

    def describe(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "tridiagonal":
            return f"tridiag:{self.r!r}"
        return "custom"


def sqrt_tridiagonal(spec: CorrelationSpec) -> np.ndarray:
    """Upper-bidiagonal square root with a bottom-left corner element.

    ``l_plus`` sits on the diagonal and ``l_minus`` on the superdiagonal and
    in position ``(n-1, 0)``, which closes the chain cyclically.
    """
    if spec.kind != "tridiagonal":
        raise ValueError("sqrt_tridiagonal needs a tridiagonal spec")
    lp, lm = spec.factors
    n = spec.n
    idx = np.arange(n)
    out = np.zeros((n, n))
    out[idx, idx] = lp
    out[idx, (idx + 1) % n] += lm
    return out


@dataclass(frozen=True, eq=False)
class KroneckerMatrix:
    """``F = sqrt(Rr) @ xi @ sqrt(Rt)``; ``xi`` may be None for loaded matrices."""

    rt_spec: CorrelationSpec
    rr_spec: CorrelationSpec
    xi: Optional[np.ndarray] = field(default=None, repr=False)
    _dense: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.rr_spec.n

    @property
    def n(self) -> int:
        return self.rt_spec.n

    @property
    def entries(self) -> np.ndarray:
        if self._dense is None:
            # xi @ sqrt(Rt) == (sqrt(Rt).T @ xi.T).T
            right = self.rt_spec.apply_sqrt_t(self.xi.T).T
            dense = self.rr_spec.apply_sqrt(right)
            dense.setflags(write=False)
            object.__setattr__(self, "_dense", dense)
        return self._dense

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if self._dense is not None or self.n <= DENSE_LIMIT:
            return self.entries @ x
        return self.rr_spec.apply_sqrt(self.xi @ self.rt_spec.apply_sqrt(x))

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        if self._dense is not None or self.n <= DENSE_LIMIT:
            return self.entries.T @ v
        return self.rt_spec.apply_sqrt_t(self.xi.T @ self.rr_spec.apply_sqrt_t(v))


def _check_specs(n: int, p: int, rt: CorrelationSpec, rr: CorrelationSpec) -> None:
    if not (1 <= p < n):
        raise DimensionError(f"need 1 <= p < n, got p={p}, n={n}")
    if rt.n != n:
        raise DimensionError(f"Rt has size {rt.n}, expected {n}")
    if rr.n != p:
        raise DimensionError(f"Rr has size {rr.n}, expected {p}")


def draw_matrix(n: int, p: int, rt: CorrelationSpec, rr: CorrelationSpec,
                rng: np.random.Generator) -> KroneckerMatrix:
    _check_specs(n, p, rt, rr)
    xi = rng.standard_normal((p, n)) / np.sqrt(n)
    xi.setflags(write=False)
    return KroneckerMatrix(rt, rr, xi)


def sample_matrix(n: int, p: int, rt: CorrelationSpec, rr: CorrelationSpec,
                  seed: int) -> KroneckerMatrix:
    return draw_matrix(n, p, rt, rr, substream(seed, _MATRIX_STREAM))


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    matrix: KroneckerMatrix
    x0: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.n

    @property
    def p(self) -> int:
        return self.matrix.p

    @property
    def alpha(self) -> float:
        return self.p / self.n


def n_observations(n: int, alpha: float) -> int:
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    p = int(round(alpha * n))
    if not (1 <= p < n):
        raise DimensionError(f"alpha={alpha} with n={n} gives p={p}, outside [1, n)")
    return p


def make_instance(prior: SignalPrior, n: int, alpha: float,
                  rt: CorrelationSpec, rr: CorrelationSpec, seed: int) -> ProblemInstance:
    """Sample ``(F, x0, y = F x0)``.

    ``rt`` and ``rr`` are resized to ``n`` and ``round(alpha * n)`` when they
    are identity/tridiagonal specs; custom specs must already match.
    """
    p = n_observations(n, alpha)
    rt = rt.with_size(n)
    rr = rr.with_size(p)
    mat = sample_matrix(n, p, rt, rr, seed)
    x0 = sample_signal(prior, n, seed)
    y = mat.matvec(x0)
    x0.setflags(write=False)
    y.setflags(write=False)
    return ProblemInstance(mat, x0, y)


def save_instance(instance: ProblemInstance, stem) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` (F, float64 row-major) and ``<stem>.csv`` (x0, y).

    The CSV has a ``#`` comment line with the shape and correlation specs,
    then ``vector,index,value`` rows; values use ``repr`` so they round-trip.
    """
    stem = Path(stem)
    bin_path = stem.with_suffix(".bin")
    csv_path = stem.with_suffix(".csv")
    np.ascontiguousarray(instance.matrix.entries, dtype="<f8").tofile(bin_path)
    m = instance.matrix
    lines = [f"# p={m.p} n={m.n} rt={m.rt_spec.describe()} rr={m.rr_spec.describe()}",
             "vector,index,value"]
    lines += [f"x0,{i},{float(v)!r}" for i, v in enumerate(instance.x0)]
    lines += [f"y,{i},{float(v)!r}" for i, v in enumerate(instance.y)]
    csv_path.write_text("\n".join(lines) + "\n")
    return bin_path, csv_path


def load_instance(stem) -> ProblemInstance:
    stem = Path(stem)
    header = {}
    vectors = {"x0": [], "y": []}
    with open(stem.with_suffix(".csv")) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                header = dict(tok.split("=", 1) for tok in line[1:].split())
                continue
            if line.startswith("vector,"):
                continue
            name, _, value = line.split(",")
            vectors[name].append(float(value))
    n, p = int(header["n"]), int(header["p"])
    x0 = np.array(vectors["x0"])
    y = np.array(vectors["y"])
    if x0.size != n or y.size != p:
        raise DimensionError("CSV vector lengths disagree with the header")
    dense = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    if dense.size != p * n:
        raise DimensionError(f"binary matrix has {dense.size} entries, expected {p * n}")
    dense = dense.reshape(p, n)
    dense.setflags(write=False)
    rt = parse_correlation(header.get("rt", "identity"), n, allow_custom=False)
    rr = parse_correlation(header.get("rr", "identity"), p, allow_custom=False)
    return ProblemInstance(KroneckerMatrix(rt, rr, None, dense), x0, y)


def parse_correlation(text: str, n: int, allow_custom: bool = True) -> CorrelationSpec:
    """Parse ``identity``, ``tridiag:<r>`` or ``file:<path>`` into a spec of size ``n``.

    Unknown ``custom`` descriptors (as written in instance headers) fall back
    to identity when ``allow_custom`` is False, since only the dense F matters
    for a loaded instance.
    """
    text = text.strip()
    if text == "identity":
        return CorrelationSpec.identity(n)
    if text.startswith("tridiag:"):
        return CorrelationSpec.tridiagonal(n, float(text.split(":", 1)[1]))
    if text.startswith("file:"):
        path = text.split(":", 1)[1]
        m = np.loadtxt(path, delimiter="," if path.endswith(".csv") else None, ndmin=2)
        return CorrelationSpec.custom(m)
    if text == "custom" and not allow_custom:
        return CorrelationSpec.identity(n)
    raise ValueError(f"cannot parse correlation spec {text!r}")
