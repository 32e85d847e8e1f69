"""Linear time-varying systems, transition matrices and observability Gramians.

Everything here works on small dense matrices. Time-varying matrices are
wrapped in :class:`MatrixFn`, which carries optional analytic derivatives so
that the N_k chain in :mod:`ltvobs.observability` can be built without
numerical differentiation when possible.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, IntegrationDiverged, NumericError, SmoothnessError

MU_TOL = 1e-6
DEFAULT_DT = 1e-3
DEFAULT_NODES = 201
FD_STEP = 1e-4
PSD_SLACK = 1e-8

Evaluator = Callable[[float], np.ndarray]


def central_difference(f: Evaluator, t: float, h: float = FD_STEP) -> np.ndarray:
    """Fourth-order central difference of a matrix-valued function."""
    return (f(t - 2 * h) - 8.0 * f(t - h) + 8.0 * f(t + h) - f(t + 2 * h)) / (12.0 * h)


@dataclass(frozen=True)
class MatrixFn:
    """A matrix-valued function of time with optional analytic derivatives.

    ``derivatives[k-1]`` evaluates the k-th time derivative. A ``constant``
    function has every derivative identically zero.
    """

    shape: tuple[int, int]
    fn: Evaluator
    derivatives: tuple[Evaluator, ...] = ()
    constant: bool = False

    @classmethod
    def const(cls, matrix) -> "MatrixFn":
        mat = np.array(matrix, dtype=float)
        if mat.ndim != 2:
            raise DimensionError(f"expected a 2-D matrix, got shape {mat.shape}")
        mat.setflags(write=False)
        return cls(mat.shape, lambda t: mat, constant=True)

    @property
    def order(self) -> float:
        """Highest derivative order available analytically."""
        return math.inf if self.constant else len(self.derivatives)

    def __call__(self, t: float) -> np.ndarray:
        value = np.asarray(self.fn(t), dtype=float)
        if value.shape != self.shape:
            raise DimensionError(f"evaluator returned shape {value.shape} at t={t}, declared {self.shape}")
        return value

    def has_analytic(self, k: int) -> bool:
        return k <= self.order

    def derivative(self, k: int, t: float, fallback: bool = False) -> np.ndarray:
        if k == 0:
            return self(t)
        if self.constant:
            return np.zeros(self.shape)
        if k <= len(self.derivatives):
            value = np.asarray(self.derivatives[k - 1](t), dtype=float)
            if value.shape != self.shape:
                raise DimensionError(f"derivative {k} has shape {value.shape}, declared {self.shape}")
            return value
        if not fallback:
            raise SmoothnessError(f"derivative of order {k} requested, only {len(self.derivatives)} declared")
        return central_difference(lambda tau: self.derivative(k - 1, tau, fallback=True), t)

    def scaled(self, c: float) -> "MatrixFn":
        derivs = tuple((lambda t, d=d: c * np.asarray(d(t), dtype=float)) for d in self.derivatives)
        return MatrixFn(self.shape, lambda t: c * self(t), derivs, self.constant)


@dataclass(frozen=True)
class LtvSystem:
    """dX/dt = A(t) X + B(t) U,  Y = C(t) X."""

    A: MatrixFn
    B: MatrixFn
    C: MatrixFn

    def __post_init__(self):
        n, n2 = self.A.shape
        if n != n2:
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise DimensionError(f"B has {self.B.shape[0]} rows, expected {n}")
        if self.C.shape[1] != n:
            raise DimensionError(f"C has {self.C.shape[1]} columns, expected {n}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def s(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def with_output(self, C: MatrixFn) -> "LtvSystem":
        return LtvSystem(self.A, self.B, C)


@dataclass(frozen=True)
class TransitionMatrix:
    t: float
    s: float
    matrix: np.ndarray


def _check_finite(y: np.ndarray, t: float):
    if not np.all(np.isfinite(y)):
        raise IntegrationDiverged(t)


def rk4_step(f, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(f, t0: float, y0: np.ndarray, t1: float, dt: float = DEFAULT_DT) -> np.ndarray:
    """Fixed-step RK4 from t0 to t1; the last step is shortened to land on t1."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if t1 < t0:
        raise ConfigError("integration interval must be forward in time")
    span = t1 - t0
    full = int(math.floor(span / dt * (1 + 1e-12)))
    y = np.array(y0, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(full):
            t = t0 + i * dt
            y = rk4_step(f, t, y, dt)
            _check_finite(y, t + dt)
        rest = t1 - (t0 + full * dt)
        if rest > 1e-12 * max(1.0, abs(t1)):
            y = rk4_step(f, t0 + full * dt, y, rest)
            _check_finite(y, t1)
    return y


def transition_matrix(sys: LtvSystem, t: float, s: float, dt: float = DEFAULT_DT) -> TransitionMatrix:
    """Phi(t+s, t) by RK4 integration of dPhi/ds = A(t+s) Phi."""
    if s < 0:
        raise ConfigError("offset s must be non-negative")
    A = sys.A
    phi = integrate(lambda tau, P: A(tau) @ P, t, np.eye(sys.n), t + s, dt)
    return TransitionMatrix(t, s, phi)


def simpson_weights(nodes: int, h: float) -> np.ndarray:
    _check_nodes(nodes)
    w = np.ones(nodes)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


def _check_nodes(nodes: int):
    if nodes < 3 or nodes % 2 == 0:
        raise ConfigError(f"composite Simpson needs an odd node count >= 3, got {nodes}")


def propagate_nodes(sys: LtvSystem, t: float, delta: float, nodes: int, dt: float = DEFAULT_DT):
    """Return (times, Phi(times, t)) on an evenly spaced grid over [t, t+delta]."""
    if delta <= 0:
        raise ConfigError("window length must be positive")
    times = t + np.linspace(0.0, delta, nodes)
    h = delta / (nodes - 1)
    sub = max(1, math.ceil(h / dt - 1e-9))
    hs = h / sub
    A = sys.A
    f = lambda tau, P: A(tau) @ P
    phis = np.empty((nodes, sys.n, sys.n))
    phi = np.eye(sys.n)
    phis[0] = phi
    for j in range(1, nodes):
        t0 = times[j - 1]
        for i in range(sub):
            phi = rk4_step(f, t0 + i * hs, phi, hs)
        _check_finite(phi, times[j])
        phis[j] = phi
    return times, phis


def symmetric_eig(W: np.ndarray):
    """Ascending eigenpairs of a symmetric matrix, eigenvectors sign-normalised.

    Each eigenvector is flipped so that its first entry larger than 1e-12 in
    magnitude is positive.
    """
    Ws = 0.5 * (W + W.T)
    try:
        vals, vecs = np.linalg.eigh(Ws)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"symmetric eigen-solver failed: {exc}") from exc
    for j in range(vecs.shape[1]):
        v = vecs[:, j]
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            vecs[:, j] = -v
    return vals, vecs


def weakest_direction(vals: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Eigenvector of the smallest eigenvalue; ties go to the lexicographically smallest."""
    tie = 1e-12 * max(1.0, float(np.max(np.abs(vals))))
    candidates = [vecs[:, j] for j in np.flatnonzero(vals <= vals[0] + tie)]
    best = min(candidates, key=lambda v: tuple(np.round(v, 12)))
    return best / np.linalg.norm(best)


@dataclass(frozen=True)
class GramianReport:
    t: float
    delta: float
    W: np.ndarray
    eigenvalues: np.ndarray
    weakest: np.ndarray
    nodes: int
    raw_eigenvalues: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, t: float, delta: float, W: np.ndarray, nodes: int) -> "GramianReport":
        Ws = 0.5 * (W + W.T)
        vals, vecs = symmetric_eig(Ws)
        if vals[0] < -PSD_SLACK * max(1.0, float(np.max(np.abs(vals)))):
            raise NumericError(f"Gramian is not positive semidefinite (min eigenvalue {vals[0]:.3e})")
        clamped = np.where(vals < 0.0, 0.0, vals)
        return cls(float(t), float(delta), Ws, clamped, weakest_direction(vals, vecs), nodes, vals)

    @property
    def min_eig(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def max_eig(self) -> float:
        return float(self.eigenvalues[-1])

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "delta": self.delta,
            "nodes": self.nodes,
            "min_eig": self.min_eig,
            "max_eig": self.max_eig,
            "eigenvalues": self.eigenvalues.tolist(),
            "raw_eigenvalues": self.raw_eigenvalues.tolist(),
            "witness": self.weakest.tolist(),
            "gramian": self.W.tolist(),
        }


def _windowed_gramian(sys, output: MatrixFn, t, delta, nodes, dt) -> np.ndarray:
    _check_nodes(nodes)
    times, phis = propagate_nodes(sys, t, delta, nodes, dt)
    w = simpson_weights(nodes, delta / (nodes - 1))
    W = np.zeros((sys.n, sys.n))
    for wj, tj, phi in zip(w, times, phis):
        op = output(tj) @ phi
        W += wj * (op.T @ op)
    return W / delta


def gramian(sys: LtvSystem, t: float, delta: float, nodes: int = DEFAULT_NODES,
            dt: float = DEFAULT_DT) -> GramianReport:
    """Observability Gramian (1/delta) * int_t^{t+delta} Phi^T C^T C Phi ds."""
    W = _windowed_gramian(sys, sys.C, t, delta, nodes, dt)
    return GramianReport.from_matrix(t, delta, W, nodes)


def extended_gramian(sys: LtvSystem, M: MatrixFn, t: float, delta: float,
                     nodes: int = DEFAULT_NODES, dt: float = DEFAULT_DT) -> GramianReport:
    """Gramian with the output matrix C replaced by an arbitrary M(t) with n columns."""
    if M.shape[1] != sys.n:
        raise DimensionError(f"M has {M.shape[1]} columns, system state has dimension {sys.n}")
    W = _windowed_gramian(sys, M, t, delta, nodes, dt)
    return GramianReport.from_matrix(t, delta, W, nodes)


class ScanPoint(NamedTuple):
    t: float
    min_eig: float
    direction: np.ndarray


def weakest_direction_scan(sys: LtvSystem, t_grid: Sequence[float], delta: float,
                           nodes: int = DEFAULT_NODES, dt: float = DEFAULT_DT,
                           M: MatrixFn | None = None, jobs: int = 1) -> list[ScanPoint]:
    """Smallest Gramian eigenpair for every window start in ``t_grid`` (grid order kept)."""
    grid = [float(t) for t in t_grid]
    if not grid:
        raise ConfigError("t_grid must not be empty")

    def one(t):
        rep = gramian(sys, t, delta, nodes, dt) if M is None else extended_gramian(sys, M, t, delta, nodes, dt)
        return ScanPoint(t, rep.min_eig, rep.weakest)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, grid))
    return [one(t) for t in grid]


def uniformly_observable_on_grid(scan: Sequence[ScanPoint], mu_tol: float = MU_TOL) -> bool:
    return min(p.min_eig for p in scan) >= mu_tol
