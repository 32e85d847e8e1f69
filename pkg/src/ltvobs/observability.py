"""N_k observability chain, sufficient conditions C1/C2 and the rotation counterexample.

The chain is N_0 = C, N_{k+1} = N_k A + dN_k/dt. Derivatives of N_k are
obtained with the Leibniz rule from derivatives of A and C, so analytic
derivatives attached to the system propagate through every level.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, SmoothnessError
from .ltv_core import (
    DEFAULT_DT,
    DEFAULT_NODES,
    MU_TOL,
    LtvSystem,
    MatrixFn,
    gramian,
    simpson_weights,
    symmetric_eig,
    weakest_direction,
)

IMAG_TOL = 1e-8
CONST_TOL = 1e-10
CONST_SAMPLES = 32


@dataclass(frozen=True)
class NkChain:
    order: int
    levels: tuple[MatrixFn, ...]
    provenance: tuple[str, ...]

    def __getitem__(self, k: int) -> MatrixFn:
        return self.levels[k]

    def select(self, rows: Iterable[tuple[int, int]]) -> MatrixFn:
        """Stack chosen (level, row) pairs into a single M(t)."""
        rows = list(rows)
        if not rows:
            raise ValueError("row selection is empty")
        ncols = self.levels[0].shape[1]
        for level, r in rows:
            if not (0 <= level <= self.order) or not (0 <= r < self.levels[level].shape[0]):
                raise DimensionError(f"row ({level}, {r}) is outside the chain")
        levels = self.levels

        def fn(t):
            cache = {}
            out = np.empty((len(rows), ncols))
            for i, (level, r) in enumerate(rows):
                if level not in cache:
                    cache[level] = levels[level](t)
                out[i] = cache[level][r]
            return out

        return MatrixFn((len(rows), ncols), fn)

    def stacked(self, levels: Sequence[int] | None = None) -> MatrixFn:
        """All rows of the given levels (default: every level)."""
        levels = range(self.order + 1) if levels is None else levels
        return self.select((k, r) for k in levels for r in range(self.levels[k].shape[0]))


def build_chain(sys: LtvSystem, K: int, fallback: bool = True) -> NkChain:
    """Build N_0..N_K. Missing analytic derivatives use finite differences when ``fallback``."""
    if K < 0:
        raise ValueError("chain order must be non-negative")
    A, C = sys.A, sys.C
    if not fallback:
        if K > 0 and not A.has_analytic(K - 1):
            raise SmoothnessError(f"A needs {K - 1} analytic derivatives for a chain of order {K}")
        if not C.has_analytic(K):
            raise SmoothnessError(f"C needs {K} analytic derivatives for a chain of order {K}")

    def nderiv(k: int, j: int, t: float) -> np.ndarray:
        # j-th derivative of N_k
        if k == 0:
            return C.derivative(j, t, fallback=fallback)
        out = nderiv(k - 1, j + 1, t)
        for i in range(j + 1):
            out = out + comb(j, i) * (nderiv(k - 1, i, t) @ A.derivative(j - i, t, fallback=fallback))
        return out

    levels, provenance = [], []
    for k in range(K + 1):
        derivs = tuple((lambda t, k=k, j=j: nderiv(k, j, t)) for j in range(1, K - k + 1))
        levels.append(MatrixFn(C.shape, lambda t, k=k: nderiv(k, 0, t), derivs, A.constant and C.constant))
        analytic = C.has_analytic(k) and (k == 0 or A.has_analytic(k - 1))
        provenance.append("analytic" if analytic else "finite-difference")
    return NkChain(K, tuple(levels), tuple(provenance))


@dataclass(frozen=True)
class ConditionReport:
    condition: str
    t: float
    delta: float
    attained: float
    passed: bool
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "t": self.t,
            "delta": self.delta,
            "attained": self.attained,
            "passed": self.passed,
            "diagnostics": self.diagnostics,
        }


def _window(t, delta, nodes):
    if delta <= 0:
        raise ValueError("window length must be positive")
    times = t + np.linspace(0.0, delta, nodes)
    return times, simpson_weights(nodes, delta / (nodes - 1))


def m_integral(M: MatrixFn, t: float, delta: float, nodes: int = DEFAULT_NODES) -> np.ndarray:
    """(1/delta) * int_t^{t+delta} M^T M ds by composite Simpson."""
    times, w = _window(t, delta, nodes)
    acc = sum(wj * (M(tj).T @ M(tj)) for wj, tj in zip(w, times))
    acc = acc / delta
    return 0.5 * (acc + acc.T)


def check_C1(M: MatrixFn, t: float, delta: float, nodes: int = DEFAULT_NODES,
             mu_tol: float = MU_TOL) -> ConditionReport:
    """Averaged |det(M^T M)| over the window."""
    times, w = _window(t, delta, nodes)
    dets = np.array([abs(np.linalg.det(M(tj).T @ M(tj))) for tj in times])
    attained = float(w @ dets / delta)
    return ConditionReport("C1", float(t), float(delta), attained, attained >= mu_tol,
                           {"min_det": float(dets.min()), "max_det": float(dets.max())})


def check_C2(sys: LtvSystem, M: MatrixFn, t: float, delta_bar: float, nodes: int = DEFAULT_NODES,
             mu_tol: float = MU_TOL) -> ConditionReport:
    """Constant A with real spectrum, plus a floor on the averaged M^T M."""
    if M.shape[1] != sys.n:
        raise DimensionError(f"M has {M.shape[1]} columns, system state has dimension {sys.n}")
    A0 = sys.A(t)
    samples = t + np.linspace(0.0, delta_bar, CONST_SAMPLES)
    variation = max(float(np.max(np.abs(sys.A(s) - A0))) for s in samples)
    a_constant = variation <= CONST_TOL
    spectrum = np.linalg.eigvals(A0)
    real_spectrum = bool(np.all(np.abs(spectrum.imag) <= IMAG_TOL))
    integral_min = float(np.linalg.eigvalsh(m_integral(M, t, delta_bar, nodes))[0])
    passed = a_constant and real_spectrum and integral_min >= mu_tol
    diagnostics = {
        "a_constant": a_constant,
        "a_variation": variation,
        "real_spectrum": real_spectrum,
        "spectrum": [[float(z.real), float(z.imag)] for z in spectrum],
        "integral_min_eig": integral_min,
        "integral_ok": integral_min >= mu_tol,
    }
    return ConditionReport("C2", float(t), float(delta_bar), integral_min, passed, diagnostics)


def _projector(t):
    s2 = np.sin(2 * t)
    return np.array([[np.sin(t) ** 2, 0.5 * s2], [0.5 * s2, np.cos(t) ** 2]])


def _projector_d1(t):
    s2, c2 = np.sin(2 * t), np.cos(2 * t)
    return np.array([[s2, c2], [c2, -s2]])


def _projector_d2(t):
    s2, c2 = np.sin(2 * t), np.cos(2 * t)
    return np.array([[2 * c2, -2 * s2], [-2 * s2, -2 * c2]])


def build_counterexample() -> LtvSystem:
    """Rotation dynamics observed through the projector orthogonal to (cos t, -sin t)."""
    A = MatrixFn.const([[0.0, 1.0], [-1.0, 0.0]])
    C = MatrixFn((2, 2), _projector, (_projector_d1, _projector_d2))
    return LtvSystem(A, MatrixFn.const(np.zeros((2, 1))), C)


def counterexample_report(deltas: Sequence[float], nodes: int = DEFAULT_NODES,
                          dt: float = DEFAULT_DT) -> list[dict]:
    """Gramian nullity vs. positive M-integral (M = C) for each window length."""
    if any(d <= 0 for d in deltas):
        raise ValueError("all window lengths must be positive")
    sys = build_counterexample()
    records = []
    for delta in deltas:
        rep = gramian(sys, 0.0, delta, nodes, dt)
        mint = m_integral(sys.C, 0.0, delta, nodes)
        vals, vecs = symmetric_eig(rep.W)
        records.append({
            "delta": float(delta),
            "gramian_min_eig": rep.min_eig,
            "m_integral_min_eig": float(np.linalg.eigvalsh(mint)[0]),
            "witness": weakest_direction(vals, vecs).tolist(),
        })
    return records


def report_json(records: list[dict]) -> str:
    return json.dumps(records, indent=2)
