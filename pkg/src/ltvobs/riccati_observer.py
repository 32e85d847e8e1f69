"""Continuous Riccati observer on the lifted range-localization system.

    dXh/dt = A(t) Xh + U(t) + K (Y - C Xh),   K = P C^T Q
    dP/dt  = A P + P A^T - P C^T Q C P + V

The truth integrates dx_pos/dt = u(t) + a while the observer only sees the
measured velocity u(t) and the ranges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CovarianceCollapse, ObserverDiverged
from .range_localization import (
    Scenario,
    dynamics_matrix,
    half_squared_ranges,
    lift,
    lifted_input,
    output_matrix,
    ranges_to_output,
)

PD_FLOOR = 1e-12
DEFAULT_DIRECTION = np.array([0.6, 0.8, 0.0])


def _sym_matrix(value, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(dim)
    elif arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (dim, dim):
        raise ConfigError(f"{name} has shape {arr.shape}, expected ({dim}, {dim})")
    if not np.allclose(arr, arr.T, rtol=0.0, atol=1e-12):
        raise ConfigError(f"{name} must be symmetric")
    return arr


@dataclass(frozen=True)
class ObserverConfig:
    Q: np.ndarray
    V: np.ndarray
    P0: np.ndarray
    x_hat0: np.ndarray
    noise_std: np.ndarray
    dt: float

    def __post_init__(self):
        if np.linalg.eigvalsh(self.Q)[0] < 1e-9:
            raise ConfigError("Q must be positive definite")
        if np.linalg.eigvalsh(self.P0)[0] < 1e-9:
            raise ConfigError("P0 must be positive definite")
        if np.linalg.eigvalsh(self.V)[0] < -1e-12:
            raise ConfigError("V must be positive semidefinite")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if np.any(self.noise_std < 0):
            raise ConfigError("noise standard deviations must be non-negative")

    @classmethod
    def default(cls, sc: Scenario, position_offset=None, bias_offset=None, x_hat0=None,
                Q=1.0, V=0.01, P0=1.0, noise_std=0.0, dt=None) -> "ObserverConfig":
        """Identity Q and P0, V = 0.01 I; the initial estimate is the lifted offset truth.

        Offsets default to 1 m in position and 0.1 m/s in bias, both along
        (0.6, 0.8[, 0]).
        """
        n, d, l = sc.n, sc.state_dim, sc.beacons.l
        if x_hat0 is None:
            direction = DEFAULT_DIRECTION[:n]
            dp = direction if position_offset is None else np.asarray(position_offset, float)
            db = 0.1 * direction if bias_offset is None else np.asarray(bias_offset, float)
            a_hat = None if sc.bias is None else sc.bias + db
            x_hat0 = lift(sc.x0 + dp, a_hat, sc.beacons)
        x_hat0 = np.asarray(x_hat0, dtype=float)
        if x_hat0.shape != (d,):
            raise ConfigError(f"initial estimate has shape {x_hat0.shape}, expected ({d},)")
        noise = np.broadcast_to(np.asarray(noise_std, dtype=float), (l,)).copy()
        return cls(_sym_matrix(Q, l + 1, "Q"), _sym_matrix(V, d, "V"), _sym_matrix(P0, d, "P0"),
                   x_hat0, noise, float(sc.dt if dt is None else dt))

    @classmethod
    def from_dict(cls, d: dict, sc: Scenario) -> "ObserverConfig":
        known = {"Q", "V", "P0", "x_hat0", "position_offset", "bias_offset", "noise_std", "dt"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown observer config keys: {sorted(unknown)}")
        return cls.default(sc, **d)

    def to_dict(self) -> dict:
        return {
            "Q": self.Q.tolist(),
            "V": self.V.tolist(),
            "P0": self.P0.tolist(),
            "x_hat0": self.x_hat0.tolist(),
            "noise_std": self.noise_std.tolist(),
            "dt": self.dt,
        }


@dataclass(frozen=True)
class ObserverTrace:
    n: int
    bias_enabled: bool
    t: np.ndarray
    X: np.ndarray
    X_hat: np.ndarray
    P: np.ndarray
    residual_norm: np.ndarray
    C: np.ndarray
    Q: np.ndarray

    @property
    def error(self) -> np.ndarray:
        return self.X_hat - self.X

    @property
    def err_norm(self) -> np.ndarray:
        return np.linalg.norm(self.error, axis=1)

    @property
    def pos_err(self) -> np.ndarray:
        return np.linalg.norm(self.error[:, :self.n], axis=1)

    @property
    def bias_err(self) -> np.ndarray:
        if not self.bias_enabled:
            return np.full(len(self.t), np.nan)
        return np.linalg.norm(self.error[:, self.n:2 * self.n], axis=1)

    @property
    def p_eigs(self) -> tuple[np.ndarray, np.ndarray]:
        vals = np.linalg.eigvalsh(self.P)
        return vals[:, 0], vals[:, -1]

    def gain(self, k: int) -> np.ndarray:
        return gain(self.P[k], self.C, self.Q)

    def header(self) -> list[str]:
        d = self.X.shape[1]
        return (["t"] + [f"x{i}" for i in range(1, d + 1)] + [f"xhat{i}" for i in range(1, d + 1)]
                + ["err_norm", "pos_err", "bias_err", "p_min_eig", "p_max_eig"])

    def to_csv(self, path) -> None:
        pmin, pmax = self.p_eigs
        table = np.column_stack([self.t, self.X, self.X_hat, self.err_norm, self.pos_err,
                                 self.bias_err, pmin, pmax])
        np.savetxt(Path(path), table, fmt="%.17g", delimiter=",", header=",".join(self.header()),
                   comments="")


def gain(P: np.ndarray, C: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return P @ C.T @ Q


def run_observer(sc: Scenario, cfg: ObserverConfig, seed: int = 0) -> ObserverTrace:
    n, d, l = sc.n, sc.state_dim, sc.beacons.l
    if cfg.x_hat0.shape != (d,) or cfg.V.shape != (d, d) or cfg.Q.shape != (l + 1, l + 1):
        raise ConfigError("observer config does not match the scenario dimensions")
    C, Q, V = output_matrix(sc), cfg.Q, cfg.V
    CtQC = C.T @ Q @ C
    bias = np.zeros(n) if sc.bias is None else sc.bias
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(l)]
    noisy = bool(np.any(cfg.noise_std > 0))

    def measured(x_pos, noise):
        if not noisy:
            return ranges_to_output(sc.beacons, half_squared_ranges(sc.beacons, x_pos))
        r = np.linalg.norm(x_pos - sc.beacons.positions, axis=1) + noise
        return ranges_to_output(sc.beacons, 0.5 * r * r)

    def f(t, x_pos, xh, P, noise):
        A = dynamics_matrix(sc, t)
        innovation = measured(x_pos, noise) - C @ xh
        dx = sc.u(t) + bias
        dxh = A @ xh + lifted_input(sc, t) + P @ (C.T @ (Q @ innovation))
        AP = A @ P
        dP = AP + AP.T - P @ CtQC @ P + V
        return dx, dxh, dP

    steps = max(1, math.ceil(sc.horizon / cfg.dt - 1e-9))
    times = np.empty(steps + 1)
    X = np.empty((steps + 1, d))
    X_hat = np.empty((steps + 1, d))
    Ps = np.empty((steps + 1, d, d))
    resid = np.empty(steps + 1)

    x, xh, P = sc.x0.copy(), cfg.x_hat0.copy(), cfg.P0.copy()
    t = 0.0
    for k in range(steps + 1):
        times[k], X[k], X_hat[k], Ps[k] = t, lift(x, sc.bias, sc.beacons), xh, P
        resid[k] = np.linalg.norm(measured(x, 0.0) - C @ xh)
        if k == steps:
            break
        h = min(cfg.dt, sc.horizon - t) if k == steps - 1 else cfg.dt
        noise = np.array([g.standard_normal() for g in streams]) * cfg.noise_std if noisy else 0.0
        k1 = f(t, x, xh, P, noise)
        k2 = f(t + h / 2, x + h / 2 * k1[0], xh + h / 2 * k1[1], P + h / 2 * k1[2], noise)
        k3 = f(t + h / 2, x + h / 2 * k2[0], xh + h / 2 * k2[1], P + h / 2 * k2[2], noise)
        k4 = f(t + h, x + h * k3[0], xh + h * k3[1], P + h * k3[2], noise)
        x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        xh = xh + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        P = P + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        P = 0.5 * (P + P.T)
        t = (k + 1) * cfg.dt if k < steps - 1 else sc.horizon
        if not (np.all(np.isfinite(xh)) and np.all(np.isfinite(P))):
            raise ObserverDiverged(t)
        pmin = np.linalg.eigvalsh(P)[0]
        if pmin < PD_FLOOR:
            raise CovarianceCollapse(t, pmin)

    return ObserverTrace(n, sc.bias_enabled, times, X, X_hat, Ps, resid, C, Q)


def convergence_metrics(trace: ObserverTrace, direction=None) -> dict:
    """Decay rate of the error over the second half of the horizon, plus final errors.

    ``direction`` restricts the rate fit to one error component: a vector of
    length n acts on the position error, one of the full state dimension on
    the lifted error. An error that hits exactly zero gives an infinite rate.
    """
    if len(trace.t) == 0:
        raise ValueError("empty trace")
    if direction is None:
        comp = trace.err_norm
    else:
        v = np.asarray(direction, dtype=float)
        e = trace.error[:, :trace.n] if v.shape == (trace.n,) else trace.error
        comp = np.abs(e @ v)
    t = trace.t
    half = t >= t[0] + 0.5 * (t[-1] - t[0])
    if np.any(comp[half] == 0.0):
        rate = math.inf
    else:
        slope = np.polyfit(t[half], np.log(comp[half]), 1)[0]
        rate = float(-slope)
    pmin, pmax = trace.p_eigs
    return {
        "decay_rate": rate,
        "final_err_norm": float(trace.err_norm[-1]),
        "final_component_err": float(comp[-1]),
        "initial_component_err": float(comp[0]),
        "final_pos_err": float(trace.pos_err[-1]),
        "final_bias_err": float(trace.bias_err[-1]) if trace.bias_enabled else None,
        "p_cond_peak": float(np.max(pmax / pmin)),
    }
