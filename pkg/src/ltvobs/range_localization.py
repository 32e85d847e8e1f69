"""Position and velocity-bias estimation from ranges to fixed beacons.

The squared ranges y_i = |x_pos - z_i|^2 / 2 are nonlinear in the position,
but after lifting the state to

    X = [x_pos, a, y_0, a.x_pos, |a|^2]

with y_0 = |x_pos|^2 / 2 - sum_i alpha_i z_i.x_pos, both the dynamics and the
outputs are linear and the problem becomes an LTV observability question.
The true velocity is u(t) + a, where u is the measured velocity.
Without bias the state reduces to [x_pos, y_0].
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .ltv_core import (
    DEFAULT_DT,
    DEFAULT_NODES,
    MU_TOL,
    LtvSystem,
    MatrixFn,
    TransitionMatrix,
    extended_gramian,
    gramian,
    simpson_weights,
    weakest_direction_scan,
)

GRAMIAN_FLOOR = 1e-4
UNOBSERVABLE_CEIL = 1e-6


@dataclass(frozen=True)
class BeaconConfig:
    positions: np.ndarray  # (l, n)
    alpha: np.ndarray  # (l,)

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        n = pos.shape[1]
        if n not in (2, 3):
            raise ConfigError(f"beacons must be 2-D or 3-D points, got dimension {n}")
        alpha = np.full(pos.shape[0], 1.0 / pos.shape[0]) if self.alpha is None else np.asarray(self.alpha, float)
        if alpha.shape != (pos.shape[0],):
            raise ConfigError(f"alpha has shape {alpha.shape}, expected ({pos.shape[0]},)")
        if abs(alpha.sum() - 1.0) > 1e-12:
            raise ConfigError(f"beacon weights must sum to 1, got {alpha.sum():.17g}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def uniform(cls, positions) -> "BeaconConfig":
        return cls(positions, None)

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def l(self) -> int:
        return self.positions.shape[0]

    @property
    def Z(self) -> np.ndarray:
        return self.positions.T

    @property
    def xi(self) -> np.ndarray:
        return np.ones(self.l)

    @property
    def D(self) -> np.ndarray:
        return np.outer(self.xi, self.alpha) - np.eye(self.l)

    @property
    def DZt(self) -> np.ndarray:
        return self.D @ self.Z.T

    @property
    def center(self) -> np.ndarray:
        """Weighted beacon combination sum_i alpha_i z_i."""
        return self.Z @ self.alpha

    def geometry_matrix(self) -> np.ndarray:
        DZt = self.DZt
        return DZt.T @ DZt


@dataclass(frozen=True)
class Trajectory:
    """Measured velocity u(t) and its analytic derivative.

    Kinds: ``constant`` (velocity), ``circular`` (amplitude, omega, phase),
    ``figure_eight`` (amplitude, omega) and ``polynomial`` (coeffs: one list of
    ascending coefficients per axis). Extra axes beyond the planar ones stay
    at ``vz`` for circular and figure-eight motion.
    """

    kind: str
    params: dict
    dim: int

    def __post_init__(self):
        p = self.params
        if self.kind == "constant":
            if len(p.get("velocity", [])) != self.dim:
                raise ConfigError("constant trajectory needs a velocity of the scenario dimension")
        elif self.kind == "polynomial":
            if len(p.get("coeffs", [])) != self.dim:
                raise ConfigError("polynomial trajectory needs one coefficient list per axis")
        elif self.kind not in ("circular", "figure_eight"):
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")

    def _planar(self, t, deriv):
        p = self.params
        amp, w = float(p.get("amplitude", 1.0)), float(p.get("omega", 1.0))
        if self.kind == "circular":
            ph = w * t + float(p.get("phase", 0.0))
            if deriv:
                return amp * w * np.array([np.cos(ph), -np.sin(ph)])
            return amp * np.array([np.sin(ph), np.cos(ph)])
        if deriv:
            return amp * w * np.array([-np.sin(w * t), -2.0 * np.sin(2 * w * t)])
        return amp * np.array([np.cos(w * t), np.cos(2 * w * t)])

    def u(self, t: float) -> np.ndarray:
        p = self.params
        if self.kind == "constant":
            return np.array(p["velocity"], dtype=float)
        if self.kind == "polynomial":
            return np.array([np.polynomial.polynomial.polyval(t, c) for c in p["coeffs"]])
        out = self._planar(t, False)
        return out if self.dim == 2 else np.append(out, float(p.get("vz", 0.0)))

    def du(self, t: float) -> np.ndarray:
        p = self.params
        if self.kind == "constant":
            return np.zeros(self.dim)
        if self.kind == "polynomial":
            return np.array([np.polynomial.polynomial.polyval(t, np.polynomial.polynomial.polyder(c))
                             if len(c) > 1 else 0.0 for c in p["coeffs"]])
        out = self._planar(t, True)
        return out if self.dim == 2 else np.append(out, 0.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}


@dataclass(frozen=True)
class Scenario:
    beacons: BeaconConfig
    trajectory: Trajectory
    x0: np.ndarray
    bias: np.ndarray | None
    horizon: float
    dt: float = 0.01
    delta: float = 2 * np.pi
    name: str = field(default="", compare=False)

    def __post_init__(self):
        n = self.beacons.n
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (n,):
            raise ConfigError(f"x0 has shape {x0.shape}, beacons are {n}-D")
        object.__setattr__(self, "x0", x0)
        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=float)
            if bias.shape != (n,):
                raise ConfigError(f"bias has shape {bias.shape}, beacons are {n}-D")
            object.__setattr__(self, "bias", bias)
        if self.trajectory.dim != n:
            raise ConfigError("trajectory dimension does not match beacon dimension")
        if self.horizon <= 0 or self.dt <= 0 or self.delta <= 0:
            raise ConfigError("horizon, dt and delta must be positive")

    @property
    def n(self) -> int:
        return self.beacons.n

    @property
    def bias_enabled(self) -> bool:
        return self.bias is not None

    @property
    def state_dim(self) -> int:
        return 2 * self.n + 3 if self.bias_enabled else self.n + 1

    def u(self, t):
        return self.trajectory.u(t)

    def du(self, t):
        return self.trajectory.du(t)

    def validate(self, samples: int = 20, seed: int = 0) -> None:
        """Sampled boundedness of u, du and agreement of du with a difference quotient."""
        grid = np.linspace(0.0, self.horizon + self.delta, 200)
        if not all(np.all(np.isfinite(self.u(t))) and np.all(np.isfinite(self.du(t))) for t in grid):
            raise ConfigError("trajectory is not finite on [0, T + delta]")
        rng = np.random.default_rng(seed)
        h = 1e-5
        for t in rng.uniform(0.0, self.horizon, samples):
            fd = (self.u(t + h) - self.u(t - h)) / (2 * h)
            if np.max(np.abs(fd - self.du(t))) > 1e-4:
                raise ConfigError(f"acceleration does not match velocity derivative at t={t:.6g}")

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "Scenario":
        try:
            dim = int(d["dim"])
            beacons = BeaconConfig(np.array(d["beacons"], dtype=float).reshape(-1, dim), d.get("alpha"))
            traj = Trajectory(d["trajectory"]["kind"], dict(d["trajectory"].get("params", {})), dim)
            return cls(beacons, traj, d["x0"], d.get("bias"), float(d["horizon"]),
                       float(d.get("dt", 0.01)), float(d.get("delta", 2 * np.pi)), name)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid scenario: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "Scenario":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.stem)

    def to_dict(self) -> dict:
        return {
            "dim": self.n,
            "beacons": self.beacons.positions.tolist(),
            "alpha": self.beacons.alpha.tolist(),
            "trajectory": self.trajectory.to_dict(),
            "bias": None if self.bias is None else self.bias.tolist(),
            "x0": self.x0.tolist(),
            "horizon": self.horizon,
            "dt": self.dt,
            "delta": self.delta,
        }


BUNDLED_DIR = Path(__file__).parent / "data" / "scenarios"


def bundled_names() -> list[str]:
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.json"))


def load_bundled(name: str) -> Scenario:
    return Scenario.from_json(BUNDLED_DIR / f"{name}.json")


# lifted state and outputs

def lift(x_pos, a, beacons: BeaconConfig) -> np.ndarray:
    """Lifted state from physical position and bias (bias ``None`` drops the bias blocks)."""
    x_pos = np.asarray(x_pos, dtype=float)
    y0 = 0.5 * x_pos @ x_pos - beacons.center @ x_pos
    if a is None:
        return np.concatenate([x_pos, [y0]])
    a = np.asarray(a, dtype=float)
    return np.concatenate([x_pos, a, [y0, a @ x_pos, a @ a]])


def split_state(X: np.ndarray, n: int) -> dict:
    X = np.asarray(X)
    if X.shape[-1] == n + 1:
        return {"x_pos": X[..., :n], "y0": X[..., n]}
    return {"x_pos": X[..., :n], "a": X[..., n:2 * n], "y0": X[..., 2 * n],
            "a_dot_x": X[..., 2 * n + 1], "a_sq": X[..., 2 * n + 2]}


def ranges_to_output(beacons: BeaconConfig, y: np.ndarray) -> np.ndarray:
    """Y = [y_0, y_i - y_0 - |z_i|^2/2] from half squared ranges y_i.

    y_0 is recovered from the ranges as sum_i alpha_i (y_i - |z_i|^2/2).
    """
    zsq = 0.5 * np.sum(beacons.positions ** 2, axis=1)
    y0 = beacons.alpha @ (y - zsq)
    return np.concatenate([[y0], y - y0 - zsq])


def half_squared_ranges(beacons: BeaconConfig, x_pos) -> np.ndarray:
    diff = np.asarray(x_pos, dtype=float) - beacons.positions
    return 0.5 * np.sum(diff * diff, axis=1)


def measure(sc: Scenario, t: float, x_pos) -> np.ndarray:
    """Output vector Y of dimension l+1 built from the true ranges at position x_pos."""
    return ranges_to_output(sc.beacons, half_squared_ranges(sc.beacons, x_pos))


def output_matrix(sc: Scenario) -> np.ndarray:
    b, n, l = sc.beacons, sc.n, sc.beacons.l
    C = np.zeros((l + 1, sc.state_dim))
    if sc.bias_enabled:
        C[0, 2 * n] = 1.0
    else:
        C[0, n] = 1.0
    C[1:, :n] = b.DZt
    return C


def dynamics_matrix(sc: Scenario, t: float) -> np.ndarray:
    n, d = sc.n, sc.state_dim
    A = np.zeros((d, d))
    u = sc.u(t)
    if not sc.bias_enabled:
        A[n, :n] = u
        return A
    A[:n, n:2 * n] = np.eye(n)
    A[2 * n, :n] = u
    A[2 * n, n:2 * n] = -sc.beacons.center
    A[2 * n, 2 * n + 1] = 1.0
    A[2 * n + 1, n:2 * n] = u
    A[2 * n + 1, 2 * n + 2] = 1.0
    return A


def dynamics_matrix_dot(sc: Scenario, t: float) -> np.ndarray:
    n, d = sc.n, sc.state_dim
    Ad = np.zeros((d, d))
    du = sc.du(t)
    if not sc.bias_enabled:
        Ad[n, :n] = du
        return Ad
    Ad[2 * n, :n] = du
    Ad[2 * n + 1, n:2 * n] = du
    return Ad


def lifted_input(sc: Scenario, t: float) -> np.ndarray:
    """U(t); B is the identity so this is the additive drive of the lifted state."""
    n, u = sc.n, sc.u(t)
    w = -sc.beacons.center @ u
    if not sc.bias_enabled:
        return np.concatenate([u, [w]])
    return np.concatenate([u, np.zeros(n), [w, 0.0, 0.0]])


def build_lifted_system(sc: Scenario) -> LtvSystem:
    d = sc.state_dim
    A = MatrixFn((d, d), lambda t: dynamics_matrix(sc, t), (lambda t: dynamics_matrix_dot(sc, t),))
    return LtvSystem(A, MatrixFn.const(np.eye(d)), MatrixFn.const(output_matrix(sc)))


def velocity_primitive(sc: Scenario, t: float, s: float) -> np.ndarray:
    """int_t^{t+s} u(tau) dtau by composite Simpson on a grid no coarser than sc.dt."""
    if s == 0:
        return np.zeros(sc.n)
    intervals = max(2, int(np.ceil(s / sc.dt)))
    intervals += intervals % 2
    taus = t + np.linspace(0.0, s, intervals + 1)
    w = simpson_weights(intervals + 1, s / intervals)
    return w @ np.array([sc.u(tau) for tau in taus])


def closed_form_phi(sc: Scenario, t: float, s: float) -> TransitionMatrix:
    if s < 0:
        raise ValueError("offset s must be non-negative")
    n, d = sc.n, sc.state_dim
    disp = velocity_primitive(sc, t, s)
    phi = np.eye(d)
    if not sc.bias_enabled:
        phi[n, :n] = disp
        return TransitionMatrix(t, s, phi)
    phi[:n, n:2 * n] = s * np.eye(n)
    phi[2 * n, :n] = disp
    phi[2 * n, n:2 * n] = s * (disp - sc.beacons.center)
    phi[2 * n, 2 * n + 1] = s
    phi[2 * n, 2 * n + 2] = 0.5 * s * s
    phi[2 * n + 1, n:2 * n] = disp
    phi[2 * n + 1, 2 * n + 2] = s
    return TransitionMatrix(t, s, phi)


def m_matrix(sc: Scenario, t: float) -> np.ndarray:
    """Closed-form stack [N_0; N_1; first row of N_2] for the lifted system."""
    b, n, l = sc.beacons, sc.n, sc.beacons.l
    u, du = sc.u(t), sc.du(t)
    if not sc.bias_enabled:
        M = np.zeros((l + 3, n + 1))
        M[0, n] = 1.0
        M[1:l + 1, :n] = b.DZt
        M[l + 1, :n] = u
        M[l + 2, :n] = du
        return M
    M = np.zeros((2 * l + 3, 2 * n + 3))
    M[0, 2 * n] = 1.0
    M[1:l + 1, :n] = b.DZt
    M[l + 1, :n] = u
    M[l + 1, n:2 * n] = -b.center
    M[l + 1, 2 * n + 1] = 1.0
    M[l + 2:2 * l + 2, n:2 * n] = b.DZt
    M[2 * l + 2, :n] = du
    M[2 * l + 2, n:2 * n] = 2.0 * u
    M[2 * l + 2, 2 * n + 2] = 1.0
    return M


def build_M(sc: Scenario) -> MatrixFn:
    l = sc.beacons.l
    rows = 2 * l + 3 if sc.bias_enabled else l + 3
    return MatrixFn((rows, sc.state_dim), lambda t: m_matrix(sc, t))


def chain_selection(sc: Scenario) -> list[tuple[int, int]]:
    """(level, row) pairs of the N_k chain that make up ``build_M``."""
    l = sc.beacons.l
    if sc.bias_enabled:
        return [(0, r) for r in range(l + 1)] + [(1, r) for r in range(l + 1)] + [(2, 0)]
    return [(0, r) for r in range(l + 1)] + [(1, 0), (2, 0)]


def mphi_expansion(sc: Scenario, t: float, s: float, x) -> np.ndarray:
    """Componentwise expansion of M(t+s) Phi(t+s, t) x for the biased system."""
    if not sc.bias_enabled:
        raise ValueError("expansion is defined for the bias-enabled system")
    n, b = sc.n, sc.beacons
    x = np.asarray(x, dtype=float)
    x1, x2, x3, x4, x5 = x[:n], x[n:2 * n], x[2 * n], x[2 * n + 1], x[2 * n + 2]
    disp = velocity_primitive(sc, t, s)
    dts = s * (disp - b.center)
    u, du = sc.u(t + s), sc.du(t + s)
    return np.concatenate([
        [disp @ x1 + dts @ x2 + x3 + s * x4 + 0.5 * s * s * x5],
        b.DZt @ (x1 + s * x2),
        [u @ (x1 + s * x2) - b.center @ x2 + disp @ x2 + x4 + s * x5],
        b.DZt @ x2,
        [du @ (x1 + s * x2) + 2.0 * u @ x2 + x5],
    ])


# persistent excitation and the observability verdict

@dataclass(frozen=True)
class PeReport:
    delta: float
    windows: list
    matrices: list
    min_eigs: list
    mu: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "mu": self.mu,
            "passed": self.passed,
            "windows": [
                {"t": t, "min_eig": e, "matrix": m.tolist()}
                for t, e, m in zip(self.windows, self.min_eigs, self.matrices)
            ],
        }


def excitation_matrix(sc: Scenario, t: float, nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Beacon geometry term plus the window-averaged du du^T."""
    taus = t + np.linspace(0.0, sc.delta, nodes)
    w = simpson_weights(nodes, sc.delta / (nodes - 1))
    acc = np.array([sc.du(tau) for tau in taus])
    acc = (acc * w[:, None]).T @ acc / sc.delta
    out = sc.beacons.geometry_matrix() + acc
    return 0.5 * (out + out.T)


def pe_check(sc: Scenario, t_grid: Sequence[float], nodes: int = DEFAULT_NODES,
             mu_tol: float = MU_TOL) -> PeReport:
    grid = [float(t) for t in t_grid]
    if not grid:
        raise ValueError("t_grid must not be empty")
    mats = [excitation_matrix(sc, t, nodes) for t in grid]
    eigs = [float(np.linalg.eigvalsh(m)[0]) for m in mats]
    mu = min(eigs)
    return PeReport(sc.delta, grid, mats, eigs, mu, mu >= mu_tol)


def default_grid(sc: Scenario, count: int = 10) -> list[float]:
    return np.linspace(0.0, sc.horizon, count).tolist()


def uo_verdict(sc: Scenario, t_grid: Sequence[float], nodes: int = DEFAULT_NODES,
               dt: float = DEFAULT_DT, floor: float = GRAMIAN_FLOOR, jobs: int = 1) -> dict:
    """PE verdict alongside Gramian scans with C and with the closed-form M."""
    pe = pe_check(sc, t_grid, nodes)
    sys = build_lifted_system(sc)
    c_scan = weakest_direction_scan(sys, t_grid, sc.delta, nodes, dt, jobs=jobs)
    m_scan = weakest_direction_scan(sys, t_grid, sc.delta, nodes, dt, M=build_M(sc), jobs=jobs)
    windows = []
    for t, pe_eig, cp, mp in zip(pe.windows, pe.min_eigs, c_scan, m_scan):
        windows.append({
            "t": t,
            "pe_min_eig": pe_eig,
            "gramian_min_eig": cp.min_eig,
            "extended_min_eig": mp.min_eig,
            "witness": cp.direction.tolist(),
            "implication_holds": (not pe.passed) or cp.min_eig >= floor,
        })
    gram_min = min(p.min_eig for p in c_scan)
    return {
        "scenario": sc.name,
        "delta": sc.delta,
        "pe_passed": pe.passed,
        "pe_mu": pe.mu,
        "gramian_min_eig": gram_min,
        "extended_min_eig": min(p.min_eig for p in m_scan),
        "floor": floor,
        "implication_holds": all(w["implication_holds"] for w in windows),
        "unobservable_suspected": gram_min <= UNOBSERVABLE_CEIL,
        "windows": windows,
    }


def position_null_direction(sc: Scenario, t: float = 0.0, nodes: int = DEFAULT_NODES,
                            dt: float = DEFAULT_DT):
    """Least observable pure-position perturbation and its Gramian quadratic form.

    A position offset v (other blocks zero) is invisible in the output over
    the window iff v^T W_pos v = 0, where W_pos is the position block of W.
    """
    rep = gramian(build_lifted_system(sc), t, sc.delta, nodes, dt)
    block = rep.W[:sc.n, :sc.n]
    vals, vecs = np.linalg.eigh(0.5 * (block + block.T))
    v = vecs[:, 0]
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v, float(vals[0])


def extended_gramian_for(sc: Scenario, t: float, nodes: int = DEFAULT_NODES, dt: float = DEFAULT_DT):
    return extended_gramian(build_lifted_system(sc), build_M(sc), t, sc.delta, nodes, dt)
