"""Controlled jump-diffusion simulation under semi-Markov regime switching.

State dynamics between events follow an Euler-Maruyama step; asset jumps
arrive on an independent Poisson clock with marks drawn from the jump
distribution, and every regime-event and jump-event time is inserted into
the time grid exactly, so coefficients switch at the true event times.
The jump integral is uncompensated: at a jump the state moves by
g(t, X(t-), u(t-), theta(t-), mark).

Coefficient call convention: callables receive a time array ``t`` of shape
(n,), states ``x`` of shape (n,) for scalar models or (n, r) otherwise,
controls and regime indices of shape (n,), and must broadcast over the
leading sample axis.  The per-path simulator and the vectorized ensemble
draw from identical per-path streams and produce bit-identical paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFinitePath
from .rng import stream
from .semi_markov import RegimeModel, RegimePath, RegimeState, simulate_regime_direct

__all__ = [
    "MarkMeasure", "ControlledDynamics", "ControlPolicy", "ObjectiveSpec",
    "SamplePath", "Ensemble", "simulate_controlled_path", "simulate_ensemble",
    "estimate_objective", "coefficient_regularity_probe", "RegularityReport",
]


# ---------------------------------------------------------------------------
# Mark measure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarkMeasure:
    """Jump rate plus mark distribution with a moment oracle.

    Discrete marks are given by (atoms, weights) and integrate exactly;
    continuous marks by a density on a bounded interval, integrated with
    Gauss-Legendre quadrature (>= 64 nodes).
    """

    rate: float
    atoms: np.ndarray | None = None
    weights: np.ndarray | None = None
    density: Callable[[np.ndarray], np.ndarray] | None = None
    support: tuple[float, float] | None = None
    quad_nodes: int = 64

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("jump rate must be positive")
        if self.atoms is not None:
            atoms = np.asarray(self.atoms, dtype=float)
            weights = np.asarray(self.weights, dtype=float)
            if abs(weights.sum() - 1.0) > 1e-12 or np.any(weights < 0):
                raise ValueError("discrete mark weights must sum to 1")
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "weights", weights)
        elif self.density is not None:
            if self.support is None:
                raise ValueError("continuous marks need a bounded support")
            if abs(self.integrate(lambda g: np.ones_like(g)) - 1.0) > 1e-8:
                raise ValueError("mark density must integrate to 1 on its support")
        else:
            raise ValueError("provide discrete atoms/weights or a density")

    @property
    def discrete(self) -> bool:
        return self.atoms is not None

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """Moment oracle: integral of f against the mark distribution pi."""
        if self.discrete:
            return float(np.sum(np.asarray(f(self.atoms), dtype=float) * self.weights))
        lo, hi = self.support
        nodes, w = np.polynomial.legendre.leggauss(max(self.quad_nodes, 64))
        g = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        vals = np.asarray(f(g), dtype=float) * np.asarray(self.density(g), dtype=float)
        return float(0.5 * (hi - lo) * np.sum(w * vals))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.discrete:
            return rng.choice(self.atoms, size=n, p=self.weights)
        # inverse-cdf via dense tabulation of the density
        lo, hi = self.support
        grid = np.linspace(lo, hi, 4097)
        pdf = np.asarray(self.density(grid), dtype=float)
        cdf = np.concatenate(([0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))))
        cdf /= cdf[-1]
        return np.interp(rng.random(n), cdf, grid)


# ---------------------------------------------------------------------------
# Dynamics, policies, objectives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlledDynamics:
    """Coefficient functions of the controlled SDE.

    ``drift``/``vol``/``jump`` have signatures (t, x, u, i) -> like x,
    with ``jump`` additionally taking the mark array as the last argument.
    For scalar models (dim == 1) all states are flat arrays and ``vol``
    returns the single diffusion coefficient; for dim > 1, x is (n, r),
    drift returns (n, r), vol returns (n, r, r) and jump (n, r).

    The ``*_dx`` fields are optional analytic x-derivatives with the same
    signatures; when present, Hamiltonian gradients use them instead of
    finite differences.
    """

    dim: int
    drift: Callable
    vol: Callable
    jump: Callable | None = None
    marks: MarkMeasure | None = None
    drift_dx: Callable | None = None
    vol_dx: Callable | None = None
    jump_dx: Callable | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("state dimension must be >= 1")
        if (self.jump is None) != (self.marks is None):
            raise ValueError("jump coefficient and mark measure go together")


@dataclass(frozen=True)
class ControlPolicy:
    """Markov control rule u(t, x, i, y), evaluated with left-limit arguments.

    ``control_set`` is an optional (lo, hi) box used by admissibility checks
    and Hamiltonian maximization; None means all of R^m.
    """

    rule: Callable
    control_set: tuple[float, float] | None = None


@dataclass(frozen=True)
class ObjectiveSpec:
    """Running cost f1(t, x, u, i, y) and terminal cost f2(x, i, y).

    ``running_dx``/``terminal_dx`` are optional analytic x-gradients.
    """

    running: Callable | None
    terminal: Callable | None
    running_dx: Callable | None = None
    terminal_dx: Callable | None = None


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

@dataclass
class SamplePath:
    """A simulated path on a grid containing every event time exactly.

    ``x`` has shape (N+1,) for scalar models, (N+1, r) otherwise; ``theta``
    and ``y`` are cadlag regime values at each node; ``u`` is the control in
    force on [t_k, t_{k+1}).  ``jumps`` lists (node index, mark).
    """

    t: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    y: np.ndarray
    u: np.ndarray
    jumps: list[tuple[int, float]]
    regime: RegimePath

    def to_csv_rows(self):
        for k in range(len(self.t)):
            yield (self.t[k], *np.atleast_1d(self.x[k]), self.theta[k],
                   self.y[k], *np.atleast_1d(self.u[k]))


@dataclass
class Ensemble:
    """Vectorized ensemble of paths on padded per-path grids.

    Columns beyond a path's own grid repeat the final node with zero-length
    steps, so reductions over columns are safe without masking.
    """

    t: np.ndarray           # (n, K)
    x: np.ndarray           # (n, K) or (n, K, r)
    theta: np.ndarray       # (n, K) int
    y: np.ndarray           # (n, K)
    u: np.ndarray           # (n, K) or (n, K, m)
    dW: np.ndarray          # (n, K-1) or (n, K-1, r) Brownian increments
    jump_mask: np.ndarray   # (n, K) bool: asset jump applied at this node
    jump_marks: np.ndarray  # (n, K) mark value where jump_mask (else 0)
    horizon: float
    regime_paths: list[RegimePath]

    @property
    def n_paths(self) -> int:
        return self.t.shape[0]

    def terminal_state(self):
        return self.x[:, -1]


# ---------------------------------------------------------------------------
# Per-path draw protocol (shared by scalar and ensemble simulators)
# ---------------------------------------------------------------------------

def _draw_jumps(dyn: ControlledDynamics, horizon: float,
                rng: np.random.Generator):
    if dyn.marks is None:
        return np.empty(0), np.empty(0)
    n = rng.poisson(dyn.marks.rate * horizon)
    times = np.sort(rng.uniform(0.0, horizon, size=n))
    marks = dyn.marks.sample(rng, n)
    return times, marks


def _build_grid(horizon: float, dt: float, regime: RegimePath,
                jump_times: np.ndarray) -> np.ndarray:
    base = np.linspace(0.0, horizon, int(round(horizon / dt)) + 1)
    events = np.array([t for t, _ in regime.events], dtype=float)
    grid = np.unique(np.concatenate((base, events, jump_times)))
    return grid[(grid >= 0.0) & (grid <= horizon)]


def _check_finite(x: np.ndarray, where: str, path_index=None, path=None):
    if not np.all(np.isfinite(x)):
        raise NonFinitePath(f"non-finite state during {where}",
                            path=path, path_index=path_index)


# ---------------------------------------------------------------------------
# Scalar (per-path) simulator
# ---------------------------------------------------------------------------

def simulate_controlled_path(dyn: ControlledDynamics, policy: ControlPolicy,
                             regime: RegimePath, x0, dt: float,
                             rng: np.random.Generator) -> SamplePath:
    """Euler-Maruyama path on the union of the base grid and all event times.

    Draw order from ``rng``: Poisson jump count, jump times, jump marks,
    then one standard-normal vector per step in grid order (this matches the
    ensemble simulator draw-for-draw).
    """
    horizon = regime.horizon
    jump_times, jump_marks = _draw_jumps(dyn, horizon, rng)
    grid = _build_grid(horizon, dt, regime, jump_times)
    N = len(grid) - 1
    scalar = dyn.dim == 1
    Z = rng.standard_normal(N) if scalar else rng.standard_normal((N, dyn.dim))

    jump_at = {float(tj): m for tj, m in zip(jump_times, jump_marks)}
    x0 = float(x0) if scalar else np.asarray(x0, dtype=float)

    xs = np.empty(N + 1) if scalar else np.empty((N + 1, dyn.dim))
    thetas = np.empty(N + 1, dtype=int)
    ys = np.empty(N + 1)
    us = np.empty(N + 1)
    jumps: list[tuple[int, float]] = []

    x = x0
    u_prev = None
    for k in range(N + 1):
        tk = grid[k]
        if tk in jump_at and u_prev is not None:
            th_l, y_l = regime.state_at(tk, side="left")
            mark = jump_at[tk]
            gval = _eval_jump(dyn, np.array([tk]), _wrap(x, scalar),
                              np.array([u_prev]), np.array([th_l]),
                              np.array([mark]))
            x = x + (gval[0] if scalar else gval[0])
            jumps.append((k, float(mark)))
        th, yy = regime.state_at(tk, side="right")
        uk = float(np.asarray(policy.rule(np.array([tk]), _wrap(x, scalar),
                                          np.array([th]), np.array([yy])))[0])
        xs[k], thetas[k], ys[k], us[k] = x, th, yy, uk
        if k == N:
            break
        delta = grid[k + 1] - tk
        b = _eval_drift(dyn, np.array([tk]), _wrap(x, scalar),
                        np.array([uk]), np.array([th]))[0]
        s = _eval_vol(dyn, np.array([tk]), _wrap(x, scalar),
                      np.array([uk]), np.array([th]))[0]
        if scalar:
            x = x + b * delta + s * np.sqrt(delta) * Z[k]
        else:
            x = x + b * delta + np.sqrt(delta) * (s @ Z[k])
        if not np.all(np.isfinite(np.atleast_1d(x))):
            trunc = SamplePath(grid[: k + 2], xs[: k + 2], thetas[: k + 2],
                               ys[: k + 2], us[: k + 2], jumps, regime)
            raise NonFinitePath(f"non-finite state at t={grid[k + 1]:.6g}",
                                path=trunc)
        u_prev = uk
    return SamplePath(grid, xs, thetas, ys, us, jumps, regime)


def _wrap(x, scalar: bool):
    return np.array([x]) if scalar else np.asarray(x, dtype=float)[None, :]


def _eval_drift(dyn, t, x, u, i):
    return np.asarray(dyn.drift(t, x, u, i), dtype=float)


def _eval_vol(dyn, t, x, u, i):
    return np.asarray(dyn.vol(t, x, u, i), dtype=float)


def _eval_jump(dyn, t, x, u, i, gamma):
    return np.asarray(dyn.jump(t, x, u, i, gamma), dtype=float)


# ---------------------------------------------------------------------------
# Vectorized ensemble simulator
# ---------------------------------------------------------------------------

def simulate_ensemble(dyn: ControlledDynamics, policy: ControlPolicy,
                      regime_paths: Sequence[RegimePath], x0, dt: float,
                      seed: int, stream_tag: str = "paths") -> Ensemble:
    """Simulate one path per regime path, vectorized across the ensemble.

    Path p draws from stream (seed, stream_tag, p) with the same protocol as
    :func:`simulate_controlled_path`, so results are independent of how the
    ensemble is scheduled, and two policies evaluated with the same seed see
    identical noise (shared-noise coupling).
    """
    n = len(regime_paths)
    horizon = regime_paths[0].horizon
    scalar = dyn.dim == 1
    grids, Zs, jump_infos = [], [], []
    for p, rp in enumerate(regime_paths):
        rng = stream(seed, stream_tag, p)
        jt, jm = _draw_jumps(dyn, horizon, rng)
        grid = _build_grid(horizon, dt, rp, jt)
        Nk = len(grid) - 1
        Z = rng.standard_normal(Nk) if scalar else rng.standard_normal((Nk, dyn.dim))
        grids.append(grid)
        Zs.append(Z)
        jump_infos.append((jt, jm))

    K = max(len(g) for g in grids)
    t = np.full((n, K), horizon)
    dW = np.zeros((n, K - 1)) if scalar else np.zeros((n, K - 1, dyn.dim))
    jump_mask = np.zeros((n, K), dtype=bool)
    jump_marks = np.zeros((n, K))
    theta = np.empty((n, K), dtype=int)
    y = np.empty((n, K))
    for p, (grid, Z, (jt, jm)) in enumerate(zip(grids, Zs, jump_infos)):
        L = len(grid)
        t[p, :L] = grid
        steps = np.sqrt(np.diff(grid))
        dW[p, : L - 1] = Z * steps if scalar else Z * steps[:, None]
        if jt.size:
            cols = np.searchsorted(grid, jt)
            jump_mask[p, cols] = True
            jump_marks[p, cols] = jm
        th, age = regime_paths[p].state_at(t[p], side="right")
        theta[p], y[p] = th, age
    dts = np.diff(t, axis=1)

    x = (np.full(n, float(x0)) if scalar
         else np.tile(np.asarray(x0, dtype=float), (n, 1)))
    xs = np.empty((n, K)) if scalar else np.empty((n, K, dyn.dim))
    us = np.empty((n, K))
    u_prev = np.zeros(n)
    for k in range(K):
        tk = t[:, k]
        jm_k = jump_mask[:, k]
        if k > 0 and jm_k.any():
            th_l, y_l = _left_limits(regime_paths, tk, jm_k)
            idx = np.nonzero(jm_k)[0]
            gval = _eval_jump(dyn, tk[idx], x[idx], u_prev[idx], th_l,
                              jump_marks[idx, k])
            x = x.copy()
            x[idx] = x[idx] + gval
        uk = np.asarray(policy.rule(tk, x, theta[:, k], y[:, k]), dtype=float)
        uk = np.broadcast_to(uk, (n,)).astype(float)
        xs[:, k], us[:, k] = x, uk
        if k == K - 1:
            break
        delta = dts[:, k]
        b = _eval_drift(dyn, tk, x, uk, theta[:, k])
        s = _eval_vol(dyn, tk, x, uk, theta[:, k])
        if scalar:
            x = x + b * delta + s * dW[:, k]
        else:
            x = x + b * delta[:, None] + np.einsum("nij,nj->ni", s, dW[:, k])
        if not np.all(np.isfinite(x)):
            finite = np.isfinite(x.reshape(n, -1)).all(axis=1)
            bad = int(np.nonzero(~finite)[0][0])
            raise NonFinitePath(
                f"non-finite state at column {k + 1} (t={t[bad, k + 1]:.6g})",
                path_index=bad)
        u_prev = uk
    return Ensemble(t=t, x=xs, theta=theta, y=y, u=us, dW=dW,
                    jump_mask=jump_mask, jump_marks=jump_marks,
                    horizon=horizon, regime_paths=list(regime_paths))


def _left_limits(regime_paths, tk, mask):
    idx = np.nonzero(mask)[0]
    th = np.empty(len(idx), dtype=int)
    yy = np.empty(len(idx))
    for j, p in enumerate(idx):
        th[j], yy[j] = regime_paths[p].state_at(float(tk[p]), side="left")
    return th, yy


# ---------------------------------------------------------------------------
# Objective estimation
# ---------------------------------------------------------------------------

def running_cost_paths(ens: Ensemble, objective: ObjectiveSpec) -> np.ndarray:
    """Per-path trapezoidal integral of the running cost on the path grid."""
    if objective.running is None:
        return np.zeros(ens.n_paths)
    vals = np.empty_like(ens.t)
    for k in range(ens.t.shape[1]):
        vals[:, k] = objective.running(ens.t[:, k], ens.x[:, k], ens.u[:, k],
                                       ens.theta[:, k], ens.y[:, k])
    dts = np.diff(ens.t, axis=1)
    return np.sum(0.5 * (vals[:, 1:] + vals[:, :-1]) * dts, axis=1)


def objective_paths(ens: Ensemble, objective: ObjectiveSpec) -> np.ndarray:
    """Per-path objective: running integral plus terminal cost."""
    J = running_cost_paths(ens, objective)
    if objective.terminal is not None:
        J = J + np.asarray(objective.terminal(ens.x[:, -1], ens.theta[:, -1],
                                              ens.y[:, -1]), dtype=float)
    return J


def estimate_objective(dyn: ControlledDynamics, policy: ControlPolicy,
                       objective: ObjectiveSpec, model: RegimeModel,
                       x0, i0: int, y0: float, horizon: float,
                       n_paths: int, dt: float, seed: int) -> tuple[float, float]:
    """Monte Carlo estimate of the performance criterion with standard error.

    Regime paths use streams (seed, "regime", p); state noise uses
    (seed, "paths", p).  The reduction order is fixed by path index.
    """
    if n_paths < 2:
        raise ValueError("need at least 2 paths for a standard error")
    origin = RegimeState(i0, y0)
    regime_paths = [simulate_regime_direct(model, origin, horizon,
                                           stream(seed, "regime", p))
                    for p in range(n_paths)]
    ens = simulate_ensemble(dyn, policy, regime_paths, x0, dt, seed)
    J = objective_paths(ens, objective)
    return float(np.mean(J)), float(np.std(J, ddof=1) / np.sqrt(n_paths))


# ---------------------------------------------------------------------------
# Regularity probe
# ---------------------------------------------------------------------------

@dataclass
class RegularityReport:
    """Empirical growth/Lipschitz constants with an unbounded-growth flag."""

    c1_hat: float
    c2_hat: float
    growth_flag: bool
    n_samples: int


def coefficient_regularity_probe(dyn: ControlledDynamics, x_box, n_samples: int,
                                 rng: np.random.Generator, u_box=(0.0, 0.0),
                                 t_range=(0.0, 1.0), states=None) -> RegularityReport:
    """Sample the coefficients and report empirical regularity constants.

    c1_hat is the largest observed (|sigma|^2 + |b|^2 + lam * int |g|^2 dpi)
    / (1 + |x|^2); c2_hat the largest squared difference ratio over point
    pairs.  The growth flag trips when the c1 ratio keeps increasing with
    the sample radius (outer-quartile max > 2x mid-quartile max).
    """
    if dyn.dim != 1:
        raise NotImplementedError("probe supports scalar models")
    states = np.arange(1) if states is None else np.asarray(states)
    lo, hi = x_box
    xs = rng.uniform(lo, hi, n_samples)
    ys_ = rng.uniform(lo, hi, n_samples)
    ts = rng.uniform(*t_range, n_samples)
    us = rng.uniform(*u_box, n_samples)
    ii = rng.choice(states, n_samples)

    def bulk(xv):
        b = _eval_drift(dyn, ts, xv, us, ii)
        s = _eval_vol(dyn, ts, xv, us, ii)
        out = np.asarray(b, dtype=float) ** 2 + np.asarray(s, dtype=float) ** 2
        if dyn.jump is not None:
            jm = np.empty(n_samples)
            for k in range(n_samples):
                jm[k] = dyn.marks.integrate(
                    lambda g: np.asarray(dyn.jump(ts[k:k + 1], xv[k:k + 1],
                                                  us[k:k + 1], ii[k:k + 1],
                                                  g), dtype=float).ravel() ** 2)
            out = out + dyn.marks.rate * jm
        return out

    num = bulk(xs)
    ratio1 = num / (1.0 + xs ** 2)
    c1 = float(ratio1.max())

    bx = _eval_drift(dyn, ts, xs, us, ii)
    by = _eval_drift(dyn, ts, ys_, us, ii)
    sx = _eval_vol(dyn, ts, xs, us, ii)
    sy = _eval_vol(dyn, ts, ys_, us, ii)
    d2 = (np.asarray(bx) - np.asarray(by)) ** 2 + (np.asarray(sx) - np.asarray(sy)) ** 2
    if dyn.jump is not None:
        jm = np.empty(n_samples)
        for k in range(n_samples):
            jm[k] = dyn.marks.integrate(
                lambda g: (np.asarray(dyn.jump(ts[k:k + 1], xs[k:k + 1], us[k:k + 1], ii[k:k + 1], g), dtype=float).ravel()
                           - np.asarray(dyn.jump(ts[k:k + 1], ys_[k:k + 1], us[k:k + 1], ii[k:k + 1], g), dtype=float).ravel()) ** 2)
        d2 = d2 + dyn.marks.rate * jm
    dx2 = (xs - ys_) ** 2
    keep = dx2 > 1e-16
    c2 = float(np.max(d2[keep] / dx2[keep])) if keep.any() else 0.0

    r = np.abs(xs)
    q = np.quantile(r, [0.25, 0.5, 0.75])
    mid = ratio1[(r >= q[0]) & (r <= q[1])]
    outer = ratio1[r >= q[2]]
    growth = bool(mid.size and outer.size
                  and outer.max() > 2.0 * max(mid.max(), 1e-300))
    return RegularityReport(c1_hat=c1, c2_hat=c2, growth_flag=growth,
                            n_samples=n_samples)
