"""Hamiltonian evaluation, adjoint-equation residuals, and the joint generator.

The Hamiltonian pairs running cost, drift, diffusion, and jump coefficients
with adjoint variables (p, q, eta):

    H = f1 + (b' - lam * int g' dpi) p + tr(sigma' q) + lam * int g' eta dpi

with all mark integrals taken by the mark measure's moment oracle (``lam``
is the jump rate; the integrals reduce to the plain pi-moments at unit
rate).  The adjoint backward equation reads

    dp = -grad_x H dt + q' dW + compensated asset-jump terms (eta)
                            + compensated regime-jump terms (eta-tilde),
    p(T) = grad_x f2.

``adjoint_residual`` measures how well a candidate adjoint satisfies the
discrete version of this equation along simulated paths; closed-form
adjoints from the worked examples and value-function-induced adjoints are
both fed through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import UnboundedHamiltonian
from .jump_diffusion import (ControlledDynamics, Ensemble, ObjectiveSpec,
                             simulate_ensemble)
from .semi_markov import RegimeModel, RegimeState, hazard_rate, simulate_regime_direct
from .rng import stream

__all__ = [
    "AdjointState", "AdjointPath", "ValueFunctionStub", "hamiltonian",
    "grad_x_hamiltonian", "argmax_hamiltonian", "ArgmaxResult",
    "adjoint_residual", "ResidualStats", "integrability_report",
    "IntegrabilityReport", "generator_G", "dynkin_check", "hjb_residual",
    "hjb_terminal_mismatch", "adjoint_from_value",
]


# ---------------------------------------------------------------------------
# Adjoint containers
# ---------------------------------------------------------------------------

@dataclass
class AdjointState:
    """Pointwise adjoint variables (scalar state shown; vectors broadcast).

    ``eta`` maps a mark array to adjoint jump values (asset-jump slot);
    ``eta_tilde`` maps a target regime index to the regime-jump value.
    Either may be None when the corresponding jumps are absent.
    """

    p: float | np.ndarray
    q: float | np.ndarray
    eta: Callable[[np.ndarray], np.ndarray] | None = None
    eta_tilde: Callable[[int], float] | None = None


@dataclass
class AdjointPath:
    """Adjoint variables along an ensemble, ready for residual evaluation.

    All step-indexed arrays have shape (n_paths, K-1) and are evaluated at
    the left node of each step; ``p`` has shape (n_paths, K).

    eta_jump / etatilde_jump hold the adjoint jump integrand at the events
    realized at the right node of each step (0 where no event);
    eta_comp / etatilde_comp hold the corresponding compensator rates
    (lam * int eta dpi and sum_j lam_ij(y) eta_tilde_j).  ``grad_H`` is the
    x-gradient of the Hamiltonian at the left nodes; when None the residual
    evaluator computes it numerically.  The *_sq_comp arrays are second
    moments used by the integrability report.
    """

    p: np.ndarray
    q: np.ndarray
    eta_jump: np.ndarray | None = None
    eta_comp: np.ndarray | None = None
    etatilde_jump: np.ndarray | None = None
    etatilde_comp: np.ndarray | None = None
    grad_H: np.ndarray | None = None
    eta_sq_comp: np.ndarray | None = None
    etatilde_sq_comp: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def _as_arrays(t, x, u, i, y):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    i = np.atleast_1d(np.asarray(i, dtype=int))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = max(a.shape[0] for a in (t, x, u, i, y))
    bc = lambda a: np.broadcast_to(a, (n,)).copy()
    return bc(t), bc(x), bc(u), bc(i), bc(y)


def hamiltonian(t, x, u, i, y, adj: AdjointState, dyn: ControlledDynamics,
                objective: ObjectiveSpec | None = None) -> float:
    """Evaluate the Hamiltonian at a point (scalar state dimension).

    With zero jump coefficient this reduces to f1 + b p + sigma q.
    """
    if dyn.dim != 1:
        raise NotImplementedError("pointwise Hamiltonian implemented for scalar state")
    ta, xa, ua, ia, ya = _as_arrays(t, x, u, i, y)
    f1 = 0.0
    if objective is not None and objective.running is not None:
        f1 = float(np.asarray(objective.running(ta, xa, ua, ia, ya))[0])
    b = float(np.asarray(dyn.drift(ta, xa, ua, ia))[0])
    s = float(np.asarray(dyn.vol(ta, xa, ua, ia))[0])
    val = f1 + b * _scal(adj.p) + s * _scal(adj.q)
    if dyn.jump is not None:
        lam = dyn.marks.rate
        g_of = lambda gam: np.asarray(
            dyn.jump(np.full_like(gam, ta[0]), np.full_like(gam, xa[0]),
                     np.full_like(gam, ua[0]), np.full(gam.shape, ia[0], dtype=int),
                     gam), dtype=float)
        m_g = dyn.marks.integrate(lambda gam: g_of(gam))
        val -= lam * m_g * _scal(adj.p)
        if adj.eta is not None:
            val += lam * dyn.marks.integrate(
                lambda gam: g_of(gam) * np.asarray(adj.eta(gam), dtype=float))
    return val


def _scal(v) -> float:
    return float(np.asarray(v, dtype=float).reshape(-1)[0])


def grad_x_hamiltonian(t, x, u, i, y, adj: AdjointState, dyn: ControlledDynamics,
                       objective: ObjectiveSpec | None = None,
                       mode: str = "auto") -> float:
    """x-gradient of the Hamiltonian.

    mode="analytic" uses coefficient derivative callables attached to the
    dynamics/objective (``drift_dx``, ``vol_dx``, ``jump_dx``,
    ``running_dx`` attributes); mode="fd" central differences with step
    1e-5 * (1 + |x|); "auto" prefers analytic when available.
    """
    have_analytic = all(
        getattr(dyn, name, None) is not None or coeff is None
        for name, coeff in (("drift_dx", dyn.drift), ("vol_dx", dyn.vol),
                            ("jump_dx", dyn.jump)))
    if objective is not None and objective.running is not None:
        have_analytic = have_analytic and getattr(objective, "running_dx", None) is not None
    if mode == "analytic" or (mode == "auto" and have_analytic):
        return _grad_analytic(t, x, u, i, y, adj, dyn, objective)
    h = 1e-5 * (1.0 + abs(float(x)))
    up = hamiltonian(t, float(x) + h, u, i, y, adj, dyn, objective)
    dn = hamiltonian(t, float(x) - h, u, i, y, adj, dyn, objective)
    return (up - dn) / (2 * h)


def _grad_analytic(t, x, u, i, y, adj, dyn, objective) -> float:
    ta, xa, ua, ia, ya = _as_arrays(t, x, u, i, y)
    val = 0.0
    if objective is not None and objective.running is not None:
        val += float(np.asarray(objective.running_dx(ta, xa, ua, ia, ya))[0])
    val += float(np.asarray(dyn.drift_dx(ta, xa, ua, ia))[0]) * _scal(adj.p)
    val += float(np.asarray(dyn.vol_dx(ta, xa, ua, ia))[0]) * _scal(adj.q)
    if dyn.jump is not None:
        lam = dyn.marks.rate
        gx_of = lambda gam: np.asarray(
            dyn.jump_dx(np.full_like(gam, ta[0]), np.full_like(gam, xa[0]),
                        np.full_like(gam, ua[0]),
                        np.full(gam.shape, ia[0], dtype=int), gam), dtype=float)
        val -= lam * dyn.marks.integrate(gx_of) * _scal(adj.p)
        if adj.eta is not None:
            val += lam * dyn.marks.integrate(
                lambda gam: gx_of(gam) * np.asarray(adj.eta(gam), dtype=float))
    return val


@dataclass
class ArgmaxResult:
    """Outcome of Hamiltonian maximization over the control set.

    mode is "interior" for a proper maximizer, "stationary-line" when the
    Hamiltonian is constant in u (linear with vanishing slope) and every
    control is stationary; ``u_coefficient`` reports the detected linear
    slope in u.
    """

    u_star: float | None
    h_star: float
    mode: str
    u_coefficient: float


def argmax_hamiltonian(t, x, i, y, adj: AdjointState, dyn: ControlledDynamics,
                       objective: ObjectiveSpec | None,
                       control_set: tuple[float, float] | None,
                       stationarity: bool = False) -> ArgmaxResult:
    """Maximize u -> H(t, x, u, ...) over a box, or detect the linear case.

    Unbounded linear-in-u Hamiltonians raise UnboundedHamiltonian unless
    ``stationarity`` is set, in which case a vanishing u-coefficient is
    reported as a whole-line stationary set (the first-order convention
    used by the worked examples).
    """
    fun = lambda uu: hamiltonian(t, x, uu, i, y, adj, dyn, objective)
    # probe curvature on a symmetric stencil
    scale = 1.0 + abs(float(x))
    h0, hp, hm = fun(0.0), fun(scale), fun(-scale)
    slope = (hp - hm) / (2 * scale)
    curv = (hp - 2 * h0 + hm) / scale ** 2
    h2p, h2m = fun(2 * scale), fun(-2 * scale)
    cubic_dev = abs(h2p - 2 * hp + 2 * hm - h2m)
    linear = abs(curv) * scale ** 2 <= 1e-10 * (1 + abs(h0)) and cubic_dev <= 1e-8 * (1 + abs(h0))
    if linear:
        if abs(slope) <= 1e-10 * (1 + abs(h0) / scale):
            return ArgmaxResult(None, h0, "stationary-line", float(slope))
        if control_set is None:
            raise UnboundedHamiltonian(
                f"Hamiltonian is linear in u with slope {slope:.3g} on an "
                "unbounded control set")
        u_star = control_set[1] if slope > 0 else control_set[0]
        return ArgmaxResult(float(u_star), fun(u_star), "interior", float(slope))
    if control_set is None:
        if curv < 0:
            # concave: polish the stationary point from the quadratic fit
            u0 = -slope / curv if curv != 0 else 0.0
            res = minimize_scalar(lambda uu: -fun(uu),
                                  bracket=(u0 - scale, u0, u0 + scale))
            return ArgmaxResult(float(res.x), float(-res.fun), "interior", float(slope))
        raise UnboundedHamiltonian("Hamiltonian not concave on an unbounded control set")
    lo, hi = control_set
    grid = np.linspace(lo, hi, 33)
    vals = np.array([fun(g) for g in grid])
    k = int(np.argmax(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(lambda uu: -fun(uu), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-10})
    return ArgmaxResult(float(res.x), float(-res.fun), "interior", float(slope))


# ---------------------------------------------------------------------------
# Adjoint residual along paths
# ---------------------------------------------------------------------------

@dataclass
class ResidualStats:
    """Discrete BSDE residual summary.

    ``mean_path_total`` is the mean over paths of |sum_k R_k| (the statistic
    used for discretization-order checks); ``mean_step`` / ``max_step`` are
    per-step magnitudes; ``terminal_mismatch`` is the mean |p(T) - grad f2|.
    """

    mean_path_total: float
    mean_step: float
    max_step: float
    terminal_mismatch: float

    def to_dict(self):
        return {"mean_path_total": self.mean_path_total,
                "mean_step": self.mean_step, "max_step": self.max_step,
                "terminal_mismatch": self.terminal_mismatch}


def adjoint_residual(ens: Ensemble, adj: AdjointPath, dyn: ControlledDynamics,
                     objective: ObjectiveSpec | None = None,
                     terminal_grad: Callable | None = None) -> ResidualStats:
    """Per-step residuals of the discrete adjoint equation along an ensemble.

    R_k = p_{k+1} - p_k - [ -grad_H_k dt_k + q_k dW_k
                            + eta-jump terms against compensated asset jumps
                            + eta-tilde terms against compensated regime jumps ].

    ``terminal_grad(x, i, y)`` evaluates grad_x f2 for the terminal check;
    when omitted it is taken from ``objective.terminal`` by central
    difference.
    """
    dts = np.diff(ens.t, axis=1)
    grad_H = adj.grad_H
    if grad_H is None:
        raise ValueError("AdjointPath.grad_H is required (closed-form builders "
                         "and adjoint_from_value supply it)")
    incr = -grad_H * dts + adj.q[:, :-1] * ens.dW
    zeros = np.zeros_like(dts)
    for jump, comp in ((adj.eta_jump, adj.eta_comp),
                       (adj.etatilde_jump, adj.etatilde_comp)):
        incr = incr + (jump if jump is not None else zeros)
        incr = incr - (comp if comp is not None else zeros) * dts
    R = np.diff(adj.p, axis=1) - incr
    real = dts > 0
    mean_step = float(np.mean(np.abs(R[real]))) if real.any() else 0.0
    max_step = float(np.max(np.abs(R[real]))) if real.any() else 0.0
    total = np.sum(np.where(real | (np.abs(R) > 0), R, 0.0), axis=1)
    if terminal_grad is not None:
        pT_target = np.asarray(terminal_grad(ens.x[:, -1], ens.theta[:, -1],
                                             ens.y[:, -1]), dtype=float)
    elif objective is not None and objective.terminal_dx is not None:
        pT_target = np.asarray(objective.terminal_dx(ens.x[:, -1], ens.theta[:, -1],
                                                     ens.y[:, -1]), dtype=float)
    elif objective is not None and objective.terminal is not None:
        h = 1e-6 * (1.0 + np.abs(ens.x[:, -1]))
        pT_target = (np.asarray(objective.terminal(ens.x[:, -1] + h, ens.theta[:, -1], ens.y[:, -1]), dtype=float)
                     - np.asarray(objective.terminal(ens.x[:, -1] - h, ens.theta[:, -1], ens.y[:, -1]), dtype=float)) / (2 * h)
    else:
        pT_target = adj.p[:, -1]
    term = float(np.mean(np.abs(adj.p[:, -1] - pT_target)))
    return ResidualStats(mean_path_total=float(np.mean(np.abs(total))),
                         mean_step=mean_step, max_step=max_step,
                         terminal_mismatch=term)


# ---------------------------------------------------------------------------
# Integrability report (Theorem-style moment conditions)
# ---------------------------------------------------------------------------

@dataclass
class IntegrabilityReport:
    """Monte Carlo estimates of the four time-integrated second moments.

    ``estimates[k]`` matches condition index k+1; ``diverging`` lists the
    condition indices whose estimate keeps growing with the path count.
    """

    estimates: list[float]
    diverging: list[int]

    def to_dict(self):
        return {"estimates": self.estimates, "diverging": self.diverging}


def integrability_report(ens_hat: Ensemble, ens_alt: Ensemble,
                         adj: AdjointPath, dyn: ControlledDynamics) -> IntegrabilityReport:
    """Estimate the four adjoint integrability moments for (candidate, alt).

    Both ensembles must be coupled (same grids).  Divergence is flagged when
    the estimate from the full ensemble exceeds twice the estimate from the
    first half.
    """
    dts = np.diff(ens_hat.t, axis=1)
    dx = ens_hat.x - ens_alt.x
    s_hat = _vol_nodes(dyn, ens_hat)
    s_alt = _vol_nodes(dyn, ens_alt)
    terms = [
        ((s_hat - s_alt)[:, :-1] * adj.p[:, :-1]) ** 2,
        (adj.q[:, :-1] * dx[:, :-1]) ** 2,
        (dx[:, :-1] ** 2) * (adj.eta_sq_comp if adj.eta_sq_comp is not None
                             else np.zeros_like(dts)),
        (dx[:, :-1] ** 2) * (adj.etatilde_sq_comp if adj.etatilde_sq_comp is not None
                             else np.zeros_like(dts)),
    ]
    n = ens_hat.n_paths
    estimates, diverging = [], []
    for k, integrand in enumerate(terms):
        per_path = np.sum(integrand * dts, axis=1)
        full = float(np.mean(per_path))
        half = float(np.mean(per_path[: max(n // 2, 1)]))
        estimates.append(full)
        if full > 2.0 * half + 1e-12 and full > 1e-9:
            diverging.append(k + 1)
    return IntegrabilityReport(estimates=estimates, diverging=diverging)


def _vol_nodes(dyn: ControlledDynamics, ens: Ensemble) -> np.ndarray:
    out = np.empty_like(ens.t)
    for k in range(ens.t.shape[1]):
        out[:, k] = dyn.vol(ens.t[:, k], ens.x[:, k], ens.u[:, k], ens.theta[:, k])
    return out


# ---------------------------------------------------------------------------
# Value-function stub, generator G, HJB
# ---------------------------------------------------------------------------

@dataclass
class ValueFunctionStub:
    """V(t, x, i, y) with derivatives, analytic or by central differences.

    All callables broadcast over arrays; ``i`` is an integer array.
    Finite-difference steps are relative (scaled by 1 + |argument|).
    """

    v: Callable
    dt: Callable | None = None
    dx: Callable | None = None
    dxx: Callable | None = None
    dy: Callable | None = None
    fd_step: float = 1e-5

    def _fd(self, which: str, t, x, i, y):
        h = self.fd_step
        if which == "t":
            step = h * (1.0 + np.abs(t))
            return (self.v(t + step, x, i, y) - self.v(t - step, x, i, y)) / (2 * step)
        if which == "x":
            step = h * (1.0 + np.abs(x))
            return (self.v(t, x + step, i, y) - self.v(t, x - step, i, y)) / (2 * step)
        if which == "xx":
            step = np.sqrt(h) * (1.0 + np.abs(x))
            return (self.v(t, x + step, i, y) - 2 * self.v(t, x, i, y)
                    + self.v(t, x - step, i, y)) / step ** 2
        step = h * (1.0 + np.abs(y))
        lo = np.minimum(step, y)  # stay inside y >= 0
        return (self.v(t, x, i, y + step) - self.v(t, x, i, y - lo)) / (step + lo)

    def v_t(self, t, x, i, y):
        return self.dt(t, x, i, y) if self.dt else self._fd("t", t, x, i, y)

    def v_x(self, t, x, i, y):
        return self.dx(t, x, i, y) if self.dx else self._fd("x", t, x, i, y)

    def v_xx(self, t, x, i, y):
        return self.dxx(t, x, i, y) if self.dxx else self._fd("xx", t, x, i, y)

    def v_y(self, t, x, i, y):
        return self.dy(t, x, i, y) if self.dy else self._fd("y", t, x, i, y)


def _hazard_by_state(model: RegimeModel, i_arr: np.ndarray, y_arr: np.ndarray):
    out = np.empty_like(y_arr, dtype=float)
    for s in range(model.n_states):
        mask = i_arr == s
        if mask.any():
            out[mask] = hazard_rate(model, s, y_arr[mask])
    return out


def _switch_term(model: RegimeModel, value_at, i_arr, y_arr, here):
    """hazard(i,y) * sum_{j!=i} kernel[i,j] (value_at(j) - here), vectorized."""
    haz = _hazard_by_state(model, i_arr, y_arr)
    acc = np.zeros_like(here, dtype=float)
    for s in range(model.n_states):
        mask = i_arr == s
        if not mask.any():
            continue
        for j in range(model.n_states):
            w = model.kernel[s, j]
            if j == s or w == 0.0:
                continue
            acc[mask] += w * (value_at(j, mask) - here[mask])
    return haz * acc


def generator_G(V: ValueFunctionStub, t, x, i, y, u, dyn: ControlledDynamics,
                model: RegimeModel):
    """Extended generator of (t, X, theta, Y) applied to V (scalar state).

    G V = V_t + 1/2 sigma^2 V_xx + b V_x + V_y
          + hazard(i,y) sum_j kernel[i,j] (V(t,x,j,0) - V(t,x,i,y))
          + lam int [V(t, x+g, i, y) - V(t, x, i, y)] dpi.

    Vectorizes over equally-shaped arrays; with exponential holding times
    and y-free V this reduces to the Markov-chain generator.
    """
    scalar_in = np.ndim(x) == 0 and np.ndim(t) == 0
    ta, xa, ua, ia, ya = _as_arrays(t, x, u, i, y)
    b = np.asarray(dyn.drift(ta, xa, ua, ia), dtype=float)
    s = np.asarray(dyn.vol(ta, xa, ua, ia), dtype=float)
    val = (np.asarray(V.v_t(ta, xa, ia, ya), dtype=float)
           + 0.5 * s ** 2 * np.asarray(V.v_xx(ta, xa, ia, ya), dtype=float)
           + b * np.asarray(V.v_x(ta, xa, ia, ya), dtype=float)
           + np.asarray(V.v_y(ta, xa, ia, ya), dtype=float))
    here = np.asarray(V.v(ta, xa, ia, ya), dtype=float)
    val = val + _switch_term(
        model,
        lambda j, mask: np.asarray(
            V.v(ta[mask], xa[mask], np.full(mask.sum(), j, dtype=int),
                np.zeros(mask.sum())), dtype=float),
        ia, ya, here)
    if dyn.jump is not None:
        lam = dyn.marks.rate
        jump_int = np.empty_like(here)
        for k in range(len(here)):
            def shifted(gam, k=k):
                xk = xa[k] + np.asarray(
                    dyn.jump(np.full_like(gam, ta[k]), np.full_like(gam, xa[k]),
                             np.full_like(gam, ua[k]),
                             np.full(gam.shape, ia[k], dtype=int), gam), dtype=float)
                return np.asarray(
                    V.v(np.full_like(gam, ta[k]), xk,
                        np.full(gam.shape, ia[k], dtype=int),
                        np.full_like(gam, ya[k])), dtype=float) - here[k]
            jump_int[k] = dyn.marks.integrate(shifted)
        val = val + lam * jump_int
    return float(val[0]) if scalar_in else val


def dynkin_check(V: ValueFunctionStub, dyn: ControlledDynamics, policy,
                 model: RegimeModel, x0, i0: int, y0: float, horizon: float,
                 n_paths: int, dt: float, seed: int):
    """Martingale certificate: E[V(end)] - V(start) vs E int G V dt.

    Returns (lhs, rhs, gap, se) where se combines the per-path variance of
    the full Dynkin statistic.
    """
    origin = RegimeState(i0, y0)
    paths = [simulate_regime_direct(model, origin, horizon, stream(seed, "regime", p))
             for p in range(n_paths)]
    ens = simulate_ensemble(dyn, policy, paths, x0, dt, seed)
    K = ens.t.shape[1]
    gv = np.empty_like(ens.t)
    for k in range(K):
        gv[:, k] = generator_G(V, ens.t[:, k], ens.x[:, k], ens.theta[:, k],
                               ens.y[:, k], ens.u[:, k], dyn, model)
    dts = np.diff(ens.t, axis=1)
    integral = np.sum(0.5 * (gv[:, 1:] + gv[:, :-1]) * dts, axis=1)
    v_end = np.asarray(V.v(ens.t[:, -1], ens.x[:, -1], ens.theta[:, -1],
                           ens.y[:, -1]), dtype=float)
    v_start = float(np.asarray(V.v(np.array([0.0]), np.atleast_1d(np.asarray(x0, dtype=float)),
                                   np.array([i0]), np.array([y0])), dtype=float)[0])
    stat = v_end - v_start - integral
    lhs = float(np.mean(v_end) - v_start)
    rhs = float(np.mean(integral))
    se = float(np.std(stat, ddof=1) / np.sqrt(n_paths))
    return lhs, rhs, float(np.mean(stat)), se


def hjb_residual(V: ValueFunctionStub, objective: ObjectiveSpec,
                 dyn: ControlledDynamics, model: RegimeModel, t, x, i, y,
                 control_set, forced_u: float | None = None) -> float:
    """Residual of dV/dt + sup_u { f1 + A^u V } at a point.

    ``forced_u`` pins the control (useful for deterministic test cases);
    otherwise the supremum is taken over the control box by scalar search.
    """
    def total(u):
        f1 = 0.0
        if objective.running is not None:
            ta, xa, ua, ia, ya = _as_arrays(t, x, u, i, y)
            f1 = float(np.asarray(objective.running(ta, xa, ua, ia, ya))[0])
        return f1 + generator_G(V, t, x, i, y, u, dyn, model)

    if forced_u is not None:
        return total(forced_u)
    if control_set is None:
        raise UnboundedHamiltonian("supremum over an unbounded control set; "
                                   "provide a box or forced_u")
    lo, hi = control_set
    grid = np.linspace(lo, hi, 33)
    vals = [total(g) for g in grid]
    k = int(np.argmax(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(lambda uu: -total(uu), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-12})
    return float(-res.fun)


def hjb_terminal_mismatch(V: ValueFunctionStub, objective: ObjectiveSpec,
                          horizon: float, x, i, y) -> float:
    """|V(T, x, i, y) - f2(x, i, y)| at the terminal time."""
    ta, xa, ua, ia, ya = _as_arrays(horizon, x, 0.0, i, y)
    vT = np.asarray(V.v(ta, xa, ia, ya), dtype=float)
    f2 = np.asarray(objective.terminal(xa, ia, ya), dtype=float)
    return float(np.max(np.abs(vT - f2)))


# ---------------------------------------------------------------------------
# Adjoint from a value function (dynamic-programming connection)
# ---------------------------------------------------------------------------

def adjoint_from_value(V: ValueFunctionStub, ens: Ensemble,
                       dyn: ControlledDynamics, model: RegimeModel,
                       objective: ObjectiveSpec | None = None,
                       eta_mode: str = "state-shift") -> AdjointPath:
    """Build the adjoint induced by a value function along an ensemble.

    p = V_x, q = sigma V_xx; the regime-jump slot is the V_x difference
    across the (state, age) event map; the asset-jump slot uses the V_x
    difference across the state shift x -> x + g (eta_mode="state-shift",
    the form consistent with the generalized Ito formula) or the cross-regime
    gradient difference (eta_mode="regime-difference").
    """
    t, x, th, y, u = ens.t, ens.x, ens.theta, ens.y, ens.u
    n, K = t.shape
    p = np.asarray(V.v_x(t, x, th, y), dtype=float)
    svals = _vol_nodes(dyn, ens)
    q = svals * np.asarray(V.v_xx(t, x, th, y), dtype=float)

    tl, xl, thl, yl, ul = (a[:, :-1] for a in (t, x, th, y, u))
    # regime-jump slot
    M = model.n_states
    etat_jump = np.zeros((n, K - 1))
    etat_comp = np.zeros((n, K - 1))
    etat_sq = np.zeros((n, K - 1))
    if M > 1:
        vx_to = np.empty((M, n, K - 1))
        for j in range(M):
            vx_to[j] = np.asarray(
                V.v_x(tl, xl, np.full_like(thl, j), np.zeros_like(yl)), dtype=float)
        vx_here = np.asarray(V.v_x(tl, xl, thl, yl), dtype=float)
        haz = np.empty_like(yl)
        for s in range(M):
            mask = thl == s
            if mask.any():
                haz[mask] = hazard_rate(model, s, yl[mask])
        for s in range(M):
            mask = thl == s
            if not mask.any():
                continue
            for j in range(M):
                w = model.kernel[s, j]
                if j == s or w == 0.0:
                    continue
                diff = vx_to[j][mask] - vx_here[mask]
                etat_comp[mask] += haz[mask] * w * diff
                etat_sq[mask] += haz[mask] * w * diff ** 2
        switched = th[:, 1:] != thl
        rows, cols = np.nonzero(switched)
        etat_jump[rows, cols] = (vx_to[th[rows, cols + 1], rows, cols]
                                 - vx_here[rows, cols])

    # asset-jump slot
    eta_jump = eta_comp = eta_sq = None
    eta_node_of = None
    if dyn.jump is not None:
        lam = dyn.marks.rate
        if eta_mode not in ("state-shift", "regime-difference"):
            raise ValueError(f"unknown eta_mode {eta_mode!r}")

        def eta_vals(gam_scalar):
            g = np.asarray(dyn.jump(tl, xl, ul, thl,
                                    np.full_like(tl, gam_scalar)), dtype=float)
            return (np.asarray(V.v_x(tl, xl + g, thl, yl), dtype=float)
                    - np.asarray(V.v_x(tl, xl, thl, yl), dtype=float))

        if eta_mode == "regime-difference":
            raise NotImplementedError(
                "regime-difference eta requires an explicit mark-to-regime map; "
                "see AdjointState.eta for the pointwise form")
        eta_jump = np.zeros((n, K - 1))
        jm = ens.jump_mask[:, 1:]
        rows, cols = np.nonzero(jm)
        for rr, cc in zip(rows, cols):
            g = float(np.asarray(dyn.jump(
                t[rr:rr + 1, cc], x[rr:rr + 1, cc], u[rr:rr + 1, cc],
                th[rr:rr + 1, cc], ens.jump_marks[rr:rr + 1, cc + 1]), dtype=float)[0])
            eta_jump[rr, cc] = (float(np.asarray(V.v_x(t[rr:rr + 1, cc], x[rr:rr + 1, cc] + g,
                                                       th[rr:rr + 1, cc], y[rr:rr + 1, cc]))[0])
                                - float(np.asarray(V.v_x(t[rr:rr + 1, cc], x[rr:rr + 1, cc],
                                                         th[rr:rr + 1, cc], y[rr:rr + 1, cc]))[0]))
        if dyn.marks.discrete:
            eta_comp = np.zeros((n, K - 1))
            eta_sq = np.zeros((n, K - 1))
            for atom, w in zip(dyn.marks.atoms, dyn.marks.weights):
                ev = eta_vals(float(atom))
                eta_comp += w * ev
                eta_sq += w * ev ** 2
            eta_comp *= lam
            eta_sq *= lam
        else:
            nodes, wts = np.polynomial.legendre.leggauss(64)
            lo_, hi_ = dyn.marks.support
            gg = 0.5 * (hi_ - lo_) * nodes + 0.5 * (hi_ + lo_)
            dens = np.asarray(dyn.marks.density(gg), dtype=float)
            eta_comp = np.zeros((n, K - 1))
            eta_sq = np.zeros((n, K - 1))
            for gk, wk, dk in zip(gg, wts, dens):
                ev = eta_vals(float(gk))
                eta_comp += 0.5 * (hi_ - lo_) * wk * dk * ev
                eta_sq += 0.5 * (hi_ - lo_) * wk * dk * ev ** 2
            eta_comp *= lam
            eta_sq *= lam

    grad_H = _grad_H_from_value(V, ens, dyn, objective, p, q)
    return AdjointPath(p=p, q=q, eta_jump=eta_jump, eta_comp=eta_comp,
                       etatilde_jump=etat_jump, etatilde_comp=etat_comp,
                       grad_H=grad_H, eta_sq_comp=eta_sq,
                       etatilde_sq_comp=etat_sq)


def _grad_H_from_value(V, ens, dyn, objective, p, q):
    """Vectorized central-difference x-gradient of H at left nodes, with
    (p, q, eta) frozen at their node values."""
    tl, xl, thl, yl, ul = (a[:, :-1] for a in (ens.t, ens.x, ens.theta,
                                               ens.y, ens.u))
    h = 1e-5 * (1.0 + np.abs(xl))

    def H_at(xv):
        val = np.zeros_like(xv)
        if objective is not None and objective.running is not None:
            val += np.asarray(objective.running(tl, xv, ul, thl, yl), dtype=float)
        val += np.asarray(dyn.drift(tl, xv, ul, thl), dtype=float) * p[:, :-1]
        val += np.asarray(dyn.vol(tl, xv, ul, thl), dtype=float) * q[:, :-1]
        if dyn.jump is not None:
            lam = dyn.marks.rate
            def for_mark(gam_scalar):
                g = np.asarray(dyn.jump(tl, xv, ul, thl,
                                        np.full_like(tl, gam_scalar)), dtype=float)
                eta = (np.asarray(V.v_x(tl, xl + g, thl, yl), dtype=float)
                       - np.asarray(V.v_x(tl, xl, thl, yl), dtype=float))
                return g * (eta - p[:, :-1])
            if dyn.marks.discrete:
                acc = np.zeros_like(xv)
                for atom, w in zip(dyn.marks.atoms, dyn.marks.weights):
                    acc += w * for_mark(float(atom))
            else:
                nodes, wts = np.polynomial.legendre.leggauss(64)
                lo_, hi_ = dyn.marks.support
                gg = 0.5 * (hi_ - lo_) * nodes + 0.5 * (hi_ + lo_)
                dens = np.asarray(dyn.marks.density(gg), dtype=float)
                acc = np.zeros_like(xv)
                for gk, wk, dk in zip(gg, wts, dens):
                    acc += 0.5 * (hi_ - lo_) * wk * dk * for_mark(float(gk))
            val += lam * acc
        return val

    return (H_at(xl + h) - H_at(xl - h)) / (2 * h)
