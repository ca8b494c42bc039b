"""Semi-Markov regime process: model, samplers, and joint generator.

A regime model is a finite state space, an embedded transition kernel with
zero diagonal, and one holding-time distribution per state.  The pair
(state, age-since-last-jump) is jointly Markov; its generator acts on
functions phi(state, age) as

    L phi(i, y) = d/dy phi(i, y)
                + hazard(i, y) * sum_{j != i} kernel[i, j] * (phi(j, 0) - phi(i, y))

where hazard(i, y) = f(y|i) / (1 - F(y|i)).

Two samplers are provided: a renewal-style direct sampler (draw a holding
time, then a target state) and a thinning sampler that realizes the driving
Poisson-measure representation with a declared hazard majorant.  They agree
in law; tests compare them with two-sample statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import AgeBeyondSupport, BoundViolation

_CDF_ONE = 1.0 - 1e-15
_INV_TOL = 1e-10  # absolute tolerance on the time axis for numeric inversion


# ---------------------------------------------------------------------------
# Holding-time distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentialHolding:
    """Exponential holding time with rate > 0 (constant hazard)."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"exponential rate must be > 0, got {self.rate}")

    def cdf(self, y):
        return -np.expm1(-self.rate * np.asarray(y, dtype=float))

    def pdf(self, y):
        return self.rate * np.exp(-self.rate * np.asarray(y, dtype=float))

    def hazard(self, y):
        return np.broadcast_to(self.rate, np.shape(y)).copy() if np.ndim(y) else self.rate

    def inverse_cdf(self, u):
        return -np.log1p(-np.asarray(u, dtype=float)) / self.rate

    def hazard_bound(self, window: float) -> float:
        return self.rate


@dataclass(frozen=True)
class WeibullHolding:
    """Weibull holding time with shape k > 0 and scale s > 0.

    Hazard is (k/s) (y/s)^(k-1): increasing for k > 1, constant for k = 1,
    unbounded at 0+ for k < 1 (thinning refuses k < 1).
    """

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("Weibull shape and scale must be > 0")

    def cdf(self, y):
        z = np.asarray(y, dtype=float) / self.scale
        return -np.expm1(-np.power(z, self.shape))

    def pdf(self, y):
        z = np.asarray(y, dtype=float) / self.scale
        k = self.shape
        return (k / self.scale) * np.power(z, k - 1) * np.exp(-np.power(z, k))

    def hazard(self, y):
        z = np.asarray(y, dtype=float) / self.scale
        return (self.shape / self.scale) * np.power(z, self.shape - 1)

    def inverse_cdf(self, u):
        return self.scale * np.power(-np.log1p(-np.asarray(u, dtype=float)),
                                     1.0 / self.shape)

    def hazard_bound(self, window: float) -> float:
        if self.shape < 1.0:
            raise BoundViolation(
                f"Weibull shape {self.shape} < 1 has unbounded hazard at 0+; "
                "thinning is unavailable for this distribution"
            )
        return float(self.hazard(window)) if self.shape > 1.0 else 1.0 / self.scale


@dataclass(frozen=True)
class CustomHolding:
    """User-supplied density/cdf pair with a declared hazard majorant.

    The majorant must dominate pdf/(1-cdf) on [0, window]; this is
    spot-checked on a grid at model construction.  Defective distributions
    (cdf never reaching 1) are allowed and simply produce no exit.
    """

    pdf: Callable[[float], float]
    cdf: Callable[[float], float]
    hazard_bound_value: float
    window: float

    def hazard(self, y):
        y_arr = np.asarray(y, dtype=float)
        f = np.asarray(self.pdf(y_arr), dtype=float)
        F = np.asarray(self.cdf(y_arr), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = f / (1.0 - F)
        return h

    def inverse_cdf(self, u):
        u_arr = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.empty_like(u_arr)
        for n, target in enumerate(u_arr):
            out[n] = self._invert_one(float(target))
        return out[0] if np.ndim(u) == 0 else out

    def _invert_one(self, target: float) -> float:
        if target <= 0.0:
            return 0.0
        hi = max(self.window, 1.0)
        for _ in range(200):
            if float(self.cdf(hi)) >= target:
                break
            hi *= 2.0
            if hi > 1e18:
                return np.inf  # defective: mass target never reached
        else:
            return np.inf
        return brentq(lambda y: float(self.cdf(y)) - target, 0.0, hi,
                      xtol=_INV_TOL)

    def hazard_bound(self, window: float) -> float:
        if window > self.window:
            raise BoundViolation(
                f"hazard bound declared on [0, {self.window}] but the "
                f"sampler needs [0, {window}]"
            )
        return self.hazard_bound_value


HoldingDistribution = ExponentialHolding | WeibullHolding | CustomHolding


# ---------------------------------------------------------------------------
# Model and path types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimeModel:
    """Finite-state semi-Markov law: kernel plus per-state holding times.

    Invariants checked at construction: rows of ``kernel`` sum to 1 within
    1e-12 with exact zero diagonal, the kernel is irreducible, and custom
    holding distributions respect their declared hazard bound on a spot grid.
    A single-state model (M=1, kernel [[0]]) is allowed as a degenerate case
    with no transitions.
    """

    kernel: np.ndarray
    holding: tuple[HoldingDistribution, ...]

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "holding", tuple(self.holding))
        M = kernel.shape[0]
        if kernel.shape != (M, M):
            raise ValueError("kernel must be square")
        if len(self.holding) != M:
            raise ValueError("need one holding distribution per state")
        if np.any(np.diag(kernel) != 0.0):
            raise ValueError("kernel diagonal must be exactly 0")
        if np.any(kernel < 0):
            raise ValueError("kernel entries must be nonnegative")
        if M > 1:
            rows = kernel.sum(axis=1)
            if np.any(np.abs(rows - 1.0) > 1e-12):
                raise ValueError(f"kernel rows must sum to 1, got {rows}")
            if not _irreducible(kernel):
                raise ValueError("kernel is not irreducible")
        for i, dist in enumerate(self.holding):
            if isinstance(dist, CustomHolding):
                _spot_check_bound(dist, i)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]


def _irreducible(kernel: np.ndarray) -> bool:
    adj = kernel > 0
    reach = np.eye(kernel.shape[0], dtype=bool)
    for _ in range(kernel.shape[0]):
        reach = reach | (reach @ adj)
    return bool(reach.all())


def _spot_check_bound(dist: CustomHolding, state: int, n_grid: int = 257) -> None:
    ys = np.linspace(0.0, dist.window, n_grid)[:-1]
    F = np.asarray(dist.cdf(ys), dtype=float)
    f = np.asarray(dist.pdf(ys), dtype=float)
    if np.any(f < -1e-12):
        raise ValueError(f"state {state}: density takes negative values")
    if np.any(np.diff(F) < -1e-12) or abs(float(dist.cdf(0.0))) > 1e-12:
        raise ValueError(f"state {state}: cdf must be nondecreasing with F(0)=0")
    ok = F < _CDF_ONE
    haz = np.where(ok, f / np.maximum(1.0 - F, 1e-300), 0.0)
    if np.any(haz > dist.hazard_bound_value * (1 + 1e-9)):
        raise ValueError(
            f"state {state}: declared hazard bound {dist.hazard_bound_value} "
            f"is exceeded on [0, {dist.window}] (max {haz.max():.6g})"
        )


@dataclass(frozen=True)
class RegimeState:
    """Current regime index (0-based) and age since the last regime jump."""

    theta: int
    y: float = 0.0

    def __post_init__(self):
        if self.y < 0:
            raise ValueError("age must be nonnegative")


@dataclass
class RegimePath:
    """Piecewise-constant regime trajectory on [0, horizon].

    ``events`` holds (jump time, new state) with strictly increasing times;
    the age grows at unit rate between events and resets to exactly 0 at
    each event.
    """

    events: list[tuple[float, int]]
    origin: RegimeState
    horizon: float
    _times: np.ndarray = field(init=False, repr=False)
    _states: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        times = np.array([t for t, _ in self.events], dtype=float)
        if times.size and (np.any(np.diff(times) <= 0) or times[0] <= 0
                           or times[-1] > self.horizon):
            raise ValueError("event times must be strictly increasing in (0, horizon]")
        states = np.array([s for _, s in self.events], dtype=int)
        prev = np.concatenate(([self.origin.theta], states[:-1]))
        if np.any(states == prev):
            raise ValueError("consecutive states must differ")
        self._times = times
        self._states = states

    def state_at(self, t, side: str = "left"):
        """Regime index and age at time t (vectorized).

        side="left" returns (theta(t-), Y(t-)); side="right" the cadlag value.
        """
        t_arr = np.asarray(t, dtype=float)
        if self._times.size == 0:
            theta = np.full(t_arr.shape, self.origin.theta, dtype=int)
            age = t_arr + self.origin.y
        else:
            idx = np.searchsorted(self._times, t_arr,
                                  side="left" if side == "left" else "right")
            theta = np.where(idx == 0, self.origin.theta,
                             self._states[np.maximum(idx - 1, 0)])
            last = np.where(idx == 0, -self.origin.y,
                            self._times[np.maximum(idx - 1, 0)])
            age = t_arr - last
        if np.ndim(t) == 0:
            return int(theta), float(age)
        return theta.astype(int), age

    def to_csv_rows(self) -> list[tuple[float, int]]:
        return [(t, s) for t, s in self.events]


# ---------------------------------------------------------------------------
# Hazard, intensity, holding-time sampling
# ---------------------------------------------------------------------------

def hazard_rate(model: RegimeModel, i: int, y):
    """Instantaneous exit rate f(y|i)/(1 - F(y|i)) from state i at age y.

    Vectorizes over y.  Raises AgeBeyondSupport where F(y|i) >= 1 - 1e-15.
    """
    dist = model.holding[i]
    y_arr = np.asarray(y, dtype=float)
    if isinstance(dist, (ExponentialHolding, WeibullHolding)):
        h = dist.hazard(y_arr)
    else:
        F = np.asarray(dist.cdf(y_arr), dtype=float)
        if np.any(F >= _CDF_ONE):
            bad = y_arr if np.ndim(y) == 0 else y_arr[F >= _CDF_ONE].min()
            raise AgeBeyondSupport(i, float(bad))
        h = dist.hazard(y_arr)
    h = np.asarray(h, dtype=float)
    if np.any(~np.isfinite(h)) or np.any(h < 0):
        raise AgeBeyondSupport(i, float(np.max(y_arr)))
    return float(h) if np.ndim(y) == 0 else h


def intensity_matrix(model: RegimeModel, y: float) -> np.ndarray:
    """Age-dependent intensity matrix: off-diagonals kernel[i,j]*hazard(i,y),
    diagonal chosen so every row sums to zero."""
    M = model.n_states
    Q = np.zeros((M, M))
    for i in range(M):
        h = hazard_rate(model, i, y)
        Q[i, :] = model.kernel[i, :] * h
        Q[i, i] = -Q[i].sum()
    return Q


def sample_holding_time(model: RegimeModel, i: int, rng: np.random.Generator,
                        age: float = 0.0) -> float:
    """Draw a holding time for state i, conditioned on survival to ``age``.

    Inverse-cdf for exponential/Weibull; bisection to 1e-10 for custom
    distributions.  With age > 0 the residual law
    (F(age+t) - F(age)) / (1 - F(age)) is sampled.
    """
    dist = model.holding[i]
    u = rng.random()
    if age == 0.0:
        tau = float(dist.inverse_cdf(u))
        return tau
    F_age = float(np.asarray(dist.cdf(age), dtype=float))
    if F_age >= _CDF_ONE:
        raise AgeBeyondSupport(i, age)
    target = F_age + u * (1.0 - F_age)
    return float(dist.inverse_cdf(target)) - age


def _next_state(model: RegimeModel, i: int, rng: np.random.Generator) -> int:
    return int(rng.choice(model.n_states, p=model.kernel[i]))


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def simulate_regime_direct(model: RegimeModel, origin: RegimeState,
                           horizon: float, rng: np.random.Generator) -> RegimePath:
    """Renewal-style sampler: alternate holding-time and kernel draws.

    The first holding time is drawn from the age-conditioned residual law
    when origin.y > 0.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    events: list[tuple[float, int]] = []
    t, i, age = 0.0, origin.theta, origin.y
    if model.n_states == 1:
        return RegimePath(events, origin, horizon)
    while True:
        tau = sample_holding_time(model, i, rng, age=age)
        t += tau
        if t >= horizon or not np.isfinite(t):
            break
        i = _next_state(model, i, rng)
        events.append((t, i))
        age = 0.0
    return RegimePath(events, origin, horizon)


def simulate_regime_thinning(model: RegimeModel, origin: RegimeState,
                             horizon: float, rng: np.random.Generator) -> RegimePath:
    """Poisson-measure sampler: propose at the majorant rate, accept by the
    hazard ratio, then pick the target state proportionally to the kernel row.

    Distributionally identical to the direct sampler; raises BoundViolation
    if a realized hazard exceeds the declared bound.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    events: list[tuple[float, int]] = []
    t, i, age = 0.0, origin.theta, origin.y
    if model.n_states == 1:
        return RegimePath(events, origin, horizon)
    window = horizon + origin.y
    bounds = [dist.hazard_bound(window) for dist in model.holding]
    while True:
        bound = bounds[i]
        if bound <= 0.0:
            break
        t += rng.exponential(1.0 / bound)
        if t >= horizon:
            break
        last = events[-1][0] if events else -origin.y
        age = t - last  # elapsed since the last event (origin carries age -origin.y)
        h = hazard_rate(model, i, age)
        if h > bound * (1 + 1e-12):
            raise BoundViolation(
                f"hazard {h:.6g} exceeds declared bound {bound:.6g} in state "
                f"{i} at age {age:.6g}"
            )
        if rng.random() < h / bound:
            i = _next_state(model, i, rng)
            events.append((t, i))
    return RegimePath(events, origin, horizon)


def simulate_ctmc(rates: Sequence[float], kernel: np.ndarray, origin: RegimeState,
                  horizon: float, rng: np.random.Generator) -> RegimePath:
    """Plain continuous-time Markov chain sampler (exponential waits).

    Independent code path used to cross-check the semi-Markov machinery in
    the exponential-holding special case.
    """
    events: list[tuple[float, int]] = []
    kernel = np.asarray(kernel, dtype=float)
    t, i = 0.0, origin.theta
    if kernel.shape[0] == 1:
        return RegimePath(events, origin, horizon)
    while True:
        t += rng.exponential(1.0 / rates[i])
        if t >= horizon:
            break
        i = int(rng.choice(kernel.shape[0], p=kernel[i]))
        events.append((t, i))
    return RegimePath(events, origin, horizon)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def apply_generator_L(model: RegimeModel, phi: Callable[[int, float], float],
                      i: int, y,
                      dphi_dy: Callable[[int, float], float] | None = None,
                      fd_step: float = 1e-6):
    """Generator of the joint (state, age) process applied to phi at (i, y).

    L phi = d phi/dy + hazard(i,y) * sum_{j != i} kernel[i,j] (phi(j,0) - phi(i,y))

    The age derivative is taken from ``dphi_dy`` when supplied, else by a
    central difference with step ``fd_step``.  Vectorizes over y when phi
    broadcasts.
    """
    y_arr = np.asarray(y, dtype=float)
    if dphi_dy is not None:
        dval = dphi_dy(i, y_arr)
    else:
        step = np.where(y_arr >= fd_step, fd_step, y_arr)  # stay inside y >= 0
        lo = np.asarray(phi(i, y_arr - step), dtype=float)
        hi = np.asarray(phi(i, y_arr + fd_step), dtype=float)
        dval = (hi - lo) / (fd_step + step)
    h = hazard_rate(model, i, y_arr)
    jump = 0.0
    phi_here = np.asarray(phi(i, y_arr), dtype=float)
    for j in range(model.n_states):
        if j == i or model.kernel[i, j] == 0.0:
            continue
        jump = jump + model.kernel[i, j] * (phi(j, 0.0) - phi_here)
    out = np.asarray(dval, dtype=float) + h * jump
    return float(out) if np.ndim(y) == 0 else out
