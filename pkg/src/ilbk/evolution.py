"""Space-homogeneous relaxation, entropy monitors and the periodic-slab transport demo.

In mass coordinates ``W_i f_i`` the conservative discrete operator is a Markov
generator (nonnegative off-diagonal entries, zero column sums, stationary
vector ``W M``). Its exponential is a stochastic matrix, so every convex
relative entropy decreases along the exact discrete flow, and the
``spectral-exponential`` integrator inherits that up to rounding.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ilbk.discretization import CartesianOperator, DiscreteOperator, write_matrix_file

log = logging.getLogger(__name__)

UNDERFLOW = 1e-13
TRACE_COLUMNS = ("t", "mass", "dist_H", "H_quadratic", "H_xlogx", "I")


class CFLError(ValueError):
    pass


class NegativeInputError(ValueError):
    pass


class InsufficientSamplesError(ValueError):
    pass


class NegativeDensityWarning(RuntimeWarning):
    pass


# --------------------------------------------------------------------------
# functionals


def _weights(op: DiscreteOperator) -> np.ndarray:
    return op.mass_factor * op.sqrt_w**2


def equilibrium_nodal(op: DiscreteOperator, mass: float | None = None) -> np.ndarray:
    """Nodal equilibrium, optionally rescaled to a given quadrature mass."""
    M = op.sqrt_m**2
    if mass is not None:
        M = M * (mass / op.mass(M))
    return M


def _xlogx_ratio(f, g):
    """``f ln(f/g)`` with ``0 ln 0 = 0``; ``+inf`` where ``f > 0 = g``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = f * (np.log(f) - np.log(g))
    out = np.where(f == 0, 0.0, out)
    return np.where((f > 0) & (g == 0), np.inf, out)


def entropy_functional(op: DiscreteOperator, f, M, phi: str = "quadratic") -> float:
    """``int M Phi(f/M) dv`` by the grid quadrature.

    Parameters
    ----------
    phi : {"quadratic", "xlogx"}
        ``(x-1)^2`` or ``x ln x``.
    """
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise NegativeInputError(f"entropy needs f >= 0 (min {f.min():.3e})")
    W = _weights(op)
    if phi == "quadratic":
        return float(np.sum(W * (f - M) ** 2 / M))
    if phi == "xlogx":
        return float(np.sum(W * _xlogx_ratio(f, M)))
    raise ValueError(f"unknown entropy {phi!r}")


def information(op: DiscreteOperator, f, g) -> float:
    """``int f ln f - f ln g``; ``+inf`` if ``g`` vanishes where ``f`` does not."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(f < 0) or np.any(g < 0):
        raise NegativeInputError("information needs nonnegative arguments")
    return float(np.sum(_weights(op) * _xlogx_ratio(f, g)))


def weighted_distance(op: DiscreteOperator, f, M) -> float:
    """``||f - M||_H`` with weight ``1/M``."""
    return math.sqrt(float(np.sum(_weights(op) * (f - M) ** 2 / M)))


# --------------------------------------------------------------------------
# traces


@dataclass
class EvolutionTrace:
    times: np.ndarray
    mass: np.ndarray
    dist_H: np.ndarray
    H_quadratic: np.ndarray
    H_xlogx: np.ndarray
    information: np.ndarray
    method: str
    final: np.ndarray
    states: np.ndarray | None = None
    fitted_rate: float | None = None
    info: dict = field(default_factory=dict)

    def columns(self) -> dict:
        return {"t": self.times, "mass": self.mass, "dist_H": self.dist_H,
                "H_quadratic": self.H_quadratic, "H_xlogx": self.H_xlogx,
                "I": self.information}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        cols = self.columns()
        for i in range(len(self.times)):
            w.writerow([repr(float(cols[c][i])) for c in TRACE_COLUMNS])
        return buf.getvalue()

    def mass_drift(self) -> float:
        return float(np.max(np.abs(self.mass - self.mass[0])) / abs(self.mass[0]))

    def monotone(self, name: str, rtol: float = 1e-12) -> bool:
        """True when the monitor never increases by more than ``rtol`` of its start value."""
        x = self.columns()[name]
        slack = rtol * max(abs(x[0]), np.finfo(float).tiny)
        return bool(np.all(np.diff(x) <= slack))

    def dump_final(self, path, op: DiscreteOperator, metadata: dict | None = None):
        """Final nodal state in the operator-cache float format."""
        n = op.grid.N if hasattr(op.grid, "N") else op.grid.Nr
        state = np.atleast_2d(self.final)
        write_matrix_file(path, state, n, op.grid.L, op.ctx.params, op.ctx.norm_C,
                          op.ctx.c_sigma, metadata)


def _monitors(op: DiscreteOperator, F: np.ndarray, M: np.ndarray) -> dict:
    """Monitors for the columns of ``F`` (nodes x samples)."""
    W = _weights(op)[:, None]
    Mc = M[:, None]
    mass = np.sum(W * F, axis=0)
    quad = np.sum(W * (F - Mc) ** 2 / Mc, axis=0)
    Fp = np.maximum(F, 0.0)
    xlx = np.sum(W * _xlogx_ratio(Fp, np.broadcast_to(Mc, F.shape)), axis=0)
    # for g = M the information coincides with H_xlogx; computed separately from
    # f ln f - f ln M so the two columns are independent quadratures
    with np.errstate(divide="ignore", invalid="ignore"):
        flnf = np.where(Fp > 0, Fp * np.log(Fp), 0.0)
    inf_ = np.sum(W * (flnf - Fp * np.log(Mc)), axis=0)
    return {"mass": mass, "dist_H": np.sqrt(quad), "H_quadratic": quad,
            "H_xlogx": xlx, "information": inf_}


class SpectralPropagator:
    """``exp(t T)`` through one dense symmetric eigendecomposition."""

    def __init__(self, op: DiscreteOperator):
        T = op.dense()
        lam, V = np.linalg.eigh(T)
        self.op = op
        self.lam = lam
        self.V = V

    def apply(self, x0, times) -> np.ndarray:
        c = self.V.T @ x0
        E = np.exp(np.outer(self.lam, np.asarray(times, dtype=float)))
        return self.V @ (E * c[:, None])

    def matrix(self, t: float) -> np.ndarray:
        return (self.V * np.exp(self.lam * t)) @ self.V.T


def max_stable_dt(op: DiscreteOperator) -> float:
    return 0.5 / float(np.max(op.sigma))


def _rk4(op: DiscreteOperator, x0, dt, n_steps, every, clamp):
    xs = [x0.copy()]
    x = x0.copy()
    negatives = []
    for k in range(1, n_steps + 1):
        k1 = op.matvec(x)
        k2 = op.matvec(x + 0.5 * dt * k1)
        k3 = op.matvec(x + 0.5 * dt * k2)
        k4 = op.matvec(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.any(x < 0):
            neg = x < 0
            negatives.append({"step": k, "count": int(neg.sum()), "min": float(x[neg].min())})
            if clamp:
                log.warning("rk4 step %d: clamped %d negative values (min %.3e)",
                            k, int(neg.sum()), float(x[neg].min()))
                x = np.where(neg, 0.0, x)
        if k % every == 0 or k == n_steps:
            xs.append(x.copy())
    return np.stack(xs, axis=1), negatives


def evolve_homogeneous(op: DiscreteOperator, f0, t_end: float, dt: float | None = None,
                       method: str = "spectral-exponential", n_samples: int = 200,
                       clamp: bool = False, keep_states: bool = False,
                       propagator: SpectralPropagator | None = None) -> EvolutionTrace:
    """Solve ``df/dt = Q(f)`` on the grid of ``op``.

    Parameters
    ----------
    op : DiscreteOperator
    f0 : array
        Nonnegative nodal values.
    t_end : float
    dt : float, optional
        Step for ``rk4`` (at most ``0.5 / max sigma``). Ignored by the exact
        integrator.
    method : {"spectral-exponential", "rk4"}
    n_samples : int
        Number of monitor intervals.
    clamp : bool
        For ``rk4`` only: zero negative values after a step. Each event is
        logged and recorded in ``trace.info["negative_events"]``.
    """
    f0 = np.asarray(f0, dtype=float)
    if f0.shape != (op.size,):
        raise ValueError(f"f0 must have shape ({op.size},)")
    if np.any(f0 < 0) or not np.all(np.isfinite(f0)):
        raise NegativeInputError("initial density must be finite and nonnegative")
    x0 = op.to_sym(f0)
    info = {}
    if method == "spectral-exponential":
        prop = propagator or SpectralPropagator(op)
        times = np.linspace(0.0, t_end, n_samples + 1)
        X = prop.apply(x0, times)
    elif method == "rk4":
        dt = dt if dt is not None else max_stable_dt(op)
        if dt > max_stable_dt(op) * (1 + 1e-12):
            raise CFLError(f"dt = {dt:.3e} exceeds 0.5/max sigma = {max_stable_dt(op):.3e}")
        n_steps = max(1, int(round(t_end / dt)))
        if abs(n_steps * dt - t_end) > 1e-9 * t_end:
            raise ValueError("t_end must be a multiple of dt")
        every = max(1, n_steps // n_samples)
        X, negatives = _rk4(op, x0, dt, n_steps, every, clamp)
        steps = list(range(0, n_steps + 1, every))
        if steps[-1] != n_steps:
            steps.append(n_steps)
        times = np.array(steps, dtype=float) * dt
        info["negative_events"] = negatives
        if negatives:
            warnings.warn(f"rk4 produced negative densities in {len(negatives)} steps"
                          + (" (clamped)" if clamp else ""), NegativeDensityWarning, stacklevel=2)
    else:
        raise ValueError(f"unknown method {method!r}")
    F = op.from_sym(X)
    M = equilibrium_nodal(op, op.mass(f0))
    mon = _monitors(op, F, M)
    info["min_value_rel"] = float(F.min() / F.max())
    return EvolutionTrace(times=times, mass=mon["mass"], dist_H=mon["dist_H"],
                          H_quadratic=mon["H_quadratic"], H_xlogx=mon["H_xlogx"],
                          information=mon["information"], method=method, final=F[:, -1].copy(),
                          states=F if keep_states else None, info=info)


def fit_decay_rate(trace, window=None) -> float:
    """Least-squares decay rate of ``log dist_H`` over ``window = (t_a, t_b)``.

    ``trace`` is an :class:`EvolutionTrace` or a ``(times, distances)`` pair.
    Without a window, the samples with ``1e-9 < d/d(0) < 1e-3`` are used.
    """
    if isinstance(trace, EvolutionTrace):
        t, d = trace.times, trace.dist_H
    else:
        t, d = (np.asarray(a, dtype=float) for a in trace)
    if window is None:
        rel = d / d[0]
        sel = (rel < 1e-3) & (rel > 1e-9) & (d > UNDERFLOW)
    else:
        sel = (t >= window[0]) & (t <= window[1])
        if np.any(d[sel] < UNDERFLOW):
            raise InsufficientSamplesError(
                f"window {window} reaches distances below {UNDERFLOW:g} (rounding floor)")
    if sel.sum() < 10:
        raise InsufficientSamplesError(f"need >= 10 samples in window, got {int(sel.sum())}")
    slope = np.polyfit(t[sel], np.log(d[sel]), 1)[0]
    rate = float(-slope)
    if isinstance(trace, EvolutionTrace):
        trace.fitted_rate = rate
    return rate


# --------------------------------------------------------------------------
# information contraction


def information_contraction_check(op: DiscreteOperator, f0, g0, t_end: float,
                                  n_samples: int = 100, tol: float = 1e-12):
    """Evolve ``f0`` and ``g0`` with one operator and track ``I(f(t) | g(t))``.

    Returns
    -------
    passed : bool
        ``I(t) <= I(0) + tol * max(1, I(0))`` at every sample.
    margin : float
        ``I(0) - max_{t > 0} I(t)``.
    values : ndarray
        ``I`` at the sample times.
    """
    f0 = np.asarray(f0, dtype=float)
    g0 = np.asarray(g0, dtype=float)
    mf, mg = op.mass(f0), op.mass(g0)
    if abs(mf - mg) > 1e-12 * max(abs(mf), abs(mg)):
        raise ValueError(f"f0 and g0 must have equal mass ({mf!r} vs {mg!r})")
    prop = SpectralPropagator(op)
    times = np.linspace(0.0, t_end, n_samples + 1)
    F = op.from_sym(prop.apply(op.to_sym(f0), times))
    G = op.from_sym(prop.apply(op.to_sym(g0), times))
    W = _weights(op)[:, None]
    vals = np.sum(W * _xlogx_ratio(np.maximum(F, 0.0), np.maximum(G, 0.0)), axis=0)
    slack = tol * max(1.0, abs(vals[0]))
    passed = bool(np.all(vals <= vals[0] + slack))
    margin = float(vals[0] - vals[1:].max()) if len(vals) > 1 else 0.0
    return passed, margin, vals


# --------------------------------------------------------------------------
# transport demo


@dataclass
class TransportState:
    """Periodic slab ``[0, 1)`` with ``Nx`` cells; ``f`` has shape ``(Nx, nodes)``."""

    f: np.ndarray
    dx: float

    @property
    def Nx(self) -> int:
        return self.f.shape[0]

    def total_mass(self, op: DiscreteOperator) -> float:
        return float(self.dx * np.sum(self.f @ _weights(op)))


def commensurate_dt(op: CartesianOperator, Nx: int) -> float:
    """Step for which every ``v_x dt`` is a whole number of cells.

    Node abscissae are ``u1_x + (k + 1/2) h - L``; with ``u1_x = 0`` these are
    odd multiples of ``h/2``, so ``dt = 2 dx / h`` makes each shift an integer.
    """
    return 2.0 / (Nx * op.grid.h)


def stream(f: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """``f(x - s dx, v)`` on the periodic slab, for shifts ``s`` in cells.

    The integer part is a permutation; a fractional remainder uses linear
    interpolation between neighbouring cells, which conserves the sum exactly.
    """
    out = np.empty_like(f)
    for j in np.unique(np.round(shifts, 12)):
        cols = np.nonzero(np.isclose(shifts, j, rtol=0, atol=1e-12))[0]
        k = math.floor(j)
        a = j - k
        g = np.roll(f[:, cols], k, axis=0)
        if a > 1e-12:
            g = (1 - a) * g + a * np.roll(g, 1, axis=0)
        out[:, cols] = g
    return out


def transport_demo(op: CartesianOperator, Nx: int, f0, t_end: float, dt: float,
                   collisions: bool = True, collision_method: str = "exact",
                   n_samples: int | None = None):
    """Strang splitting ``C(dt/2) S(dt) C(dt/2)`` on a periodic slab.

    Parameters
    ----------
    op : CartesianOperator
        Velocity operator (materialized; the demo uses small ``N``).
    f0 : callable or array
        ``f0(x, v)`` evaluated at cell centres and velocity nodes, or an
        ``(Nx, nodes)`` array.
    collision_method : {"exact", "rk4"}
        ``exact`` applies ``exp(dt/2 T)``; ``rk4`` takes one classical step
        and needs ``dt/2 <= 0.5 / max sigma``.

    Returns
    -------
    times, masses, final TransportState
    """
    if not isinstance(op, CartesianOperator):
        raise TypeError("the transport demo needs a Cartesian velocity grid")
    dx = 1.0 / Nx
    xc = (np.arange(Nx) + 0.5) * dx
    if callable(f0):
        F = np.stack([np.asarray(f0(x, op.nodes), dtype=float) for x in xc])
    else:
        F = np.array(f0, dtype=float)
    if F.shape != (Nx, op.size):
        raise ValueError(f"f0 must have shape ({Nx}, {op.size})")
    n_steps = int(round(t_end / dt))
    every = max(1, n_steps // n_samples) if n_samples else 1
    shifts = op.nodes[:, 0] * dt / dx
    sw = op.sqrt_w / op.sqrt_m
    half = None
    if collisions:
        if collision_method == "exact":
            half = SpectralPropagator(op).matrix(0.5 * dt)
        elif collision_method == "rk4":
            if 0.5 * dt > max_stable_dt(op) * (1 + 1e-12):
                raise CFLError(f"collision substep dt/2 = {0.5 * dt:.3e} exceeds "
                               f"{max_stable_dt(op):.3e}")
            T = op.dense()
            h = 0.5 * dt
            A = T * h
            A2 = A @ A
            half = np.eye(op.size) + A + A2 / 2 + A2 @ A / 6 + A2 @ A2 / 24
        else:
            raise ValueError(f"unknown collision method {collision_method!r}")

    def collide(F):
        X = F * sw[None, :]
        return (X @ half.T) / sw[None, :]

    state = TransportState(F, dx)
    times, masses = [0.0], [state.total_mass(op)]
    for k in range(1, n_steps + 1):
        if collisions:
            F = collide(F)
        F = stream(F, shifts)
        if collisions:
            F = collide(F)
        if k % every == 0 or k == n_steps:
            state = TransportState(F, dx)
            times.append(k * dt)
            masses.append(state.total_mass(op))
    return np.array(times), np.array(masses), TransportState(F, dx)
