"""Closed-form gain kernel, collision frequency and kernel diagnostics.

Conventions
-----------
The collision integral uses a unit hard-sphere cross-section and integrates the
impact direction ``n`` over the hemisphere ``q.n >= 0``. With that convention
the effective gain kernel is

    K(v, v') = norm_C * prefactor * k(v, v')

where ``k`` is the Carleman-type kernel

    k(v, v') = sqrt(m1 / (2 pi theta1)) / |v - v'|
               * exp(-(m1 / (8 theta1)) * ((1+mu)|v-v'| + (|v-u1|^2 - |v'-u1|^2)/|v-v'|)^2)

and ``norm_C = 1/2`` (the full-sphere convention would give 1). The collision
frequency is ``sigma(v) = integral of K(v', v) dv'`` and equals
``norm_C * c_sigma * sqrt(m1/(2 pi theta1)) * braces(r)`` with ``c_sigma = pi``;
the factor does not depend on ``eps`` because ``(2 + mu) * gamma * eps = 1``.
Both constants are confirmed numerically by :func:`ilbk.oracle.calibrate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf, erfc

from ilbk.gas import (DerivedConstants, GasParameters, derive_constants,
                      equilibrium_distribution, thermal_width)

NORM_C_HEMISPHERE = 0.5
C_SIGMA = math.pi
EXP_FLOOR = -745.0


class SingularInputError(ValueError):
    """Kernel requested on the diagonal ``v == v'`` where it is undefined."""


class ParameterRangeError(ValueError):
    pass


@dataclass(frozen=True)
class KernelContext:
    params: GasParameters
    consts: DerivedConstants
    norm_C: float = NORM_C_HEMISPHERE
    c_sigma: float = C_SIGMA
    calibrated: bool = False
    provenance: dict | None = None

    def __post_init__(self):
        if not self.norm_C > 0:
            raise ValueError("norm_C must be positive")

    @classmethod
    def from_params(cls, params: GasParameters, **kw) -> "KernelContext":
        return cls(params=params, consts=derive_constants(params), **kw)

    @property
    def u1(self) -> np.ndarray:
        return self.params.u1_array

    @property
    def rho1(self) -> float:
        """``m1 / (2 theta1)``."""
        return self.params.m1 / (2.0 * self.params.theta1)

    @property
    def c_k(self) -> float:
        """``sqrt(m1 / (2 pi theta1))``."""
        return math.sqrt(self.params.m1 / (2 * math.pi * self.params.theta1))

    @property
    def scale(self) -> float:
        """Overall constant multiplying ``|v-v'|^-1 exp(...)`` in the effective kernel."""
        return self.norm_C * self.consts.prefactor * self.c_k

    @property
    def width(self) -> float:
        return thermal_width(self.params, self.consts)

    @property
    def equilibrium(self):
        return equilibrium_distribution(self.params, self.consts)

    @property
    def nu0(self) -> float:
        """Essential-spectrum threshold ``inf sigma = sigma(u1)``."""
        return float(sigma_of_speed(self, 0.0))

    def with_mu(self, mu: float) -> "KernelContext":
        """Same context with ``mu`` overridden (used for specialization checks)."""
        return replace(self, consts=replace(self.consts, mu=mu))


def _pair_geometry(ctx: KernelContext, v, v2):
    v = np.asarray(v, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    u = ctx.u1
    s = np.sqrt(np.sum((v - v2) ** 2, axis=-1))
    a = np.sum((v - u) ** 2, axis=-1)
    b = np.sum((v2 - u) ** 2, axis=-1)
    return s, a, b


def _check_nonsingular(s):
    if np.any(s == 0):
        raise SingularInputError("kernel is singular at v == v'")


def exponent_k(mu: float, rho1: float, s, a, b):
    """Exponent of ``k`` in terms of ``s = |v-v'|``, ``a = |v-u1|^2``, ``b = |v'-u1|^2``."""
    inner = (1.0 + mu) * s + (a - b) / s
    return -0.25 * rho1 * inner * inner


def exponent_G(mu: float, rho1: float, s, a, b):
    return -0.25 * rho1 * ((1.0 + mu) ** 2 * s * s + (a - b) ** 2 / (s * s))


def log_kernel_K(ctx: KernelContext, v, v2):
    s, a, b = _pair_geometry(ctx, v, v2)
    _check_nonsingular(s)
    return math.log(ctx.scale) - np.log(s) + exponent_k(ctx.consts.mu, ctx.rho1, s, a, b)


def kernel_K(ctx: KernelContext, v, v2):
    """Effective gain kernel ``K(v, v')``; vectorized over leading axes."""
    s, a, b = _pair_geometry(ctx, v, v2)
    _check_nonsingular(s)
    e = np.maximum(exponent_k(ctx.consts.mu, ctx.rho1, s, a, b), EXP_FLOOR)
    return ctx.scale * np.exp(e) / s


def raw_kernel_k(ctx: KernelContext, v, v2):
    """Kernel without ``norm_C * prefactor``."""
    return kernel_K(ctx, v, v2) / (ctx.norm_C * ctx.consts.prefactor)


def symmetrized_G(ctx: KernelContext, v, v2):
    """Symmetrized kernel ``M^{-1/2}(v) K(v, v') M^{1/2}(v')``, closed form."""
    s, a, b = _pair_geometry(ctx, v, v2)
    _check_nonsingular(s)
    e = np.maximum(exponent_G(ctx.consts.mu, ctx.rho1, s, a, b), EXP_FLOOR)
    return ctx.scale * np.exp(e) / s


def symmetrized_G_by_definition(ctx: KernelContext, v, v2):
    """Same quantity as :func:`symmetrized_G` built from the kernel and the equilibrium."""
    M = ctx.equilibrium
    logG = log_kernel_K(ctx, v, v2) + 0.5 * (M.log(v2) - M.log(v))
    return np.exp(logG)


def _braces(ctx: KernelContext, r):
    """Bracketed term of the collision frequency, with the ``r -> 0`` branch."""
    r = np.asarray(r, dtype=float)
    s2 = ctx.params.theta1 / ctx.params.m1
    sd = math.sqrt(s2)
    small = r < 1e-8 * sd
    rs = np.where(small, 1.0, r)
    # int_0^{2r} exp(-t^2 / (8 s2)) dt = sqrt(2 pi) sd erf(r / (sd sqrt 2))
    integral = math.sqrt(2 * math.pi) * sd * erf(rs / (sd * math.sqrt(2)))
    val = 4 * s2 * np.exp(-r * r / (2 * s2)) + (2 * rs + 2 * s2 / rs) * integral
    return np.where(small, 8 * s2 + (4.0 / 3.0) * r * r, val)


def sigma_of_speed(ctx: KernelContext, r):
    """Collision frequency as a function of ``r = |v - u1|``."""
    return ctx.norm_C * ctx.c_sigma * ctx.c_k * _braces(ctx, r)


def sigma_closed_form(ctx: KernelContext, v):
    v = np.asarray(v, dtype=float)
    r = np.sqrt(np.sum((v - ctx.u1) ** 2, axis=-1))
    return sigma_of_speed(ctx, r)


def detailed_balance_residual(ctx: KernelContext, v, v2, theta_sharp: float | None = None):
    """Relative mismatch ``|K(v,v')M(v') - K(v',v)M(v)| / (K(v,v')M(v'))``.

    Evaluated in log space so that underflow of both sides does not matter.
    ``theta_sharp`` overrides the equilibrium temperature (sensitivity checks).
    """
    p = ctx.params
    th = ctx.consts.theta_sharp if theta_sharp is None else theta_sharp
    s, a, b = _pair_geometry(ctx, v, v2)
    _check_nonsingular(s)
    mu, rho1 = ctx.consts.mu, ctx.rho1
    lhs = exponent_k(mu, rho1, s, a, b) - p.m * b / (2 * th)
    rhs = exponent_k(mu, rho1, s, b, a) - p.m * a / (2 * th)
    return np.abs(np.expm1(rhs - lhs))


# --------------------------------------------------------------------------
# kernel bound scans


def _panel_rule(edges, n_node: int):
    """Composite Gauss-Legendre nodes/weights over consecutive panels."""
    edges = np.asarray(edges, dtype=float)
    xg, wg = np.polynomial.legendre.leggauss(n_node)
    half = (edges[1:] - edges[:-1])[:, None] / 2
    mid = (edges[1:] + edges[:-1])[:, None] / 2
    return (mid + half * xg).ravel(), (half * wg).ravel()


def carleman_integral(ctx: KernelContext, p: float, q: float, r,
                      n_angle: int = 24, n_node: int = 8):
    """``I(v) = int |G(v,v')|^p (1+|v'-u1|)^-q dv'`` for ``|v - u1| = r``.

    Spherical coordinates around ``v``. The first radial panel is mapped with
    ``rho = t^(1/(3-p))`` which absorbs the ``rho^(2-p)`` weight.
    """
    if not 0 < p < 3:
        raise ParameterRangeError("p must lie in (0, 3)")
    if q < 0:
        raise ParameterRangeError("q must be nonnegative")
    r = np.atleast_1d(np.asarray(r, dtype=float))
    mu, rho1 = ctx.consts.mu, ctx.rho1
    A = 0.25 * p * rho1
    h = 0.25 / math.sqrt(A)
    out = np.empty(r.shape)
    for i, ri in enumerate(r):
        rho_max = 4 * ri + 12.0 / math.sqrt(A * ((1 + mu) ** 2 + 0.25))
        npan = max(4, int(math.ceil(rho_max / h)))
        edges = np.linspace(0.0, rho_max, npan + 1)
        kappa = 1.0 / (3.0 - p)
        t0, wt0 = _panel_rule([0.0, edges[1] ** (1.0 / kappa)], n_node)
        rho_a, w_a = t0**kappa, kappa * wt0
        rho_b, w_b = _panel_rule(edges[1:], n_node)
        rho = np.concatenate([rho_a, rho_b])
        wr = np.concatenate([w_a, w_b * rho_b ** (2.0 - p)])
        # angular panels fine enough to resolve the peak at c = -rho/(2r)
        nc = max(8, int(math.ceil(2 * ri * math.sqrt(A) / 0.5)))
        c, wc = _panel_rule(np.linspace(-1.0, 1.0, nc + 1), n_angle)
        R, C = rho[:, None], c[None, :]
        expo = -A * ((1 + mu) ** 2 * R * R + (R + 2 * ri * C) ** 2)
        dist = np.sqrt(np.maximum(R * R + ri * ri + 2 * R * ri * C, 0.0))
        integrand = np.exp(expo) / (1.0 + dist) ** q
        out[i] = 2 * math.pi * ctx.scale**p * (wr @ integrand @ wc)
    return out


def carleman_bound_scan(ctx: KernelContext, p: float, q: float, grid=None):
    """Tabulate ``(r, I(v) (1+r)^(q+1))`` along a ray of speeds.

    ``grid`` is the array of speeds (default: 0..15 thermal widths). Returns a
    dict with the table, its supremum and a flag set if the product is still
    growing at the end of the ray.
    """
    if not 0 < p < 3:
        raise ParameterRangeError("p must lie in (0, 3)")
    if q < 0:
        raise ParameterRangeError("q must be nonnegative")
    r = np.linspace(0.0, 15.0 * ctx.width, 61) if grid is None else np.asarray(grid, dtype=float)
    I = carleman_integral(ctx, p, q, r)
    prod = I * (1.0 + r) ** (q + 1)
    tail = prod[-max(3, len(prod) // 6):]
    growing = bool(np.all(np.diff(tail) > 0) and tail[-1] > 1.05 * tail[0])
    return {"r": r, "integral": I, "product": prod, "sup": float(prod.max()),
            "growing": growing}


def tail_integral(ctx: KernelContext, rho: float, r, n_angle: int = 512):
    """``int_{|v'-u1| >= rho} K(v', v) dv'`` for ``|v - u1| = r <= rho``.

    The radial part is done in closed form with ``erfc``; the polar angle by
    Gauss-Legendre.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    mu, rho1 = ctx.consts.mu, ctx.rho1
    c, wc = _panel_rule(np.linspace(-1.0, 1.0, n_angle // 16 + 1), 16)
    a = rho1 * (2 + mu) ** 2 / 4.0
    sa = math.sqrt(a)
    out = np.empty(r.shape)
    for i, ri in enumerate(r):
        x0 = -ri * c + np.sqrt(np.maximum(ri * ri * c * c - ri * ri + rho * rho, 0.0))
        b = 2 * ri * c / (2 + mu)
        z = sa * (x0 + b)
        inner = np.exp(-z * z) / (2 * a) - b * math.sqrt(math.pi) / (2 * sa) * erfc(z)
        out[i] = 2 * math.pi * ctx.scale * np.dot(wc, inner)
    return out


def tail_mass_scan(ctx: KernelContext, rho: float, grid=None):
    """Sampled ``sup_{|v-u1| <= rho}`` of the tail integral; returns ``(sup, r_at_sup)``."""
    if not rho > 0:
        raise ParameterRangeError("rho must be positive")
    r = np.linspace(0.0, rho, 41) if grid is None else np.asarray(grid, dtype=float)
    vals = tail_integral(ctx, rho, r)
    k = int(np.argmax(vals))
    return float(vals[k]), float(r[k])


def kernel_integral(ctx: KernelContext, v, f, n_radial: int = 96, n_angle: int = 32):
    """``int K(v, v') f(v') dv'`` by a product rule in spherical coordinates about ``v``.

    The ``1/|v-v'|`` singularity is absorbed by the radial Jacobian, so smooth
    ``f`` gives spectral accuracy. Reference route for grid quadratures.
    """
    v = np.asarray(v, dtype=float)
    mu, rho1 = ctx.consts.mu, ctx.rho1
    w = v - ctx.u1
    reach = 14.0 * ctx.width + 2.0 * float(np.linalg.norm(w))
    rho, wr = _panel_rule(np.linspace(0.0, reach, n_radial // 8 + 1), 8)
    c, wc = np.polynomial.legendre.leggauss(n_angle)
    phi = 2 * math.pi * (np.arange(2 * n_angle) + 0.5) / (2 * n_angle)
    st = np.sqrt(1 - c * c)
    dirs = np.stack([np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)),
                     np.outer(c, np.ones_like(phi))], axis=-1).reshape(-1, 3)
    wd = np.outer(wc, np.full(phi.shape, math.pi / n_angle)).ravel()
    wdir = dirs @ w
    total = 0.0
    for i in range(len(rho)):
        z = rho[i] * dirs
        # |v-u1|^2 - |v'-u1|^2 = -(2 w.z + |z|^2)
        inner = (1 + mu) * rho[i] - (2 * wdir + rho[i])
        kern = ctx.scale * np.exp(np.maximum(-0.25 * rho1 * inner * inner, EXP_FLOOR))
        total += wr[i] * rho[i] * np.dot(wd, kern * f(v + z))
    return float(total)


def gain_apply(ctx: KernelContext, grid, f):
    """Quadrature of ``int K(v, v') f(v') dv'`` at every node of ``grid``.

    ``f`` may be a vector of nodal values or a 2D array of several columns.
    """
    from ilbk.discretization import apply_gain
    return apply_gain(ctx, grid, f)


def dirichlet_form(ctx: KernelContext, grid, f):
    """``<L f, f>`` in the weighted space, as the double integral of squared jumps."""
    from ilbk.discretization import dirichlet_double_integral
    return dirichlet_double_integral(ctx, grid, f)
