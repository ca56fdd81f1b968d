"""Brute-force reference integrals built from the microscopic collision law.

Nothing here uses the closed-form kernel: the gain term and the collision
frequency are integrated directly over background velocities ``w`` and impact
directions ``n`` (hemisphere ``q.n >= 0``, unit cross-section).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ilbk.kernel import KernelContext, kernel_integral, sigma_of_speed

MIN_BUDGET = 1000
# the integrals below run over the impact hemisphere, i.e. they realize
# norm_C = 1/2; other norm_C values rescale linearly
NORM_HEMISPHERE = 0.5


def make_rng(seed: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; ``spawn`` gives disjoint streams."""
    return np.random.Generator(np.random.Philox(seed))


class BudgetTooSmallError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass
class CollisionPair:
    v: np.ndarray
    w: np.ndarray
    n: np.ndarray
    vstar: np.ndarray
    wstar: np.ndarray


def inverse_collision_map(consts, v, w, n, tol: float = 1e-12):
    """Pre-collisional velocities ``(v*, w*)`` producing ``(v, w)``.

    Vectorized over leading axes; ``n`` must be unit vectors.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    if np.any(np.abs(np.sum(n * n, axis=-1) - 1.0) > tol):
        raise ValueError("impact direction n must be a unit vector")
    qn = np.sum((v - w) * n, axis=-1)[..., None]
    vstar = v - 2.0 * consts.gamma * qn * n
    wstar = w + 2.0 * consts.gammabar * qn * n
    return vstar, wstar


def direct_collision_map(consts, vstar, wstar, n):
    """Post-collisional velocities from pre-collisional ones (inverse of the above)."""
    alpha = consts.alpha
    eps = 1.0 - 2.0 * consts.beta
    qn = np.sum((np.asarray(vstar) - np.asarray(wstar)) * n, axis=-1)[..., None]
    v = vstar - alpha * (1 + eps) * qn * n
    w = wstar + (1 - alpha) * (1 + eps) * qn * n
    return v, w


# --------------------------------------------------------------------------
# sampling helpers


def _unit_vectors(rng, size):
    x = rng.standard_normal((size, 3))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _welford(chunks):
    """Merge per-chunk (count, mean, M2) triples."""
    n, mean, m2 = 0, 0.0, 0.0
    for cn, cmean, cm2 in chunks:
        if cn == 0:
            continue
        delta = cmean - mean
        tot = n + cn
        mean += delta * cn / tot
        m2 += cm2 + delta * delta * n * cn / tot
        n = tot
    return n, mean, m2


def _chunk_stats(x):
    mean = float(np.mean(x))
    return len(x), mean, float(np.sum((x - mean) ** 2))


def _mc_estimate(sample_fn, budget, rng, chunk=200_000):
    if budget < MIN_BUDGET:
        raise BudgetTooSmallError(f"budget {budget} < {MIN_BUDGET}")
    stats = []
    left = budget
    while left > 0:
        k = min(chunk, left)
        stats.append(_chunk_stats(sample_fn(rng, k)))
        left -= k
    n, mean, m2 = _welford(stats)
    var = m2 / (n - 1)
    return mean, math.sqrt(var / n)


def _hemisphere_about(q, rng):
    """Uniform directions on the hemisphere ``q.n >= 0`` (``q`` rows)."""
    n = _unit_vectors(rng, len(q))
    flip = np.sum(n * q, axis=1) < 0
    n[flip] *= -1
    return n


# --------------------------------------------------------------------------
# collision frequency


def sigma_oracle(ctx: KernelContext, v, budget: int = 200_000, rng=None,
                 method: str = "mc"):
    """Defining integral ``int int_{q.n>=0} (q.n) M1(w) dn dw`` at velocity ``v``.

    ``method="mc"`` samples ``w ~ M1`` and ``n`` uniform on the hemisphere;
    ``method="quadrature"`` uses spherical coordinates for ``w`` around ``v``
    (Gauss-Laguerre-type radial rule) and Gauss-Legendre in the impact angles.
    Returns ``(estimate, standard_error)``; the quadrature error is estimated
    by comparing with a coarser rule.
    """
    v = np.asarray(v, dtype=float)
    if method == "quadrature":
        fine = _sigma_quadrature(ctx, v, budget)
        coarse = _sigma_quadrature(ctx, v, max(budget // 2, 4))
        return fine, abs(fine - coarse)
    rng = rng if rng is not None else make_rng(0)
    p = ctx.params
    sd = math.sqrt(p.theta1 / p.m1)
    u1 = ctx.u1

    def sample(rng, k):
        w = u1 + sd * rng.standard_normal((k, 3))
        q = v - w
        n = _hemisphere_about(q, rng)
        return 2 * math.pi * np.sum(q * n, axis=1)

    est, se = _mc_estimate(sample, budget, rng)
    return ctx.norm_C * est / NORM_HEMISPHERE, ctx.norm_C * se / NORM_HEMISPHERE


def _angle_rule(n_theta: int, n_phi: int, upper_only: bool):
    """Gauss-Legendre in ``cos(theta)`` and trapezoid in ``phi``."""
    x, wx = np.polynomial.legendre.leggauss(n_theta)
    if upper_only:
        x, wx = (x + 1) / 2, wx / 2
    phi = 2 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
    wphi = np.full(n_phi, 2 * math.pi / n_phi)
    ct = np.repeat(x, n_phi)
    st = np.sqrt(np.maximum(1 - ct * ct, 0.0))
    ph = np.tile(phi, n_theta)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=1)
    return dirs, np.outer(wx, wphi).ravel()


def _frame(axis):
    """Orthonormal frame whose third column is ``axis`` (rows may be many axes)."""
    axis = np.atleast_2d(axis)
    a = axis / np.linalg.norm(axis, axis=1, keepdims=True)
    helper = np.where(np.abs(a[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(a, e1)
    return np.stack([e1, e2, a], axis=2)


def _radial_rule(n: int, scale: float, extent: float = 14.0):
    """Composite Gauss-Legendre on ``[0, extent*scale]`` in panels."""
    npan = max(2, n // 8)
    xg, wg = np.polynomial.legendre.leggauss(8)
    edges = np.linspace(0.0, extent * scale, npan + 1)
    half = (edges[1:] - edges[:-1])[:, None] / 2
    mid = (edges[1:] + edges[:-1])[:, None] / 2
    return (mid + half * xg).ravel(), (half * wg).ravel()


def _sigma_quadrature(ctx: KernelContext, v, order: int):
    p = ctx.params
    sd = math.sqrt(p.theta1 / p.m1)
    r = float(np.linalg.norm(v - ctx.u1))
    rho, wrho = _radial_rule(order, sd, extent=14.0 + r / sd)
    dirs, wd = _angle_rule(max(order // 2, 4), max(order // 2, 4), upper_only=False)
    # w = v + rho * omega ; q = -rho * omega
    bg = ctx.params.m1 / (2 * math.pi * ctx.params.theta1)
    total = 0.0
    # impact angles: int_{q.n>=0} (q.n) dn done by the same rule, upper hemisphere
    ndirs, wn = _angle_rule(max(order // 4, 2), max(order // 4, 4), upper_only=True)
    ang = float(np.sum(wn * ndirs[:, 2]))  # int_{S+} cos = pi
    for i in range(len(rho)):
        w = v + rho[i] * dirs
        M1 = bg**1.5 * np.exp(-np.sum((w - ctx.u1) ** 2, axis=1) / (2 * sd * sd))
        total += wrho[i] * rho[i] ** 2 * rho[i] * ang * np.dot(wd, M1)
    return ctx.norm_C * total / NORM_HEMISPHERE


# --------------------------------------------------------------------------
# gain term


def qplus_oracle(ctx: KernelContext, v, f, budget: int = 200_000, rng=None,
                 method: str = "mc", focus=None):
    """Defining integral ``eps^-2 int int_{q.n>=0} (q.n) f(v*) M1(w*) dn dw``.

    Parameters
    ----------
    f : callable
        Vectorized density, ``f(array (k, 3)) -> (k,)``.
    method : {"mc", "quadrature"}
        Monte Carlo (importance-sampled ``w``) or a deterministic product rule
        (spherical coordinates for ``w`` around ``v``, Gauss-Legendre in the
        impact hemisphere).
    focus : (center, width), optional
        For narrow ``f``: a defensive mixture proposal steering ``v*`` toward
        ``center``. Weights are still the defining integrand over the proposal
        density, so the estimate stays unbiased.

    Returns
    -------
    (estimate, standard_error)
    """
    v = np.asarray(v, dtype=float)
    if method == "quadrature":
        fine = _qplus_quadrature(ctx, v, f, budget)
        coarse = _qplus_quadrature(ctx, v, f, max(budget * 2 // 3, 4))
        return fine, abs(fine - coarse)
    rng = rng if rng is not None else make_rng(0)
    eps = ctx.params.eps
    consts = ctx.consts
    p = ctx.params
    sd = math.sqrt(p.theta1 / p.m1)
    u1 = ctx.u1
    bg_norm = (p.m1 / (2 * math.pi * p.theta1)) ** 1.5
    # proposal for w: Gaussian around the background, wider to cover w* shifts
    sp = 1.5 * sd

    def M1(w):
        return bg_norm * np.exp(-np.sum((w - u1) ** 2, axis=1) / (2 * sd * sd))

    def gauss_pdf(w):
        return (2 * math.pi * sp * sp) ** -1.5 * np.exp(-np.sum((w - u1) ** 2, axis=1) / (2 * sp * sp))

    def integrand(w, n):
        q = v - w
        qn = np.sum(q * n, axis=1)
        vstar, wstar = inverse_collision_map(consts, np.broadcast_to(v, w.shape), w, n)
        val = np.where(qn > 0, qn * f(vstar) * M1(wstar), 0.0)
        return val / eps**2

    if focus is None:
        def sample(rng, k):
            w = u1 + sp * rng.standard_normal((k, 3))
            n = _hemisphere_about(v - w, rng)
            # density of n: 1/(2 pi) on the hemisphere
            return integrand(w, n) * 2 * math.pi / gauss_pdf(w)
    else:
        center, width = np.asarray(focus[0], dtype=float), float(focus[1])
        sample = _focused_sampler(v, center, width, consts, sp, u1, integrand, gauss_pdf)

    est, se = _mc_estimate(sample, budget, rng)
    return ctx.norm_C * est / NORM_HEMISPHERE, ctx.norm_C * se / NORM_HEMISPHERE


def _focused_sampler(v, center, width, consts, sp, u1, integrand, gauss_pdf):
    """Mixture proposal: half the samples aim ``v*`` at ``center``.

    For the aimed component, ``n`` is drawn from a tight cone about the
    direction of ``v - center`` (von Mises-Fisher), then ``s = (v-w).n`` from a
    Gaussian around the value putting ``v*`` at ``center``, and the in-plane
    part of ``w`` from an isotropic Gaussian. Since ``w -> (s, w_perp)`` is an
    orthonormal change of variables for fixed ``n``, the proposal density is a
    simple product.
    """
    d = v - center
    dist = np.linalg.norm(d)
    axis = d / dist
    kappa = max((dist / max(width, 1e-12)) ** 2, 1.0)
    s0 = dist / (2 * consts.gamma)
    ss = max(width / (2 * consts.gamma), 1e-12)

    def vmf_sample(rng, k):
        u = rng.random(k)
        c = 1 + np.log(u + (1 - u) * np.exp(-2 * kappa)) / kappa
        phi = 2 * math.pi * rng.random(k)
        st = np.sqrt(np.maximum(1 - c * c, 0))
        local = np.stack([st * np.cos(phi), st * np.sin(phi), c], axis=1)
        F = _frame(axis)[0]
        return local @ F.T

    def vmf_pdf(n):
        c = n @ axis
        return kappa / (2 * math.pi * (1 - math.exp(-2 * kappa))) * np.exp(kappa * (c - 1))

    def sample(rng, k):
        k1 = k // 2
        k2 = k - k1
        # component A: default proposal
        wA = u1 + sp * rng.standard_normal((k1, 3))
        nA = _hemisphere_about(v - wA, rng)
        # component B: aimed proposal
        nB = vmf_sample(rng, k2)
        sB = s0 + ss * rng.standard_normal(k2)
        perp = sp * rng.standard_normal((k2, 3))
        perp -= np.sum(perp * nB, axis=1, keepdims=True) * nB
        base = u1 - np.sum((u1 - v) * nB, axis=1, keepdims=True) * nB  # project u1 on plane through v
        wB = base + perp - sB[:, None] * nB
        w = np.concatenate([wA, wB])
        n = np.concatenate([nA, nB])

        # mixture density over (w, n); n ranges over the full sphere and the
        # integrand vanishes off the hemisphere q.n >= 0
        s = np.sum((v - w) * n, axis=1)
        dens_a = gauss_pdf(w) / (2 * math.pi) * (s >= 0)
        wp = w - base_for(n) + s[:, None] * n
        dens_perp = (2 * math.pi * sp * sp) ** -1 * np.exp(-np.sum(wp * wp, axis=1) / (2 * sp * sp))
        dens_b = vmf_pdf(n) * _s_pdf(s, s0, ss) * dens_perp
        dens = 0.5 * dens_a + 0.5 * dens_b
        vals = integrand(w, n)
        out = np.zeros(len(vals))
        nz = vals != 0
        out[nz] = vals[nz] / dens[nz]
        return out

    def base_for(n):
        return u1 - np.sum((u1 - v) * n, axis=1, keepdims=True) * n

    return sample


def _s_pdf(s, s0, ss):
    # Gaussian density of the normal relative speed in the aimed proposal
    return np.exp(-(s - s0) ** 2 / (2 * ss * ss)) / (math.sqrt(2 * math.pi) * ss)


def _qplus_quadrature(ctx: KernelContext, v, f, order: int):
    p = ctx.params
    eps = p.eps
    sd = math.sqrt(p.theta1 / p.m1)
    r = float(np.linalg.norm(v - ctx.u1))
    rho, wrho = _radial_rule(order, sd, extent=12.0 + r / sd)
    wdirs, wd = _angle_rule(max(order // 3, 4), max(order // 2, 6), upper_only=False)
    ndirs, wn = _angle_rule(max(order // 3, 4), max(order // 2, 6), upper_only=True)
    bg_norm = (p.m1 / (2 * math.pi * p.theta1)) ** 1.5
    consts = ctx.consts
    total = 0.0
    for i in range(len(rho)):
        q = -rho[i] * wdirs  # q = v - w with w = v + rho * omega
        w = v - q
        F = _frame(q)  # (nw, 3, 3); third column along q
        n = np.einsum("kij,lj->kli", F, ndirs)  # (nw, nn, 3)
        qn = rho[i] * ndirs[:, 2][None, :]
        W = np.broadcast_to(w[:, None, :], n.shape)
        vstar = v - 2 * consts.gamma * qn[..., None] * n
        wstar = W + 2 * consts.gammabar * qn[..., None] * n
        m1w = bg_norm * np.exp(-np.sum((wstar - ctx.u1) ** 2, axis=-1) / (2 * sd * sd))
        fv = np.asarray(f(vstar.reshape(-1, 3)), dtype=float).reshape(m1w.shape)
        integrand = qn * fv * m1w
        total += wrho[i] * rho[i] ** 2 * np.einsum("k,kl,l->", wd, integrand, wn)
    return ctx.norm_C * total / eps**2 / NORM_HEMISPHERE


# --------------------------------------------------------------------------
# calibration


def calibrate(ctx: KernelContext, n_points: int = 8, order: int = 64,
              rtol: float = 1e-7, norm_rtol: float = 1e-3, seed: int = 0) -> KernelContext:
    """Resolve ``norm_C`` and ``c_sigma`` against the defining integrals.

    ``c_sigma``: the deterministic quadrature of the collision frequency is
    compared with the closed form at ``n_points`` speeds and must agree with
    ``pi`` to ``rtol``.

    ``norm_C``: the defining gain integral of the equilibrium (hemisphere
    convention) is divided by the kernel-form integral with ``norm_C = 1``
    and must agree with ``1/2`` to ``norm_rtol``.

    The returned context carries a provenance record with the raw measurements.
    """
    rng = np.random.default_rng(seed)
    width = ctx.width
    speeds = np.concatenate([[0.0], rng.uniform(0.1, 4.0, n_points - 1) * width])
    unit_ctx = KernelContext(ctx.params, ctx.consts, norm_C=1.0, c_sigma=1.0)
    ratios, errs = [], []
    for sp in speeds:
        v = ctx.u1 + sp * np.array([0.0, 0.0, 1.0])
        est, err = sigma_oracle(unit_ctx, v, budget=order, method="quadrature")
        # with the full-sphere normalization (norm_C = 1) the oracle equals c_sigma * c_k * braces
        ratios.append(est / float(sigma_of_speed(unit_ctx, sp)))
        errs.append(err / float(sigma_of_speed(unit_ctx, sp)))
    ratios = np.asarray(ratios)
    measured_c_sigma = float(np.mean(ratios))
    spread = float(np.max(np.abs(ratios - measured_c_sigma)))
    if abs(measured_c_sigma - math.pi) > rtol * math.pi or spread > rtol * math.pi:
        raise CalibrationError(
            f"collision frequency constant {measured_c_sigma!r} (spread {spread:.3g}) "
            "does not match the closed form")
    # gain side: defining integral over the hemisphere vs the kernel form
    half_ctx = KernelContext(ctx.params, ctx.consts, norm_C=NORM_HEMISPHERE)
    v_probe = ctx.u1 + width * np.array([0.3, 0.2, 0.1])
    direct, direct_err = qplus_oracle(half_ctx, v_probe, ctx.equilibrium, budget=40,
                                      method="quadrature")
    kernel_form = kernel_integral(unit_ctx, v_probe, ctx.equilibrium)
    measured_norm = float(direct / kernel_form)
    if abs(measured_norm - NORM_HEMISPHERE) > norm_rtol * NORM_HEMISPHERE:
        raise CalibrationError(f"gain normalization {measured_norm!r} != 1/2")
    resolved_norm = NORM_HEMISPHERE
    provenance = {
        "norm_C": resolved_norm,
        "c_sigma": math.pi,
        "c_sigma_measured": measured_c_sigma,
        "c_sigma_max_deviation": spread,
        "c_sigma_quadrature_error": float(np.max(errs)),
        "norm_C_measured": measured_norm,
        "norm_C_quadrature_error": float(direct_err / kernel_form),
        "convention": "unit cross-section, impact hemisphere q.n >= 0",
        "oracle": "product quadrature",
        "order": order,
        "speeds": [float(s) for s in speeds],
    }
    return KernelContext(ctx.params, ctx.consts, norm_C=resolved_norm, c_sigma=math.pi,
                         calibrated=True, provenance=provenance)
