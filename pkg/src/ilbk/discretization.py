"""Velocity grids and the symmetrized discrete collision operator.

Two discretizations share one interface (:class:`DiscreteOperator`):

* a cell-centred Cartesian grid on ``[u1 - L, u1 + L]^3`` (matrix-free products,
  dense only for small ``N``), and
* a radial Gauss-Legendre grid for one angular sector ``ell`` (dense).

Both work in symmetrized coordinates ``x_i = sqrt(W_i) f_i / sqrt(M_i)``, where the
operator is ``T = S + diag(c - sigma)`` with ``S`` the off-diagonal gain block
``sqrt(W_i) G(v_i, v_j) sqrt(W_j)``, ``c`` the singular-cell gain weight and
``sigma`` the collision frequency.

The singular cell has two rules. The raw rule integrates the kernel over the
cell around the node. The conservative rule (the default) fixes ``c`` so that
the equilibrium vector is annihilated exactly; because ``S`` is symmetric with
nonnegative entries this gives exact discrete mass conservation, and ``-T`` is
a weighted graph Laplacian, hence negative semidefinite.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, erfcx, eval_legendre

from ilbk.gas import GasParameters
from ilbk.kernel import (EXP_FLOOR, KernelContext, exponent_G, sigma_of_speed)

DENSE_MAX_N = 14
DEFAULT_MEMORY_BUDGET = 2 * 1024**3


class InvalidDimensionError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


class AssemblyOverflowError(MemoryError):
    pass


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class VelocityGrid:
    L: float
    N: int
    width: float
    center: tuple = (0.0, 0.0, 0.0)

    @property
    def half_width(self) -> float:
        return self.L * self.width

    @property
    def h(self) -> float:
        return 2 * self.half_width / self.N

    @property
    def axis(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.h - self.half_width

    @property
    def nodes(self) -> np.ndarray:
        ax = self.axis
        X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        return X + np.asarray(self.center)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.N**3, self.h**3)

    @property
    def size(self) -> int:
        return self.N**3

    def spec(self) -> dict:
        return {"kind": "cartesian", "L": self.L, "N": self.N,
                "width": self.width, "center": list(self.center)}


def build_grid(L: float, N: int, params: GasParameters, ctx: KernelContext | None = None) -> VelocityGrid:
    """Cell-centred grid of ``N^3`` nodes, half-width ``L`` thermal widths."""
    if not (isinstance(N, (int, np.integer)) and N >= 8 and N % 2 == 0):
        raise InvalidDimensionError(f"N must be an even integer >= 8, got {N!r}")
    if not L > 0:
        raise InvalidDimensionError(f"L must be positive, got {L!r}")
    ctx = ctx or KernelContext.from_params(params)
    return VelocityGrid(L=float(L), N=int(N), width=ctx.width, center=params.u1)


@dataclass(frozen=True)
class RadialGrid:
    """Gauss-Legendre speeds on ``(0, L]`` with weights for ``r^2 dr``.

    ``kappa`` holds the symmetrized reduced kernel ``M^-1/2 kappa_K M^1/2``
    once :func:`reduce_isotropic` has filled it.
    """

    L: float
    Nr: int
    width: float
    center: tuple = (0.0, 0.0, 0.0)
    ell: int = 0
    kappa: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def nodes(self) -> np.ndarray:
        x, _ = np.polynomial.legendre.leggauss(self.Nr)
        R = self.L * self.width
        return R * (x + 1) / 2

    @property
    def weights(self) -> np.ndarray:
        _, w = np.polynomial.legendre.leggauss(self.Nr)
        R = self.L * self.width
        return R / 2 * w * self.nodes**2

    @property
    def size(self) -> int:
        return self.Nr

    def spec(self) -> dict:
        return {"kind": "radial", "L": self.L, "Nr": self.Nr, "width": self.width,
                "center": list(self.center), "ell": self.ell}


def build_radial_grid(L: float, Nr: int, ctx: KernelContext, ell: int = 0) -> RadialGrid:
    if not (Nr >= 8 and L > 0):
        raise InvalidDimensionError("radial grid needs Nr >= 8 and L > 0")
    return RadialGrid(L=float(L), Nr=int(Nr), width=ctx.width, center=ctx.params.u1, ell=int(ell))


# --------------------------------------------------------------------------
# singular cell


_UNIT_CUBE_CACHE: dict = {}


def _pyramid_rule(n: int):
    """Nodes and weights for ``int_{[-1/2,1/2]^3} g(z)/|z| dz`` via the 6 face pyramids.

    Returns points ``P`` on the cube faces, their weights (including the
    ``1/|z|`` and Jacobian factors) and the radial parameter rule.
    """
    key = n
    if key in _UNIT_CUBE_CACHE:
        return _UNIT_CUBE_CACHE[key]
    x, wx = np.polynomial.legendre.leggauss(n)
    t, wt = (x + 1) / 2, wx / 2
    y, wy = x / 2, wx / 2
    Y, Z = np.meshgrid(y, y, indexing="ij")
    WY = np.outer(wy, wy)
    pts, wts = [], []
    for ax in range(3):
        others = [k for k in range(3) if k != ax]
        for sgn in (1.0, -1.0):
            P = np.zeros((n, n, 3))
            P[..., ax] = sgn / 2
            P[..., others[0]] = Y
            P[..., others[1]] = Z
            rf = np.linalg.norm(P, axis=-1)
            pts.append(P.reshape(-1, 3))
            # z = t P, dz = t^2 (1/2) dt dA, 1/|z| = 1/(t rf)
            wts.append((WY * 0.5 / rf).reshape(-1))
    out = (np.concatenate(pts), np.concatenate(wts), t, wt)
    _UNIT_CUBE_CACHE[key] = out
    return out


def unit_cube_inverse_distance(n: int = 16) -> float:
    """``int_{[-1/2,1/2]^3} |z|^-1 dz`` (about 2.38)."""
    _, w, t, wt = _pyramid_rule(n)
    return float(np.sum(w) * np.sum(wt * t))


def singular_cell_weights(ctx: KernelContext, nodes, h: float, n: int = 8) -> np.ndarray:
    """``int_{cell} G(v_i, v') dv'`` over the cube of side ``h`` centred on each node.

    ``G(v, v+z)`` is ``|z|^-1`` times a bounded direction-dependent factor, so
    the face-pyramid rule integrates it without special treatment.
    """
    P, wP, t, wt = _pyramid_rule(n)
    mu, rho1 = ctx.consts.mu, ctx.rho1
    w = np.asarray(nodes) - ctx.u1
    wp = w @ P.T * h  # (nodes, face points): w . (h P)
    rf = np.linalg.norm(P, axis=1) * h
    out = np.zeros(len(w))
    for ti, wti in zip(t, wt):
        s = ti * rf
        # |v-u1|^2 - |v'-u1|^2 = -(2 w.z + |z|^2) with z = t h P
        ab = -(2 * ti * wp + s * s)
        E = exponent_G(mu, rho1, s, ab, 0.0)
        out += wti * ti * (np.exp(np.maximum(E, EXP_FLOOR)) @ wP)
    return ctx.scale * h**2 * out


# --------------------------------------------------------------------------
# operators


class DiscreteOperator:
    """Symmetrized collision operator on a grid.

    Attributes
    ----------
    sqrt_w : square roots of the quadrature weights
    sqrt_m : square roots of the equilibrium at the nodes
    sigma : collision frequency at the nodes
    diag : diagonal of ``T``
    mass_factor : ``4 pi`` for radial grids (solid angle), 1 otherwise
    """

    kind = "abstract"

    def __init__(self, ctx: KernelContext, grid, speeds, sqrt_w, sqrt_m, mass_factor=1.0):
        self.ctx = ctx
        self.grid = grid
        self.speeds = np.asarray(speeds, dtype=float)
        self.sqrt_w = np.asarray(sqrt_w, dtype=float)
        self.sqrt_m = np.asarray(sqrt_m, dtype=float)
        self.sigma = sigma_of_speed(ctx, self.speeds)
        self.mass_factor = float(mass_factor)
        self.diag = None
        self.cell_weight = None
        self.raw_cell_weight = None
        self.column_correction = None

    @property
    def size(self) -> int:
        return len(self.sqrt_w)

    @property
    def eq_vector(self) -> np.ndarray:
        """Equilibrium in symmetrized coordinates, ``sqrt(W) sqrt(M)``."""
        return self.sqrt_w * self.sqrt_m

    def to_sym(self, f):
        f = np.asarray(f, dtype=float)
        scale = self.sqrt_w / self.sqrt_m
        return f * (scale if f.ndim == 1 else scale[:, None])

    def from_sym(self, x):
        x = np.asarray(x, dtype=float)
        scale = self.sqrt_m / self.sqrt_w
        return x * (scale if x.ndim == 1 else scale[:, None])

    def mass(self, f) -> float:
        return self.mass_factor * float(np.dot(self.sqrt_w**2, f))

    def gain_offdiag(self, X):
        raise NotImplementedError

    def matvec(self, X):
        X = np.asarray(X, dtype=float)
        d = self.diag if X.ndim == 1 else self.diag[:, None]
        return self.gain_offdiag(X) + d * X

    def norm_estimate(self) -> float:
        """Upper bound on ``||T||_2`` (max absolute row sum of the scaled matrix)."""
        return float(np.max(np.abs(self.diag)) + np.max(self._offdiag_rowsum_abs()))

    def _offdiag_rowsum_abs(self):
        return self.gain_offdiag(np.ones(self.size))

    def _finish(self, conservative: bool):
        """Set the singular-cell weight and the diagonal."""
        e = self.eq_vector
        row = self.gain_offdiag(e)
        raw_c = self.raw_cell_weight
        # gain column sums with the raw singular cell, relative to sigma
        raw_cols = (row + raw_c * e) / e
        self.column_correction = self.sigma / raw_cols
        if conservative:
            self.cell_weight = self.sigma - row / e
        else:
            self.cell_weight = raw_c
        self.conservative = conservative
        self.diag = self.cell_weight - self.sigma

    def gain_apply(self, f):
        """``int K(v, v') f(v') dv'`` at the nodes, for nodal values ``f``."""
        x = self.to_sym(f)
        c = self.cell_weight if x.ndim == 1 else self.cell_weight[:, None]
        y = self.gain_offdiag(x) + c * x
        return self.from_sym(y)

    def apply_collision(self, f):
        """``Q(f)`` at the nodes."""
        return self.from_sym(self.matvec(self.to_sym(f)))

    def gershgorin_upper(self) -> np.ndarray:
        """Gershgorin row bounds of ``diag(e)^-1 T diag(e)`` (similar to ``T``)."""
        e = self.eq_vector
        return self.diag + self.gain_offdiag(e) / e

    def dense(self) -> np.ndarray:
        raise NotImplementedError

    def metadata(self) -> dict:
        return {
            "grid": self.grid.spec(),
            "params": self.ctx.params.to_dict(),
            "norm_C": self.ctx.norm_C,
            "c_sigma": self.ctx.c_sigma,
            "conservative": bool(self.conservative),
            "max_column_correction": float(np.max(np.abs(self.column_correction - 1))),
        }


class CartesianOperator(DiscreteOperator):
    """Operator on a :class:`VelocityGrid`, matrix-free unless materialized."""

    kind = "full-3d"

    def __init__(self, ctx: KernelContext, grid: VelocityGrid, conservative: bool = True,
                 block_rows: int = 256, memory_budget: int = DEFAULT_MEMORY_BUDGET,
                 materialize: bool | None = None):
        nodes = grid.nodes
        speeds = np.linalg.norm(nodes - ctx.u1, axis=1)
        M = ctx.equilibrium
        sqrt_m = np.exp(0.5 * M.log(nodes))
        super().__init__(ctx, grid, speeds, np.full(len(nodes), grid.h**1.5), sqrt_m)
        self.nodes = nodes
        self.block_rows = block_rows
        self._a = np.sum((nodes - ctx.u1) ** 2, axis=1)
        self._S = None
        if materialize is None:
            materialize = grid.N <= DENSE_MAX_N
        if materialize:
            need = 8 * self.size**2
            if need > memory_budget:
                raise AssemblyOverflowError(
                    f"dense operator needs {need / 2**20:.0f} MiB > budget {memory_budget / 2**20:.0f} MiB")
            self._S = self._block(0, self.size)
        self.raw_cell_weight = singular_cell_weights(ctx, nodes, grid.h)
        self._finish(conservative)

    def _block(self, i0: int, i1: int) -> np.ndarray:
        """Rows ``i0:i1`` of the off-diagonal block ``h^3 G(v_i, v_j)`` (zero diagonal)."""
        V = self.nodes
        vb = V[i0:i1]
        s2 = (np.sum(vb * vb, axis=1)[:, None] + np.sum(V * V, axis=1)[None, :]
              - 2.0 * vb @ V.T)
        np.maximum(s2, 0.0, out=s2)
        idx = np.arange(i0, i1)
        s2[idx - i0, idx] = 1.0
        ab = self._a[i0:i1, None] - self._a[None, :]
        mu, rho1 = self.ctx.consts.mu, self.ctx.rho1
        E = -0.25 * rho1 * ((1 + mu) ** 2 * s2 + ab * ab / s2)
        np.maximum(E, EXP_FLOOR, out=E)
        G = np.exp(E)
        G /= np.sqrt(s2)
        G *= self.ctx.scale * self.grid.h**3
        G[idx - i0, idx] = 0.0
        return G

    def gain_offdiag(self, X):
        X = np.asarray(X, dtype=float)
        if self._S is not None:
            return self._S @ X
        out = np.empty_like(X)
        for i0 in range(0, self.size, self.block_rows):
            i1 = min(i0 + self.block_rows, self.size)
            out[i0:i1] = self._block(i0, i1) @ X
        return out

    def dense(self) -> np.ndarray:
        S = self._S if self._S is not None else self._block(0, self.size)
        T = S.copy()
        T[np.diag_indices_from(T)] = self.diag
        return T

    def _offdiag_rowsum_abs(self):
        return self.gain_offdiag(np.ones(self.size))


def _radial_s_integral(A: float, B, s1, s2):
    """``int_{s1}^{s2} exp(-A s^2 - B / s^2) ds`` for ``B >= 0``, overflow-free.

    Uses the antiderivative
    ``sqrt(pi)/(4 sqrt(A)) [e^{2c} erf(x) + e^{-2c} erf(y)]`` with ``c = sqrt(AB)``,
    ``x, y = sqrt(A) s +- sqrt(B)/s``, rewriting ``e^{2c} erfc(x)`` through ``erfcx``.
    """
    B, s1, s2 = np.broadcast_arrays(np.asarray(B, float), np.asarray(s1, float),
                                    np.asarray(s2, float))
    sa = math.sqrt(A)
    out = np.empty(B.shape)
    zero = B <= 0
    out[zero] = math.sqrt(math.pi) / (2 * sa) * (erf(sa * s2[zero]) - erf(sa * s1[zero]))
    b, lo, hi = B[~zero], s1[~zero], s2[~zero]
    sb = np.sqrt(b)

    def tail(s):
        # e^{2c} erfc(x) and y at s; both vanish / diverge cleanly as s -> 0
        with np.errstate(divide="ignore", invalid="ignore"):
            x = sa * s + sb / s
            y = sa * s - sb / s
            t = np.exp(-A * s * s - b / (s * s)) * erfcx(x)
        t = np.where(s > 0, t, 0.0)
        y = np.where(s > 0, y, -np.inf)
        return t, y

    t1, y1 = tail(lo)
    t2, y2 = tail(hi)
    body = (t1 - t2) + np.exp(-2 * sa * sb) * (erf(y2) - erf(y1))
    out[~zero] = math.sqrt(math.pi) / (4 * sa) * body
    return out


def reduce_isotropic(ctx: KernelContext, radial: RadialGrid, method: str | None = None,
                     n_gauss: int = 64) -> RadialGrid:
    """Fill the reduced symmetrized kernel of one angular sector.

    ``kappa(r, r') = (2 pi / (r r')) int_{|r-r'|}^{r+r'} G~(s; r, r') P_ell(cos) s ds``
    where ``G~`` is the effective symmetrized kernel as a function of
    ``s = |v - v'|``. For ``ell = 0`` the ``s`` integral has a closed form in
    error functions (``method="closed"``, the default); ``method="gauss"`` uses
    composite Gauss-Legendre and works for every ``ell``.
    """
    if method is None:
        method = "closed" if radial.ell == 0 else "gauss"
    r = radial.nodes
    mu, rho1 = ctx.consts.mu, ctx.rho1
    R, Rp = np.meshgrid(r, r, indexing="ij")
    lo, hi = np.abs(R - Rp), R + Rp
    A = 0.25 * rho1 * (1 + mu) ** 2
    B = 0.25 * rho1 * (R * R - Rp * Rp) ** 2
    if method == "closed":
        if radial.ell != 0:
            raise ValueError("closed-form reduction only for ell = 0")
        I = _radial_s_integral(A, B, lo, hi)
    elif method == "gauss":
        x, w = np.polynomial.legendre.leggauss(n_gauss)
        npan = 4
        I = np.zeros_like(R)
        for k in range(npan):
            a = lo + (hi - lo) * k / npan
            b = lo + (hi - lo) * (k + 1) / npan
            half, mid = (b - a) / 2, (b + a) / 2
            for xi, wi in zip(x, w):
                s = mid + half * xi
                val = np.exp(np.maximum(-A * s * s - B / (s * s), EXP_FLOOR))
                if radial.ell:
                    cos = np.clip((R * R + Rp * Rp - s * s) / (2 * R * Rp), -1, 1)
                    val = val * eval_legendre(radial.ell, cos)
                I += wi * half * val
    else:
        raise ValueError(f"unknown reduction method {method!r}")
    kappa = 2 * math.pi * ctx.scale * I / (R * Rp)
    kappa = 0.5 * (kappa + kappa.T)
    return RadialGrid(radial.L, radial.Nr, radial.width, radial.center, radial.ell, kappa)


class RadialOperator(DiscreteOperator):
    """Dense operator restricted to one angular sector."""

    kind = "radial-isotropic"

    def __init__(self, ctx: KernelContext, radial: RadialGrid, conservative: bool | None = None,
                 method: str | None = None):
        if radial.kappa is None:
            radial = reduce_isotropic(ctx, radial, method=method)
        r = radial.nodes
        M = ctx.equilibrium
        sqrt_m = np.exp(0.5 * M.log(ctx.u1 + np.outer(r, [0.0, 0.0, 1.0])))
        sw = np.sqrt(radial.weights)
        super().__init__(ctx, radial, r, sw, sqrt_m, mass_factor=4 * math.pi)
        if radial.ell != 0:
            self.kind = f"radial-ell{radial.ell}"
        S = sw[:, None] * radial.kappa * sw[None, :]
        self.raw_cell_weight = np.diag(S).copy()
        np.fill_diagonal(S, 0.0)
        self._S = S
        if conservative is None:
            conservative = radial.ell == 0
        if conservative and radial.ell != 0:
            raise ValueError("only the isotropic sector carries the conservation law")
        self._finish(conservative)
        if radial.ell != 0:
            self.column_correction = np.ones(self.size)

    def gain_offdiag(self, X):
        return self._S @ np.asarray(X, dtype=float)

    def dense(self) -> np.ndarray:
        T = self._S.copy()
        T[np.diag_indices_from(T)] = self.diag
        return T


def assemble_operator(ctx: KernelContext, grid, conservative: bool = True, **kw) -> DiscreteOperator:
    """Discrete collision operator on ``grid`` (Cartesian or radial)."""
    if isinstance(grid, VelocityGrid):
        return CartesianOperator(ctx, grid, conservative=conservative, **kw)
    if isinstance(grid, RadialGrid):
        if grid.ell != 0:
            conservative = False
        return RadialOperator(ctx, grid, conservative=conservative, **kw)
    raise GridMismatchError(f"unsupported grid type {type(grid).__name__}")


# --------------------------------------------------------------------------
# helpers used by the kernel module


def _nodal(grid, f):
    f = np.asarray(f, dtype=float)
    if f.shape[0] != grid.size:
        raise GridMismatchError(f"expected {grid.size} nodal values, got {f.shape[0]}")
    if not np.all(np.isfinite(f)):
        raise ValueError("f must be finite on the grid")
    return f


def _operator_for(ctx, grid, conservative=True):
    if isinstance(grid, DiscreteOperator):
        return grid
    return assemble_operator(ctx, grid, conservative=conservative)


def apply_gain(ctx: KernelContext, grid, f):
    op = _operator_for(ctx, grid)
    return op.gain_apply(_nodal(op.grid, f))


def dirichlet_double_integral(ctx: KernelContext, grid, f):
    """``-1/2 sum_{i != j} W_i W_j K_ij M_j (g_i - g_j)^2`` with ``g = f / M``.

    In symmetrized form ``W_i W_j K_ij M_j = e_i S_ij e_j`` with ``e = sqrt(W M)``,
    so only the off-diagonal block enters; the singular cell drops out.
    Accepts one vector or a 2D array of column vectors.
    """
    op = _operator_for(ctx, grid)
    f = _nodal(op.grid, f)
    e = op.eq_vector
    g = f / (op.sqrt_m**2 if f.ndim == 1 else op.sqrt_m[:, None] ** 2)
    eg = e * g if f.ndim == 1 else e[:, None] * g
    # sum_ij A_ij (g_i - g_j)^2 = 2 sum_i g_i^2 (S e)_i e_i - 2 (e g)^T S (e g)
    Se = op.gain_offdiag(e)
    quad = np.sum(eg * op.gain_offdiag(eg), axis=0)
    diag_part = np.sum((g * g) * (Se * e if f.ndim == 1 else (Se * e)[:, None]), axis=0)
    return -op.mass_factor * (diag_part - quad)


def weighted_norm_sq(op: DiscreteOperator, f) -> float:
    """``||f||_H^2 = int f^2 / M`` by the grid quadrature."""
    x = op.to_sym(f)
    return op.mass_factor * float(np.sum(x * x, axis=0))


# --------------------------------------------------------------------------
# operator cache


MAGIC = b"ILBK1"
CACHE_VERSION = 1
_HEADER = np.dtype([
    ("magic", "S5"), ("version", "<u4"), ("n", "<u8"), ("L", "<f8"),
    ("m", "<f8"), ("m1", "<f8"), ("eps", "<f8"), ("theta1", "<f8"),
    ("u1", "<f8", (3,)), ("norm_C", "<f8"), ("c_sigma", "<f8"),
])


class CacheVersionError(ValueError):
    pass


def matrix_checksum(T: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(T, dtype="<f8").tobytes()).hexdigest()


def write_matrix_file(path, T: np.ndarray, n: int, L: float, params: GasParameters,
                      norm_C: float, c_sigma: float, metadata: dict | None = None):
    """Binary little-endian header + row-major float64 payload, plus ``.json`` sidecar."""
    import os
    import tempfile
    from pathlib import Path
    path = Path(path)
    hdr = np.zeros(1, dtype=_HEADER)
    hdr["magic"] = MAGIC
    hdr["version"] = CACHE_VERSION
    hdr["n"] = n
    hdr["L"] = L
    for k in ("m", "m1", "eps", "theta1"):
        hdr[k] = getattr(params, k)
    hdr["u1"] = params.u1
    hdr["norm_C"] = norm_C
    hdr["c_sigma"] = c_sigma
    T = np.ascontiguousarray(T, dtype="<f8")
    meta = dict(metadata or {})
    meta.update({"shape": list(T.shape), "checksum": matrix_checksum(T)})
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(np.asarray(T.shape, dtype="<u8").tobytes())
        fh.write(T.tobytes())
    os.replace(tmp, path)
    side = path.with_suffix(path.suffix + ".json")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=side.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    os.replace(tmp, side)


def read_matrix_file(path):
    """Return ``(matrix, header dict, sidecar metadata)``."""
    from pathlib import Path
    path = Path(path)
    raw = path.read_bytes()
    hdr = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(hdr["magic"]) != MAGIC:
        raise CacheVersionError(f"{path}: not an operator cache file")
    if int(hdr["version"]) != CACHE_VERSION:
        raise CacheVersionError(f"{path}: cache version {int(hdr['version'])} != {CACHE_VERSION}")
    off = _HEADER.itemsize
    shape = tuple(int(x) for x in np.frombuffer(raw[off:off + 16], dtype="<u8"))
    off += 16
    T = np.frombuffer(raw[off:], dtype="<f8").reshape(shape).copy()
    header = {name: (hdr[name].tolist() if hasattr(hdr[name], "tolist") else hdr[name])
              for name in _HEADER.names if name != "magic"}
    side = path.with_suffix(path.suffix + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    if meta.get("checksum") and meta["checksum"] != matrix_checksum(T):
        raise CacheVersionError(f"{path}: checksum mismatch")
    return T, header, meta


def save_operator(op: DiscreteOperator, path, extra: dict | None = None):
    T = op.dense()
    n = op.grid.N if isinstance(op.grid, VelocityGrid) else op.grid.Nr
    meta = op.metadata()
    if op.ctx.provenance:
        meta["calibration"] = op.ctx.provenance
    if extra:
        meta.update(extra)
    write_matrix_file(path, T, n, op.grid.L, op.ctx.params, op.ctx.norm_C, op.ctx.c_sigma, meta)
    return path
