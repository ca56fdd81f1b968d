"""Discrete spectrum of the symmetrized collision operator.

The dense path calls LAPACK through :func:`numpy.linalg.eigh`. The matrix-free
path is a Lanczos iteration with full reorthogonalization whose tridiagonal
eigenproblem is handed to :func:`scipy.linalg.eigh_tridiagonal`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

DEFAULT_TOL = 1e-10


class ConvergenceError(RuntimeError):
    """Lanczos did not reach the requested residual; ``diagnostics`` has the history."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SpectrumResult:
    """Top eigenpairs of a symmetric operator, eigenvalues sorted descending.

    Attributes
    ----------
    eigenvalues : ndarray
    eigenvectors : ndarray or None
        Columns match ``eigenvalues``.
    residuals : ndarray
        ``||T x - lambda x||_2`` per pair.
    norm : float
        Estimate of ``||T||_2`` used to scale tolerances.
    nu0 : float or None
    sector : str
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None
    residuals: np.ndarray
    norm: float
    nu0: float | None = None
    sector: str = "matrix"
    method: str = "dense"
    info: dict = field(default_factory=dict)

    @property
    def lambda0(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[1])

    @property
    def gap(self) -> float:
        return float(self.eigenvalues[0] - self.eigenvalues[1])

    @property
    def eigvec0(self) -> np.ndarray | None:
        return None if self.eigenvectors is None else self.eigenvectors[:, 0]


def _as_operator(op):
    """Return ``(matvec, dense_or_None, size, nu0, sector)`` for supported inputs."""
    if isinstance(op, np.ndarray):
        A = np.asarray(op, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        return (lambda X: A @ X), A, A.shape[0], None, "matrix"
    size = op.size
    nu0 = float(op.ctx.nu0) if hasattr(op, "ctx") else None
    dense = None
    if getattr(op, "_S", None) is not None:
        dense = op.dense()
    return op.matvec, dense, size, nu0, getattr(op, "kind", "operator")


def _residuals(matvec, vals, vecs):
    R = matvec(vecs) - vecs * vals[None, :]
    return np.linalg.norm(R, axis=0)


def lanczos(matvec, n: int, k: int, tol: float = DEFAULT_TOL, seed: int = 0,
            max_iter: int | None = None, v0=None, norm: float | None = None):
    """Largest ``k`` eigenpairs of a symmetric operator.

    Full reorthogonalization (two Gram-Schmidt passes) keeps the basis
    orthonormal, so there are no ghost eigenvalues. Convergence is checked
    every few steps with the true residual ``||T y - theta y||``.

    A single start vector spans at most one direction of each eigenspace, so
    repeated eigenvalues (for example the threefold ``l = 1`` levels of a
    cubic grid) may appear once, or fewer times than their multiplicity.
    """
    rng = np.random.default_rng(seed)
    max_iter = min(n, max_iter or max(4 * k + 40, 120))
    q = rng.standard_normal(n) if v0 is None else np.array(v0, dtype=float)
    q /= np.linalg.norm(q)
    Q = np.zeros((n, max_iter + 1))
    Q[:, 0] = q
    alpha, beta = [], []
    history = []
    tnorm = norm
    for j in range(max_iter):
        w = matvec(Q[:, j])
        a = float(Q[:, j] @ w)
        w -= a * Q[:, j] + (beta[-1] * Q[:, j - 1] if j > 0 else 0.0)
        for _ in range(2):
            w -= Q[:, :j + 1] @ (Q[:, :j + 1].T @ w)
        b = float(np.linalg.norm(w))
        alpha.append(a)
        done = b < 1e-14 * max(1.0, abs(a))
        m = j + 1
        if m >= k and (m % 5 == 0 or done or m == max_iter):
            theta, S = eigh_tridiagonal(np.array(alpha), np.array(beta))
            order = np.argsort(theta)[::-1][:k]
            ritz_res = np.abs(b * S[-1, order])
            if tnorm is None:
                tnorm = float(np.max(np.abs(theta)))
            history.append((m, float(ritz_res.max())))
            if done or ritz_res.max() <= tol * tnorm or m == max_iter:
                Y = Q[:, :m] @ S[:, order]
                vals = theta[order]
                res = _residuals(matvec, vals, Y)
                history[-1] = (m, float(res.max()))
                if res.max() <= tol * tnorm * 10 or done:
                    return vals, Y, res, {"iterations": m, "history": history}
                if m == max_iter:
                    raise ConvergenceError(
                        f"Lanczos stalled after {m} steps: max residual {res.max():.3e} "
                        f"> {tol * tnorm:.3e}", {"iterations": m, "history": history})
        if done:
            break
        beta.append(b)
        Q[:, j + 1] = w / b
    raise ConvergenceError("Lanczos terminated without convergence",
                           {"iterations": len(alpha), "history": history})


def eigendecompose(op, k: int | None = None, tol: float = DEFAULT_TOL, seed: int = 0,
                   method: str = "auto", v0=None, max_iter: int | None = None) -> SpectrumResult:
    """Top ``k`` eigenpairs (all of them when ``k`` is None on the dense path).

    Parameters
    ----------
    op : ndarray or DiscreteOperator
    method : {"auto", "dense", "lanczos"}
        ``auto`` is dense whenever a materialized matrix exists.
    v0 : array, optional
        Lanczos start vector. A start vector invariant under a symmetry group
        keeps the Krylov space inside that symmetry sector.
    """
    matvec, dense, n, nu0, sector = _as_operator(op)
    if k is not None and k < 2:
        raise ValueError("k must be at least 2")
    if method == "auto":
        method = "dense" if dense is not None else "lanczos"
    if method == "dense":
        A = dense if dense is not None else matvec(np.eye(n))
        vals, vecs = np.linalg.eigh(A)
        vals, vecs = vals[::-1], vecs[:, ::-1]
        tnorm = float(max(abs(vals[0]), abs(vals[-1])))
        if k is not None:
            vals, vecs = vals[:k], vecs[:, :k]
        res = _residuals(matvec, vals, vecs)
        info = {}
    elif method == "lanczos":
        if k is None:
            raise ValueError("lanczos needs an explicit k")
        tnorm = float(op.norm_estimate()) if hasattr(op, "norm_estimate") else None
        vals, vecs, res, info = lanczos(matvec, n, k, tol=tol, seed=seed, v0=v0,
                                        max_iter=max_iter, norm=tnorm)
        tnorm = tnorm or float(np.max(np.abs(vals)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return SpectrumResult(eigenvalues=np.asarray(vals), eigenvectors=vecs,
                          residuals=np.asarray(res), norm=tnorm, nu0=nu0,
                          sector=sector, method=method, info=info)


def cosine_with(vec, ref) -> float:
    return float(abs(np.dot(vec, ref)) / (np.linalg.norm(vec) * np.linalg.norm(ref)))


def coercivity_check(op, result: SpectrumResult, n_samples: int = 50, seed: int = 0,
                     rel_tol: float = 1e-8):
    """Rayleigh quotients of random vectors orthogonal to the leading eigenvector.

    By the min-max principle every such quotient is at most ``lambda_1``.
    Returns ``(passed, max_quotient, bound)``.
    """
    matvec, _, n, _, _ = _as_operator(op)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n_samples))
    e0 = result.eigvec0 / np.linalg.norm(result.eigvec0)
    X -= np.outer(e0, e0 @ X)
    rq = np.sum(X * matvec(X), axis=0) / np.sum(X * X, axis=0)
    bound = result.lambda1 + rel_tol * result.norm
    return bool(np.all(rq <= bound)), float(rq.max()), float(bound)


def spectrum_report(result: SpectrumResult, ctx=None, op=None, n_coercivity: int = 50,
                    seed: int = 0, tol: float = DEFAULT_TOL) -> dict:
    """Summary of a spectrum relative to the essential threshold ``nu0``.

    The eigenvalues in ``(-nu0, 0]`` are the discrete part. Those at or below
    ``-nu0`` approximate the essential range and are only counted.
    """
    nu0 = float(ctx.nu0) if ctx is not None else result.nu0
    vals = result.eigenvalues
    discrete = vals[vals > -nu0] if nu0 is not None else vals
    cluster = vals[vals <= -nu0] if nu0 is not None else vals[:0]
    rep = {
        "sector": result.sector,
        "method": result.method,
        "nu0": nu0,
        "lambda0": result.lambda0,
        "lambda1": result.lambda1,
        "gap": result.gap,
        "norm": result.norm,
        "max_eigenvalue_rel": float(vals[0] / result.norm),
        "max_residual_rel": float(np.max(result.residuals) / result.norm),
        "n_discrete": int(len(discrete)),
        "discrete": [float(x) for x in discrete],
        "n_cluster": int(len(cluster)),
        "cluster_top": float(cluster[0]) if len(cluster) else None,
    }
    if nu0 is not None and len(discrete) > 1:
        # distance from the first nonzero eigenvalue to the threshold, relative to nu0
        rep["separation"] = float((result.lambda1 + nu0) / nu0)
    if op is not None and result.eigenvectors is not None:
        ok, rq, bound = coercivity_check(op, result, n_coercivity, seed)
        rep["coercivity"] = {"passed": ok, "max_rayleigh": rq, "bound": bound}
        if hasattr(op, "eq_vector"):
            rep["eigvec0_cosine"] = cosine_with(result.eigvec0, op.eq_vector)
    return rep


def spectrum_csv(result: SpectrumResult) -> str:
    """``index,eigenvalue,residual,sector,region`` rows; region is discrete or cluster."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "eigenvalue", "residual", "sector", "region"])
    nu0 = result.nu0 if result.nu0 is not None else math.inf
    for i, (lam, r) in enumerate(zip(result.eigenvalues, result.residuals)):
        region = "discrete" if lam > -nu0 else "cluster"
        w.writerow([i, repr(float(lam)), repr(float(r)), result.sector, region])
    return buf.getvalue()


def gap_stability(gaps, rel: float = 0.02) -> tuple[bool, float]:
    """Relative spread of gaps from successive resolutions against ``rel``."""
    g = np.asarray(gaps, dtype=float)
    spread = float(abs(g[-1] - g[-2]) / abs(g[-1]))
    return spread <= rel, spread
