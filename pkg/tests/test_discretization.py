import math

import numpy as np
import pytest
from scipy import integrate

from conftest import PARAM_SETS, make_ctx
from ilbk.discretization import (AssemblyOverflowError, CacheVersionError, CartesianOperator,
                                 GridMismatchError, InvalidDimensionError, assemble_operator,
                                 apply_gain, build_grid, build_radial_grid,
                                 dirichlet_double_integral, read_matrix_file, reduce_isotropic,
                                 save_operator, singular_cell_weights, unit_cube_inverse_distance,
                                 weighted_norm_sq, write_matrix_file)
from ilbk.kernel import kernel_integral
from ilbk.spectral import eigendecompose

C1 = 6 * math.log((1 + math.sqrt(3)) / math.sqrt(2)) - math.pi / 2


def _raw_residual(op):
    e = op.eq_vector
    return np.linalg.norm(op.matvec(e)) / np.linalg.norm(op.sigma * e)


def test_grid_geometry(default_ctx):
    g = build_grid(4, 8, default_ctx.params)
    assert g.size == 512
    assert g.weights.sum() == pytest.approx((2 * 4 * g.width) ** 3, rel=1e-14)
    # cell centres: no node sits on u1
    assert np.min(np.linalg.norm(g.nodes - default_ctx.u1, axis=1)) == pytest.approx(
        math.sqrt(3) * g.h / 2, rel=1e-12)


@pytest.mark.parametrize("p", PARAM_SETS)
def test_grid_integrates_equilibrium(p):
    ctx = make_ctx(p)
    g = build_grid(6, 24, p)
    assert np.dot(g.weights, ctx.equilibrium(g.nodes)) == pytest.approx(1.0, abs=1e-6)
    r = build_radial_grid(8, 64, ctx)
    M = ctx.equilibrium(ctx.u1 + np.outer(r.nodes, [1.0, 0, 0]))
    assert 4 * math.pi * np.dot(r.weights, M) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("N, L", [(7, 4), (10.0, 4), (6, 4), (8, 0), (8, -1)])
def test_invalid_dimensions(default_ctx, N, L):
    with pytest.raises(InvalidDimensionError):
        build_grid(L, N, default_ctx.params)


def test_unit_cube_constant():
    val, _ = integrate.tplquad(lambda z, y, x: 1 / math.sqrt(x * x + y * y + z * z),
                               0, 0.5, 0, 0.5, 0, 0.5, epsabs=1e-13, epsrel=1e-12)
    assert 8 * val == pytest.approx(C1, rel=1e-11)
    assert unit_cube_inverse_distance() == pytest.approx(C1, rel=1e-12)
    assert C1 == pytest.approx(2.380077363979, abs=1e-12)


def test_singular_cell_against_adaptive(drift_ctx):
    """The face-pyramid rule for int_cell G(v, v+z) dz against adaptive cubature."""
    ctx = drift_ctx
    h = 0.4 * ctx.width
    w = ctx.width * np.array([0.7, -0.3, 0.2])
    v = (ctx.u1 + w)[None]
    c2 = 0.25 * ctx.rho1 * (1 + ctx.consts.mu) ** 2
    a = float(w @ w)

    def G(z):
        s2 = np.sum(z * z, axis=-1)
        b = np.sum((w + z) ** 2, axis=-1)
        return ctx.scale / np.sqrt(s2) * np.exp(-c2 * s2 - 0.25 * ctx.rho1 * (a - b) ** 2 / s2)

    ref = integrate.cubature(G, [-h / 2] * 3, [h / 2] * 3, rtol=1e-10, atol=0, rule="gk21",
                             points=[np.zeros(3)])
    assert ref.status == "converged"
    assert singular_cell_weights(ctx, v, h)[0] == pytest.approx(ref.estimate, rel=1e-6)
    assert singular_cell_weights(ctx, v, h, n=16)[0] == pytest.approx(ref.estimate, rel=1e-9)


@pytest.mark.parametrize("p", PARAM_SETS)
def test_conservative_operator_structure(p):
    ctx = make_ctx(p)
    op = assemble_operator(ctx, build_grid(6, 10, p))
    T = op.dense()
    assert np.array_equal(T, T.T)
    e = op.eq_vector
    assert np.linalg.norm(T @ e) <= 1e-12 * np.linalg.norm(op.sigma * e)
    assert np.all(op.gershgorin_upper() <= 1e-12 * op.norm_estimate())
    assert np.allclose(op.matvec(e), T @ e, atol=1e-14 * op.norm_estimate())


def test_raw_residual_decreases_3d(default_ctx):
    res = [_raw_residual(assemble_operator(default_ctx, build_grid(6, N, default_ctx.params),
                                           conservative=False)) for N in (10, 14)]
    assert res[1] < res[0]


def test_raw_residual_radial_second_order(default_ctx):
    res = [_raw_residual(assemble_operator(default_ctx, build_radial_grid(8, n, default_ctx),
                                           conservative=False)) for n in (64, 128, 256)]
    assert res[0] > res[1] > res[2]
    assert res[2] < 1e-3
    assert res[1] / res[2] == pytest.approx(4.0, rel=0.1)


def test_grid_gain_against_kernel_integral(default_ctx):
    ctx = default_ctx
    op = assemble_operator(ctx, build_grid(6, 14, ctx.params))
    rng = np.random.default_rng(0)
    probe = lambda x: np.exp(-np.sum((x - 0.3) ** 2, axis=1) / 1.5) * (1 + 0.2 * x[:, 0])
    gain = op.gain_apply(probe(op.grid.nodes))
    idx = rng.choice(np.flatnonzero(op.speeds < 2 * ctx.width), 5, replace=False)
    for i in idx:
        ref = kernel_integral(ctx, op.grid.nodes[i], probe)
        assert gain[i] == pytest.approx(ref, rel=0.03)


@pytest.mark.parametrize("p", PARAM_SETS[:3])
def test_radial_equilibrium_and_kappa(p):
    ctx = make_ctx(p)
    grid = reduce_isotropic(ctx, build_radial_grid(8, 256, ctx))
    assert np.array_equal(grid.kappa, grid.kappa.T)
    raw = assemble_operator(ctx, grid, conservative=False)
    M = raw.sqrt_m**2
    rel = np.abs(raw.gain_apply(M) / (raw.sigma * M) - 1)
    # the kernel narrows in s as mu grows, so the error constant depends on the gas
    assert rel[raw.speeds < 4 * ctx.width].max() < 3e-3


def test_radial_closed_form_matches_gauss(drift_ctx):
    base = build_radial_grid(8, 48, drift_ctx)
    closed = reduce_isotropic(drift_ctx, base, method="closed").kappa
    gauss = reduce_isotropic(drift_ctx, base, method="gauss", n_gauss=64).kappa
    np.testing.assert_allclose(gauss, closed, rtol=1e-8, atol=1e-300)
    with pytest.raises(ValueError):
        reduce_isotropic(drift_ctx, build_radial_grid(8, 16, drift_ctx, ell=1), method="closed")


def test_radial_higher_sectors(default_ctx):
    op = assemble_operator(default_ctx, build_radial_grid(8, 96, default_ctx, ell=1))
    assert op.kind == "radial-ell1" and not op.conservative
    vals = np.linalg.eigvalsh(op.dense())
    assert vals.max() < 0


def test_3d_isotropic_lambda1_matches_radial(default_ctx):
    ctx = default_ctx
    rad = eigendecompose(assemble_operator(ctx, build_radial_grid(8, 256, ctx)), k=3)
    op = assemble_operator(ctx, build_grid(6, 12, ctx.params))
    v0 = op.eq_vector + np.exp(-op.speeds**2 / 3) * op.speeds**2
    res = eigendecompose(op, k=3, method="lanczos", v0=v0, tol=1e-9)
    assert res.lambda1 == pytest.approx(rad.lambda1, rel=0.01)


def test_dirichlet_routes(default_ctx, rng):
    ctx = default_ctx
    for grid in (build_radial_grid(8, 64, ctx), build_grid(6, 10, ctx.params)):
        op = assemble_operator(ctx, grid)
        F = (op.sqrt_m**2)[:, None] * rng.normal(size=(op.size, 8))
        d = dirichlet_double_integral(ctx, op, F)
        X = op.to_sym(F)
        quad = op.mass_factor * np.sum(X * op.matvec(X), axis=0)
        np.testing.assert_allclose(d, quad, rtol=1e-8)
        assert np.all(d <= 0)


def test_grid_mismatch(default_ctx):
    op = assemble_operator(default_ctx, build_grid(4, 8, default_ctx.params))
    with pytest.raises(GridMismatchError):
        apply_gain(default_ctx, op, np.ones(10))
    with pytest.raises(GridMismatchError):
        assemble_operator(default_ctx, object())
    with pytest.raises(ValueError):
        apply_gain(default_ctx, op, np.full(op.size, np.nan))


def test_memory_budget(default_ctx):
    with pytest.raises(AssemblyOverflowError):
        CartesianOperator(default_ctx, build_grid(4, 12, default_ctx.params),
                          materialize=True, memory_budget=2**20)


def test_matrix_free_matches_dense(default_ctx, rng):
    g = build_grid(5, 12, default_ctx.params)
    dense = CartesianOperator(default_ctx, g, materialize=True)
    free = CartesianOperator(default_ctx, g, materialize=False, block_rows=100)
    X = rng.normal(size=(g.size, 3))
    np.testing.assert_allclose(free.matvec(X), dense.matvec(X), rtol=1e-12,
                               atol=1e-13 * dense.norm_estimate())


def test_cache_roundtrip(default_ctx, tmp_path):
    op = assemble_operator(default_ctx, build_radial_grid(8, 32, default_ctx))
    path = save_operator(op, tmp_path / "T.bin")
    T, hdr, meta = read_matrix_file(path)
    assert np.array_equal(T, op.dense())
    assert hdr["n"] == 32 and hdr["eps"] == 0.5 and hdr["norm_C"] == default_ctx.norm_C
    assert meta["shape"] == [32, 32]


def test_cache_rejects_bad_files(default_ctx, tmp_path):
    T = np.arange(16.0).reshape(4, 4)
    p = tmp_path / "T.bin"
    write_matrix_file(p, T, 4, 1.0, default_ctx.params, 0.5, math.pi)
    raw = bytearray(p.read_bytes())
    raw[-1] ^= 0x01
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    (tmp_path / "bad.bin.json").write_text((tmp_path / "T.bin.json").read_text())
    with pytest.raises(CacheVersionError, match="checksum"):
        read_matrix_file(tmp_path / "bad.bin")
    raw = bytearray(p.read_bytes())
    raw[5:9] = (99).to_bytes(4, "little")
    (tmp_path / "old.bin").write_bytes(bytes(raw))
    with pytest.raises(CacheVersionError, match="version"):
        read_matrix_file(tmp_path / "old.bin")
    (tmp_path / "junk.bin").write_bytes(b"\0" * 200)
    with pytest.raises(CacheVersionError):
        read_matrix_file(tmp_path / "junk.bin")


def test_weighted_norm(default_ctx):
    op = assemble_operator(default_ctx, build_radial_grid(8, 64, default_ctx))
    M = op.sqrt_m**2
    # int M^2 / M dv = int M dv = 1
    assert weighted_norm_sq(op, M) == pytest.approx(1.0, abs=1e-12)
