"""Command line front end: ``ilbk <command> [--config PATH] [--set k=v] [--out DIR] ...``.

Commands
--------
validate        analytic identity suite (detailed balance, symmetry, collision law)
calibrate       resolve the kernel normalization and persist the provenance record
sigma           collision frequency table plus oracle spot checks
kernel          Carleman-bound and tail-mass scans
spectrum        eigenvalues of the discrete operator (radial or 3D)
evolve          homogeneous relaxation trace with decay-rate fit
transport-demo  periodic-slab splitting run with total-mass series
report          aggregate the JSON summaries in the output directory
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

COMMANDS = ("validate", "calibrate", "sigma", "kernel", "spectrum", "evolve",
            "transport-demo", "report")


class MissingCalibrationError(RuntimeError):
    pass


class HashMismatchError(RuntimeError):
    pass


def _set_threads(k):
    if k is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(k)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ilbk", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="JSON configuration file")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override one config key (repeatable)")
    ap.add_argument("--out", type=Path, help="output directory (default $ILBK_OUT or ./ilbk-out)")
    ap.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    ap.add_argument("--threads", type=int, help="BLAS/OpenMP threads")
    ap.add_argument("-q", "--quiet", action="store_true", help="suppress the config echo")
    return ap


# --------------------------------------------------------------------------
# helpers


def _context(cfg, out: Path, require_calibration: bool = True):
    from ilbk.config import gas_hash, gas_parameters
    from ilbk.kernel import KernelContext
    params = gas_parameters(cfg)
    path = out / "calibration.json"
    if not path.exists():
        if require_calibration:
            raise MissingCalibrationError(
                f"no calibration in {out}; run `ilbk calibrate` with the same gas parameters first")
        return KernelContext.from_params(params)
    rec = json.loads(path.read_text())
    if rec.get("gas_hash") != gas_hash(cfg):
        raise MissingCalibrationError(
            f"{path} was produced for different gas parameters; rerun `ilbk calibrate`")
    prov = rec["provenance"]
    return KernelContext.from_params(params, norm_C=prov["norm_C"], c_sigma=prov["c_sigma"],
                                     calibrated=True, provenance=prov)


def _write_json(out: Path, name: str, payload: dict, chash: str):
    from ilbk.config import atomic_write
    payload = {"config_hash": chash, **payload}
    atomic_write(out / name, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(out: Path, name: str, body: str, chash: str):
    from ilbk.config import atomic_write
    atomic_write(out / name, f"# config_hash={chash}\n" + body)


def _csv(header, rows) -> str:
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if not isinstance(x, str) else x for x in row])
    return buf.getvalue()


# --------------------------------------------------------------------------
# validate


def identity_suite(cfg, seed: int = 0, n_pairs: int = 10_000, n_collisions: int = 100_000):
    """Analytic identities on random samples; returns an ordered list of check dicts."""
    import warnings

    import numpy as np

    from ilbk.config import gas_parameters
    from ilbk.gas import GasParameters
    from ilbk.kernel import (KernelContext, detailed_balance_residual, sigma_of_speed,
                             symmetrized_G, symmetrized_G_by_definition)
    from ilbk.oracle import direct_collision_map, inverse_collision_map

    rng = np.random.default_rng(seed)
    params = gas_parameters(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ctx = KernelContext.from_params(params)
    consts = ctx.consts
    checks = []

    def add(name, value, limit):
        checks.append({"name": name, "value": float(value), "limit": float(limit),
                       "passed": bool(value <= limit)})

    sd = ctx.width
    v = ctx.u1 + sd * rng.standard_normal((n_pairs, 3)) * 1.5
    v2 = ctx.u1 + sd * rng.standard_normal((n_pairs, 3)) * 1.5
    add("detailed_balance", np.max(detailed_balance_residual(ctx, v, v2)), 1e-12)

    g12 = symmetrized_G(ctx, v, v2)
    g21 = symmetrized_G(ctx, v2, v)
    add("G_symmetry", np.max(np.abs(g12 - g21) / np.maximum(np.abs(g12), 1e-300)), 1e-12)
    gdef = symmetrized_G_by_definition(ctx, v, v2)
    ok = g12 > 1e-250
    add("G_definition", np.max(np.abs(g12[ok] - gdef[ok]) / gdef[ok]), 1e-10)

    w = ctx.u1 + np.sqrt(params.theta1 / params.m1) * rng.standard_normal((n_collisions, 3))
    vv = ctx.u1 + sd * rng.standard_normal((n_collisions, 3)) * 2
    n = rng.standard_normal((n_collisions, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    vs, ws = inverse_collision_map(consts, vv, w, n)
    q, qs = vv - w, vs - ws
    scale = np.linalg.norm(q, axis=1) / params.eps
    add("restitution", np.max(np.abs(np.sum(qs * n, axis=1) + np.sum(q * n, axis=1) / params.eps)
                              / scale), 1e-14)
    p_before = params.m * vs + params.m1 * ws
    p_after = params.m * vv + params.m1 * w
    pscale = params.m * np.linalg.norm(vs, axis=1) + params.m1 * np.linalg.norm(ws, axis=1)
    add("momentum", np.max(np.linalg.norm(p_after - p_before, axis=1) / pscale), 1e-14)
    vd, wd = direct_collision_map(consts, vs, ws, n)
    add("map_inverse", np.max(np.abs(vd - vv) / (1 + np.abs(vv))), 1e-12)
    e_before = params.m * np.sum(vs**2, axis=1) + params.m1 * np.sum(ws**2, axis=1)
    e_after = params.m * np.sum(vv**2, axis=1) + params.m1 * np.sum(w**2, axis=1)
    add("energy_nonincrease", max(0.0, np.max((e_after - e_before) / e_before)), 1e-14)

    r = np.linspace(0, 20 * sd, 64)
    base = sigma_of_speed(ctx, r)
    dev = 0.0
    for eps in (0.3, 0.7, 1.0):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            other = KernelContext.from_params(GasParameters(params.m, params.m1, eps,
                                                            params.theta1, params.u1))
        dev = max(dev, np.max(np.abs(sigma_of_speed(other, r) - base) / base))
    add("sigma_eps_independence", dev, 1e-12)

    lhs = params.m / (2 * consts.theta_sharp)
    rhs = params.m1 * (1 + consts.mu) / (2 * params.theta1)
    add("equilibrium_exponent", abs(lhs - rhs) / rhs, 1e-12)
    return checks


# --------------------------------------------------------------------------
# commands


def cmd_validate(cfg, out, chash):
    checks = identity_suite(cfg, seed=cfg["seed"])
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3e} (limit {c['limit']:.0e})")
    _write_json(out, "validate.json", {"checks": checks}, chash)
    for i, c in enumerate(checks):
        if not c["passed"]:
            return 10 + i
    return 0


def cmd_calibrate(cfg, out, chash):
    from ilbk.config import atomic_write, gas_hash
    from ilbk.oracle import calibrate
    ctx = _context(cfg, out, require_calibration=False)
    cal = calibrate(ctx, seed=cfg["seed"])
    rec = {"config_hash": chash, "gas_hash": gas_hash(cfg), "gas": cfg["gas"],
           "provenance": cal.provenance}
    atomic_write(out / "calibration.json", json.dumps(rec, indent=2, sort_keys=True) + "\n")
    print(f"norm_C = {cal.norm_C} (measured {cal.provenance['norm_C_measured']:.9f}); "
          f"c_sigma = pi (measured {cal.provenance['c_sigma_measured']:.12f})")
    return 0


def cmd_sigma(cfg, out, chash):
    import numpy as np

    from ilbk.kernel import sigma_of_speed
    from ilbk.oracle import make_rng, sigma_oracle
    ctx = _context(cfg, out)
    sc = cfg["sigma"]
    r = np.linspace(0, sc["r_max"] * ctx.width, sc["n_r"])
    s = sigma_of_speed(ctx, r)
    _write_csv(out, "sigma.csv", _csv(["r", "sigma", "sigma_over_1_plus_r"],
                                      zip(r, s, s / (1 + r))), chash)
    rng = make_rng(cfg["seed"])
    rows, worst, failed = [], 0.0, 0
    for _ in range(sc["n_oracle"]):
        v = ctx.u1 + ctx.width * rng.uniform(-3, 3, 3)
        est, se = sigma_oracle(ctx, v, budget=sc["budget"], rng=rng)
        cf = float(sigma_of_speed(ctx, np.linalg.norm(v - ctx.u1)))
        worst = max(worst, abs(est / cf - 1))
        # a point fails only when it misses both 0.5% and three standard errors
        failed += abs(est - cf) > max(5e-3 * cf, 3 * se)
        rows.append([*v, cf, est, se])
    _write_csv(out, "sigma_oracle.csv",
               _csv(["vx", "vy", "vz", "closed_form", "oracle", "stderr"], rows), chash)
    ratio = s / (1 + r)
    _write_json(out, "sigma.json", {"nu0": ctx.nu0, "max_oracle_rel_dev": worst,
                                    "oracle_failures": int(failed),
                                    "ratio_min": float(ratio.min()),
                                    "ratio_max": float(ratio.max())}, chash)
    print(f"nu0 = {ctx.nu0:.10g}; oracle max rel. deviation {worst:.3e} ({failed} failures)")
    return 0 if failed == 0 else 1


def cmd_kernel(cfg, out, chash):
    import numpy as np

    from ilbk.kernel import carleman_bound_scan, tail_mass_scan
    ctx = _context(cfg, out)
    kc = cfg["kernel"]
    r = np.linspace(0, kc["r_max"] * ctx.width, kc["n_r"])
    rows, summary = [], {"carleman": {}, "tail": {}}
    for p, q in ((2, 0), (1, 2)):
        scan = carleman_bound_scan(ctx, p, q, r)
        summary["carleman"][f"p{p}_q{q}"] = {"sup": scan["sup"], "growing": scan["growing"]}
        rows.extend([p, q, x, y] for x, y in zip(scan["r"], scan["product"]))
    _write_csv(out, "kernel_scan.csv", _csv(["p", "q", "r", "product"], rows), chash)
    for rho in kc["rho"]:
        sup, at = tail_mass_scan(ctx, rho * ctx.width)
        summary["tail"][str(rho)] = {"sup": sup, "r_at_sup": at}
    _write_json(out, "kernel.json", summary, chash)
    bad = [k for k, v in summary["carleman"].items() if v["growing"]]
    print(json.dumps(summary, indent=1))
    return 1 if bad else 0


def _radial_operator(ctx, cfg, Nr=None, ell=0):
    from ilbk.discretization import assemble_operator, build_radial_grid
    return assemble_operator(ctx, build_radial_grid(cfg["grid"]["L"], Nr or cfg["grid"]["Nr"],
                                                    ctx, ell=ell))


def cmd_spectrum(cfg, out, chash):
    import numpy as np

    from ilbk.discretization import assemble_operator, build_grid, save_operator
    from ilbk.spectral import eigendecompose, gap_stability, spectrum_csv, spectrum_report
    ctx = _context(cfg, out)
    sc = cfg["spectrum"]
    if sc["path"] == "radial":
        op = _radial_operator(ctx, cfg)
        res = eigendecompose(op, tol=sc["tol"])
        finer = eigendecompose(_radial_operator(ctx, cfg, cfg["grid"]["Nr"] + 32), k=2)
        sectors = {}
        for ell in range(1, cfg["grid"]["ell_max"] + 1):
            r_ell = eigendecompose(_radial_operator(ctx, cfg, ell=ell), k=2)
            sectors[str(ell)] = r_ell.lambda0
        grid_spec = op.grid.spec()
    else:
        grid = build_grid(cfg["grid"]["L"], cfg["grid"]["N"], ctx.params, ctx)
        op = assemble_operator(ctx, grid)
        iso = np.exp(-op.speeds**2 / ctx.width**2)
        res = eigendecompose(op, k=sc["k"], tol=sc["tol"], seed=cfg["seed"])
        finer = None
        sectors = {"isotropic_lambda1": eigendecompose(op, k=2, v0=op.eq_vector + iso,
                                                       method="lanczos").lambda1}
        grid_spec = grid.spec()
    rep = spectrum_report(res, ctx, op=op, seed=cfg["seed"])
    rep.pop("discrete")
    if finer is not None:
        ok, spread = gap_stability([res.gap, finer.gap])
        rep["gap_refined"] = finer.gap
        rep["gap_stable"] = ok
        rep["gap_spread"] = spread
    rep["sectors"] = sectors
    rep["grid"] = grid_spec
    body = spectrum_csv(res)
    _write_csv(out, "spectrum.csv", body, chash)
    _write_json(out, "spectrum.json", rep, chash)
    if sc["cache"]:
        save_operator(op, out / "operator.bin", {"config_hash": chash})
    print(f"nu0 = {rep['nu0']:.8g}  lambda0 = {rep['lambda0']:.3e}  lambda1 = {rep['lambda1']:.8g}  "
          f"discrete = {rep['n_discrete']}  cluster = {rep['n_cluster']}")
    passed = rep["max_eigenvalue_rel"] <= 1e-10 and rep["coercivity"]["passed"]
    return 0 if passed and rep.get("gap_stable", True) else 1


def initial_profile(op, ctx, name: str):
    """Named isotropic initial data on a grid (nodal values).

    Every profile lies in the weighted space with norm ``int f^2 / M``, which
    needs Gaussian temperatures below ``2 theta#``.
    """
    import numpy as np

    from ilbk.gas import Maxwellian
    th = ctx.consts.theta_sharp
    m = ctx.params.m
    r = op.speeds
    pts = ctx.u1 + np.outer(r, [0.0, 0.0, 1.0])
    w = ctx.width
    if name == "hot":
        return Maxwellian(m, 1.2 * th, ctx.params.u1)(pts)
    if name == "cold":
        return Maxwellian(m, 0.5 * th, ctx.params.u1)(pts)
    if name == "bimodal":
        return (Maxwellian(m, 0.3 * th, ctx.params.u1)(pts)
                + 0.5 * Maxwellian(m, 1.25 * th, ctx.params.u1)(pts))
    if name == "shell":
        return np.exp(-((r - 1.5 * w) ** 2) / (0.1 * w * w))
    if name == "flat":
        # plateau with a smooth edge at two widths
        return 0.5 * (1.0 - np.tanh((r - 2 * w) / (0.2 * w)))
    raise ValueError(f"unknown initial profile {name!r}")


INITIAL_PROFILES = ("hot", "cold", "bimodal", "shell", "flat")


def cmd_evolve(cfg, out, chash):
    from ilbk.evolution import evolve_homogeneous, fit_decay_rate
    from ilbk.spectral import eigendecompose
    ctx = _context(cfg, out)
    op = _radial_operator(ctx, cfg)
    sv = cfg["solver"]
    f0 = initial_profile(op, ctx, sv["initial"])
    t_end = sv["t_end"] or 30.0 / ctx.nu0
    trace = evolve_homogeneous(op, f0, t_end, dt=sv["dt"], method=sv["method"],
                               n_samples=sv["n_samples"])
    rate = fit_decay_rate(trace)
    lam1 = eigendecompose(op, k=2).lambda1
    _write_csv(out, "trace.csv", trace.to_csv(), chash)
    trace.dump_final(out / "final_state.bin", op, {"config_hash": chash})
    summary = {"fitted_rate": rate, "lambda1": lam1, "mass_drift": trace.mass_drift(),
               "monotone": {c: trace.monotone(c) for c in ("dist_H", "H_quadratic", "H_xlogx", "I")},
               "initial": sv["initial"], "method": sv["method"], "t_end": t_end}
    _write_json(out, "evolve.json", summary, chash)
    print(f"fitted rate {rate:.6g} vs |lambda1| {abs(lam1):.6g}; mass drift {summary['mass_drift']:.2e}")
    return 0 if all(summary["monotone"].values()) else 1


def cmd_transport(cfg, out, chash):
    import numpy as np

    from ilbk.discretization import assemble_operator, build_grid
    from ilbk.evolution import commensurate_dt, transport_demo
    ctx = _context(cfg, out)
    tc = cfg["transport"]
    op = assemble_operator(ctx, build_grid(tc["L"], tc["N"], ctx.params, ctx))
    dt = commensurate_dt(op, tc["Nx"])
    M = ctx.equilibrium

    def f0(x, v):
        return (1 + 0.5 * np.sin(2 * np.pi * x)) * M(v)

    times, masses, _ = transport_demo(op, tc["Nx"], f0, tc["steps"] * dt, dt,
                                      collisions=bool(tc["collisions"]))
    drift = float(np.max(np.abs(masses - masses[0])) / masses[0])
    _write_csv(out, "transport.csv", _csv(["t", "total_mass"], zip(times, masses)), chash)
    _write_json(out, "transport.json", {"dt": dt, "steps": tc["steps"], "mass_drift": drift}, chash)
    print(f"{tc['steps']} steps, dt = {dt:.4g}: total mass drift {drift:.2e}")
    return 0 if drift <= 1e-10 else 1


def cmd_report(cfg, out, chash):
    summaries = {}
    for p in sorted(out.glob("*.json")):
        if p.name in ("report.json", "effective_config.json", "calibration.json"):
            continue
        data = json.loads(p.read_text())
        if data.get("config_hash") != chash:
            raise HashMismatchError(f"{p.name} has config hash {data.get('config_hash')} != {chash}")
        summaries[p.stem] = data
    rows = []
    if "evolve" in summaries:
        ev = summaries["evolve"]
        lam1 = abs(ev["lambda1"])
        rel = abs(ev["fitted_rate"] - lam1) / lam1
        rows.append({"check": "rate_vs_gap", "fitted_rate": ev["fitted_rate"], "gap": lam1,
                     "rel_diff": rel, "passed": rel <= 0.10})
    _write_json(out, "report.json", {"sources": sorted(summaries), "rows": rows}, chash)
    _write_csv(out, "report.csv", _csv(["check", "fitted_rate", "gap", "rel_diff", "passed"],
                                       [[r["check"], r["fitted_rate"], r["gap"], r["rel_diff"],
                                         str(r["passed"])] for r in rows]), chash)
    for r in rows:
        print(f"{r['check']}: fitted {r['fitted_rate']:.6g} vs gap {r['gap']:.6g} "
              f"({100 * r['rel_diff']:.2f}%) {'PASS' if r['passed'] else 'FAIL'}")
    return 0 if all(r["passed"] for r in rows) else 1


HANDLERS = {"validate": cmd_validate, "calibrate": cmd_calibrate, "sigma": cmd_sigma,
            "kernel": cmd_kernel, "spectrum": cmd_spectrum, "evolve": cmd_evolve,
            "transport-demo": cmd_transport, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    from ilbk.config import ConfigError, atomic_write, config_hash, default_out_dir, parse_config
    from ilbk.discretization import CacheVersionError
    try:
        cfg = parse_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    atomic_write(out / "effective_config.json",
                 json.dumps({"config_hash": chash, **cfg}, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(f"config {chash}: " + json.dumps(cfg, sort_keys=True))
    try:
        return HANDLERS[args.command](cfg, out, chash)
    except (MissingCalibrationError, HashMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CacheVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
