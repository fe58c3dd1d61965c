"""Command-line front end: model ingestion, experiment runs, reports.

Three subcommands::

    rytower validate --model gm3
    rytower run <experiment> --model gm3 --seed 7 --out runs
    rytower report --out runs

``--model`` accepts a builtin name (``gm3``, ``geo``, ``single``) or a
path to a JSON model file (see :mod:`rytower.models` for the format).
``run`` writes ``<out>/<experiment>/report.json`` plus ``tables.csv``
(suppressed by ``--format json``) and prints one pass/fail line per
acceptance criterion it exercised.  ``report`` merges everything under
``--out`` into a plain-text dashboard and renders figures next to it.

Exit codes: 0 when every exercised check passed, 1 on assumption or
criterion failures (including numerical guard errors raised by the
library), 2 on usage and I/O errors.  ``--jobs`` spreads independent
work units (frequency-grid points, oracle z-points) over a thread pool;
results are aggregated in a fixed order, so the artifacts do not depend
on the worker count.
"""

import argparse
import glob
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, limits, report
from .cones import ConeParams, certify_contraction, complex_radius
from .env import Environment, validate_family
from .errors import RandomTowerError
from .models import BUILTIN_MODELS, load_model
from .ops import AtomTable, BaseIndicator, TowerFn, TransferCocycle
from .tower import TowerBundle


class UsageError(Exception):
    """Bad invocation or unreadable input; maps to exit code 2."""


# --------------------------------------------------------------------------
# argument plumbing


def parse_int_list(text):
    """``"4..16"``, ``"4..64..4"`` (inclusive, stepped) or ``"8,16,32"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            pieces = part.split("..")
            if len(pieces) not in (2, 3) or not all(pieces):
                raise UsageError(f"bad range {part!r}; expected a..b[..step]")
            a, b = int(pieces[0]), int(pieces[1])
            step = int(pieces[2]) if len(pieces) == 3 else 1
            out.extend(range(a, b + 1, step))
        elif part:
            out.append(int(part))
    if not out:
        raise UsageError(f"empty integer list {text!r}")
    return tuple(out)


def parse_float_list(text):
    try:
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise UsageError(f"bad float list {text!r}: {exc}") from None


def _load_model_spec(spec, seed):
    """Resolve a builtin name or model file to ``(model, seed)``."""
    if spec in BUILTIN_MODELS:
        model, file_seed = BUILTIN_MODELS[spec](), 0
    else:
        try:
            model, file_seed = load_model(spec)
        except FileNotFoundError:
            raise UsageError(f"model file not found: {spec}") from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"malformed model file {spec}: {exc}") from None
    return model, (seed if seed is not None else file_seed)


def _observable(model, name):
    if name == "base":
        return BaseIndicator()
    if name == "mixed":
        tables = {0: (0.3, -1.1, 0.7), 1: (1.2, -0.4)}
    elif name == "irr":
        tables = {
            0: (0.0, math.sqrt(2.0) / 2.0, 1.0),
            1: (math.sqrt(3.0) / 3.0, 1.0),
        }
    else:
        raise UsageError(f"unknown observable {name!r}")
    for sym in model.symbols:
        row = tables.get(sym.symbol_id)
        if row is None or len(row) != len(sym.atoms):
            raise UsageError(
                f"observable {name!r} does not cover model {model.name!r} "
                f"(symbol {sym.label} has {len(sym.atoms)} atoms)"
            )
    return AtomTable(tables, name=name)


def _pmap(fn, items, jobs):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _coc(env, depth=1):
    return TransferCocycle(TowerBundle(env), depth=depth)


# --------------------------------------------------------------------------
# experiment runners; each returns (reports, criterion lines)


def run_mgf_oracle(args, env, exp_dir):
    n_max = max(parse_int_list(args.n)) if args.n else 12
    coc = _coc(env, args.depth)
    obs = coc.centered(_observable(env.model, args.obs))
    laws = {
        kind: [limits._mu_law(coc, args.fiber, n, obs, kind)
               for n in range(1, n_max + 1)]
        for kind in ("equivariant", "reference")
    }
    grid = np.linspace(-0.5, 0.5, 5)
    zs = [complex(re, im) for re in grid for im in grid]

    def check(z):
        worst = {}
        for kind, law in laws.items():
            gap = 0.0
            for n, (s, w) in enumerate(law, start=1):
                want = complex(np.dot(w, np.exp(z * s)))
                got = limits.mgf_value(coc, args.fiber, n, z, obs, kind)
                gap = max(gap, abs(got - want) / abs(want))
            worst[kind] = gap
        return worst

    per_z = _pmap(check, zs, args.jobs)
    rows = [
        {"re": z.real, "im": z.imag,
         "worst_rel_equivariant": w["equivariant"],
         "worst_rel_reference": w["reference"]}
        for z, w in zip(zs, per_z)
    ]
    worst = max(max(w.values()) for w in per_z)
    passed = worst <= 1e-10
    rep = limits.ExperimentReport(
        kind="mgf-oracle",
        params={"model": env.model.name, "seed": env.seed,
                "fiber": args.fiber, "n_max": n_max, "depth": args.depth,
                "observable": obs.name},
        rows=rows, fits={"worst_rel": worst}, passed=passed,
    )
    report.write_cylinder_csv(
        os.path.join(exp_dir, "cylinders.csv"), coc, args.fiber,
        min(n_max, 6), obs,
    )
    crit = report.CriterionLine(
        "mgf-oracle", passed,
        f"worst relative gap {worst:.3g} vs 1e-10 "
        f"({len(zs)} z-points, n <= {n_max}, both measure kinds)",
    )
    return [rep], [crit]


def run_duality(args, env, exp_dir):
    n_pairs = args.samples or 100
    coc = _coc(env, args.depth)
    obs = _observable(env.model, args.obs)
    rng = np.random.default_rng(env.seed)
    z_cycle = (0.0, 0.5j, 0.3, -0.2 + 0.4j)
    rows = []
    for i in range(n_pairs):
        fiber = i % 8
        z = z_cycle[i % len(z_cycle)]
        g = TowerFn(fiber, coc.depth,
                    rng.uniform(-1.0, 1.0, coc.index(fiber).n))
        f = TowerFn(fiber + 1, coc.depth,
                    rng.uniform(-1.0, 1.0, coc.index(fiber + 1).n))
        gap = abs(coc.duality_gap(fiber, f, g, z=z, obs=obs))
        rows.append({"pair": i, "fiber": fiber, "z_re": z.real,
                     "z_im": z.imag, "gap": gap})
    dens = coc.density_result(args.fiber)
    integral = float(np.dot(np.real(dens.values),
                            coc.index(args.fiber).mass_mt))
    worst = max(r["gap"] for r in rows)
    fits = {
        "worst_gap": worst,
        "tv_defect": dens.equivariance_defect,
        "h_integral_err": abs(integral - 1.0),
        "h_min": dens.h_min,
    }
    passed = (worst <= 1e-10 and fits["tv_defect"] <= 1e-8
              and fits["h_integral_err"] <= 1e-10 and fits["h_min"] > 0)
    rep = limits.ExperimentReport(
        kind="duality",
        params={"model": env.model.name, "seed": env.seed,
                "pairs": n_pairs, "fiber": args.fiber,
                "depth": args.depth, "observable": obs.name},
        rows=rows, fits=fits, passed=passed,
    )
    crit = report.CriterionLine(
        "duality", passed,
        f"worst gap {worst:.3g} vs 1e-10 over {n_pairs} pairs; "
        f"push-forward defect {fits['tv_defect']:.3g} vs 1e-8; "
        f"density integral off by {fits['h_integral_err']:.3g}; "
        f"min h {fits['h_min']:.3g} > 0",
    )
    return [rep], [crit]


def run_ly(args, env, exp_dir):
    n_samples = args.samples or 200
    coc = _coc(env, args.depth)
    obs = _observable(env.model, args.obs)
    rng = np.random.default_rng(env.seed)
    t_cycle = (0.0, 0.7, 2.0)
    rows = []
    for i in range(n_samples):
        fiber = i % 4
        n_steps = 1 + i % 8
        t = t_cycle[i % len(t_cycle)]
        g = TowerFn(fiber, coc.depth,
                    rng.uniform(0.1, 2.0, coc.index(fiber).n))
        check = coc.ly_check(fiber, g, n_steps, t, obs)
        rows.append({
            "sample": i, "fiber": fiber, "n_steps": n_steps, "t": t,
            "slack_high_sup": check.slack_high_sup,
            "slack_high_lip": check.slack_high_lip,
            "slack_low_sup": check.slack_low_sup,
            "slack_low_lip": check.slack_low_lip,
            "worst": check.worst(), "r_n": check.r_n,
        })
    min_slack = min(r["worst"] for r in rows)
    passed = min_slack >= -1e-9
    rep = limits.ExperimentReport(
        kind="lasota-yorke",
        params={"model": env.model.name, "seed": env.seed,
                "samples": n_samples, "depth": args.depth,
                "observable": obs.name},
        rows=rows, fits={"min_slack": min_slack}, passed=passed,
    )
    crit = report.CriterionLine(
        "lasota-yorke", passed,
        f"minimum slack {min_slack:.3g} over {n_samples} samples "
        f"(N in 1..8, t in {t_cycle})",
    )
    return [rep], [crit]


def run_cone_certify(args, env, exp_dir):
    k = max(parse_int_list(args.k)) if args.k else 12
    params = ConeParams(a=8.0, b=512.0, c=512.0, eps=args.cone_eps, s=3)
    coc3 = _coc(env, depth=3)
    cert = certify_contraction(
        coc3, args.fiber, k, params, n_samples=args.samples or 200,
        seed=env.seed,
    )
    fits = {
        "delta_achieved": cert.delta_achieved,
        "diameter_bound": cert.diameter_bound,
        "eigen_defect": cert.eigen_defect,
        "implied_step_rate": cert.implied_step_rate(),
        "certificate_passed": cert.passed,
    }
    radius_rep = None
    radius_ok = True
    if not args.no_radius:
        obs = _observable(env.model, args.obs)
        radius_rep = complex_radius(coc3, args.fiber, k, params, obs, cert)
        fits["radius_r"] = radius_rep.r
        fits["radius_criterion"] = radius_rep.delta
        radius_ok = radius_rep.r > 0 and radius_rep.delta < 1.0
    passed = cert.passed and radius_ok
    rep = limits.ExperimentReport(
        kind="cone-certify",
        params={"model": env.model.name, "seed": env.seed, "k": k,
                "fiber": args.fiber, "samples": args.samples or 200,
                "cone": {"a": params.a, "b": params.b, "c": params.c,
                         "eps": params.eps, "s": params.s,
                         "delta": params.delta}},
        rows=[fits], fits=fits, passed=passed,
        notes=tuple(str(f) for f in cert.failures),
    )
    payload = {"certificate": report._jsonable(cert)}
    if radius_rep is not None:
        payload["complex_radius"] = report._jsonable(radius_rep)
    report.write_json(os.path.join(exp_dir, "certificate.json"), payload)
    detail = (f"shrink factor {cert.delta_achieved:.4f} vs "
              f"{params.delta:g} after k={k} steps")
    if radius_rep is not None:
        detail += (f"; complex radius r={radius_rep.r:.3g} with "
                   f"criterion {radius_rep.delta:.3f} < 1")
    crit = report.CriterionLine("cone-contraction", passed, detail)
    return [rep], [crit]


def run_rpf_convergence(args, env, exp_dir):
    ns = parse_int_list(args.n) if args.n else (64,)
    n_max = max(ns)
    n_g = args.samples or 20
    coc = _coc(env, args.depth)
    obs = coc.centered(_observable(env.model, args.obs))
    rng = np.random.default_rng(env.seed)
    rows, degenerate = [], 0
    worst_r2 = None
    for z in (0.0, 0.1, 0.1j):
        ref, _ = limits._eigen_chain(
            coc, args.fiber - 64, args.fiber + n_max + 1, z, obs
        )
        for i in range(n_g):
            g0 = rng.uniform(0.3, 3.0, coc.index(args.fiber).n)
            xs, res = limits.convergence_profile(
                coc, args.fiber, z, obs, g0, n_max, reference=ref
            )
            slope, amp, r2, used = limits.fit_log_decay(xs, res)
            rows.append({"sample": i, "z_re": z.real, "z_im": z.imag,
                         "slope": slope, "r2": r2, "n_used": used})
            if used >= 3:
                worst_r2 = r2 if worst_r2 is None else min(worst_r2, r2)
            else:
                degenerate += 1
            if i == 0:
                rows.extend(
                    {"z_re": z.real, "z_im": z.imag, "n": int(n),
                     "resid": float(r)} for n, r in zip(xs, res)
                )
    notes = []
    if degenerate:
        notes.append(
            f"{degenerate} profiles hit rounding level inside the "
            f"transient (exact finite-time coupling); excluded from fits"
        )
    passed = worst_r2 is None or worst_r2 >= 0.98
    fits = {"worst_r2": worst_r2, "degenerate_profiles": degenerate}
    rep = limits.ExperimentReport(
        kind="rpf-convergence",
        params={"model": env.model.name, "seed": env.seed,
                "fiber": args.fiber, "n_max": n_max, "samples": n_g,
                "depth": args.depth, "observable": obs.name},
        rows=rows, fits=fits, passed=passed, notes=tuple(notes),
    )
    report.write_density_csv(os.path.join(exp_dir, "density.csv"), coc,
                             args.fiber)
    if worst_r2 is None:
        detail = "all profiles converged exactly before a fit was possible"
    else:
        detail = (f"worst fit R2 {worst_r2:.4f} vs 0.98 over "
                  f"{3 * n_g - degenerate} profiles, n <= {n_max}")
    crit = report.CriterionLine("rpf-convergence", passed, detail)
    return [rep], [crit]


def run_be(args, env, exp_dir):
    coc = _coc(env, args.depth)
    obs = coc.centered(_observable(env.model, args.obs))
    rep = limits.berry_esseen_experiment(
        coc, obs, fiber=args.fiber,
        n_exact=parse_int_list(args.n) if args.n else tuple(range(4, 17)),
        n_mc=parse_int_list(args.n_mc) if args.n_mc else (32, 64, 128, 256),
        n_paths=args.paths or 10**6, seed=env.seed, kind=args.measure,
    )
    crit = report.CriterionLine(
        "berry-esseen", bool(rep.passed),
        f"exact scaled-distance band ratio "
        f"{rep.fits['exact_band_ratio']:.3f} vs 3; Monte Carlo log-log "
        f"slope {rep.fits['mc_slope']:.3f} in [-0.5, 0.15]",
    )
    return [rep], [crit]


def run_lclt(args, env, exp_dir):
    coc = _coc(env, args.depth)
    if args.variant == "aperiodic":
        obs = coc.centered(_observable(env.model, args.obs or "irr"))
        rep = limits.lclt_aperiodic_experiment(
            coc, obs, fiber=args.fiber,
            n_list=parse_int_list(args.n) if args.n else (8, 10, 12),
            kind=args.measure,
        )
        return [rep], []
    obs = _observable(env.model, args.obs or "base")
    rep = limits.lclt_lattice_experiment(
        coc, obs, fiber=args.fiber,
        n_gauss=parse_int_list(args.n) if args.n else (8, 16, 32, 64),
        kind=args.measure, cross_check_n=10,
    )
    enum_gap = rep.fits["enumeration_gap"]
    passed = bool(rep.passed) and enum_gap <= 1e-10
    gaps = [r["sup_gap"] for r in rep.rows]
    crit = report.CriterionLine(
        "lclt", passed,
        f"sup gaps {', '.join(f'{g:.4f}' for g in gaps)} "
        f"(each within 1.2x the previous); inversion vs enumeration "
        f"{enum_gap:.3g} vs 1e-10",
    )
    return [rep], [crit]


def run_deviations(args, env, exp_dir):
    variant = args.variant or "large"
    if variant not in ("large", "moderate"):
        raise UsageError(f"deviations variant must be large or moderate, "
                         f"got {variant!r}")
    coc = _coc(env, args.depth)
    obs = coc.centered(_observable(env.model, args.obs))
    n_large = args.n_large or 2048
    t_grid = np.linspace(args.t_lo, args.t_hi, args.t_points)
    curve = limits.pressure_curve(coc, obs, t_grid,
                                  n_steps=min(n_large, 1024),
                                  fiber_samples=(args.fiber,))
    rep = limits.deviations_experiment(
        coc, obs, variant, fiber=args.fiber,
        eps_list=parse_float_list(args.eps) if args.eps else (0.12, 0.18),
        x_list=parse_float_list(args.x) if args.x else (0.5, 1.0),
        n_large=n_large, n_paths=args.paths or 100_000, seed=env.seed,
        curve=curve,
    )
    limit = 15.0 if variant == "large" else 20.0
    crit = report.CriterionLine(
        f"deviations-{variant}", bool(rep.passed),
        f"worst tail-exponent gap {rep.fits['worst_gap_pct']:.1f}% vs "
        f"{limit:.0f}% (n = {n_large}, window |eps| <= "
        f"{rep.params['ldp_delta']:.3f})",
    )
    return [rep], [crit]


def run_mixing(args, env, exp_dir):
    coc = _coc(env, args.depth)
    rep = limits.mixing_experiment(
        coc, fiber=args.fiber,
        k_list=parse_int_list(args.k) if args.k else tuple(range(1, 13)),
        n_samples=args.samples or 50, seed=env.seed,
    )
    report.write_decay_csv(
        os.path.join(exp_dir, "decay.csv"),
        [(r["k"], r["d_hat"]) for r in rep.rows],
        rep.fits["slope"], rep.fits["amplitude"],
    )
    crit = report.CriterionLine(
        "decay", bool(rep.passed),
        f"mixing coefficient fit R2 {rep.fits['r2']:.4f} vs 0.95 "
        f"({rep.fits['n_points']} points)",
    )
    return [rep], [crit]


def run_correlation(args, env, exp_dir):
    coc = _coc(env, args.depth)
    obs = coc.centered(_observable(env.model, args.obs))
    rep = limits.correlation_experiment(
        coc, obs, obs, fiber=args.fiber,
        n_list=parse_int_list(args.n) if args.n else tuple(range(1, 21)),
    )
    report.write_decay_csv(
        os.path.join(exp_dir, "decay.csv"),
        [(r["n"], abs(r["cov"])) for r in rep.rows],
        rep.fits["slope"], rep.fits["amplitude"],
    )
    crit = report.CriterionLine(
        "decay", bool(rep.passed),
        f"correlation fit R2 {rep.fits['r2']:.4f} vs 0.95 "
        f"({rep.fits['n_points']} usable points, fiber {args.fiber})",
    )
    return [rep], [crit]


def run_variance(args, env, exp_dir):
    n = max(parse_int_list(args.n)) if args.n else 12
    coc = _coc(env, args.depth)
    obs = coc.centered(_observable(env.model, args.obs))
    vrep = limits.variance_report(coc, args.fiber, n, obs)
    ests = (vrep.fd, vrep.exact, vrep.green_kubo)
    pairwise = max(
        abs(a - b) / max(abs(a), abs(b))
        for i, a in enumerate(ests) for b in ests[i + 1:]
    )
    curvature_gap = max(abs(r[1] - r[2]) for r in vrep.per_n)
    passed = pairwise <= 1e-4 and curvature_gap <= 1e-4
    rows = [{"n": r[0], "var_mu": r[1], "pi2": r[2], "var_ref": r[3]}
            for r in vrep.per_n]
    rep = limits.ExperimentReport(
        kind="variance",
        params={"model": env.model.name, "seed": env.seed, "n": n,
                "fiber": args.fiber, "observable": obs.name},
        rows=rows,
        fits={"fd": vrep.fd, "exact": vrep.exact,
              "green_kubo": vrep.green_kubo,
              "reference_exact": vrep.reference_exact,
              "spread": vrep.spread, "pairwise_rel": pairwise,
              "curvature_gap": curvature_gap},
        passed=passed,
    )
    crit = report.CriterionLine(
        "variance", passed,
        f"three estimators within {pairwise:.3g} relative (vs 1e-4) at "
        f"n={n}; log-MGF curvature vs exact variance within "
        f"{curvature_gap:.3g} across the scan",
    )
    return [rep], [crit]


def run_pressure(args, env, exp_dir):
    coc = _coc(env, args.depth)
    obs = coc.centered(_observable(env.model, args.obs))
    t_grid = np.linspace(args.t_lo, args.t_hi, args.t_points)
    curve = limits.pressure_curve(coc, obs, t_grid,
                                  n_steps=args.n_steps,
                                  fiber_samples=(args.fiber,))
    rows = [{"t": float(t), "p": float(p)}
            for t, p in zip(curve.t_grid, curve.p_values)]
    rows += [{"x": float(x), "rate": float(r), "quadratic": float(q)}
             for x, r, q in zip(curve.x_grid, curve.rate_values,
                                curve.rate_quadratic)]
    rep = limits.ExperimentReport(
        kind="pressure",
        params={"model": env.model.name, "seed": env.seed,
                "fiber": args.fiber, "n_steps": curve.n_steps,
                "observable": obs.name},
        rows=rows,
        fits={"sigma2": curve.sigma2,
              "spline_curvature": curve.spline_curvature,
              "ldp_delta": curve.ldp_delta,
              "fiber_spread": curve.spread},
        passed=None,
    )
    print(f"pressure: sigma2 = {curve.sigma2:.6f}, certified deviation "
          f"window |eps| <= {curve.ldp_delta:.4f}")
    return [rep], []


def run_spectral_radius(args, env, exp_dir):
    obs = _observable(env.model, args.obs)
    span = obs.lattice_span
    t_hi = math.pi / span if span else args.t_hi
    grid = np.linspace(-t_hi, t_hi, args.points)
    grid = grid[np.abs(grid) >= args.exclude]
    chunks = np.array_split(grid, max(args.jobs or 1, 1))

    def sweep(ts):
        if len(ts) == 0:
            return []
        return limits.fixed_fiber_spectral_radius(
            env.model, args.symbol, ts, obs
        )

    rows = [{"t": t, "radius": r}
            for chunk in _pmap(sweep, chunks, args.jobs)
            for t, r in chunk]
    rows.sort(key=lambda r: r["t"])
    radii = [r["radius"] for r in rows]
    max_step = float(np.max(np.abs(np.diff(radii)))) if len(radii) > 1 \
        else 0.0
    edge = rows[-1]["radius"]
    passed = max(radii) <= 1.0 + 1e-9 and edge < 1.0 and max_step < 0.1
    rep = limits.ExperimentReport(
        kind="spectral-radius",
        params={"model": env.model.name, "symbol": args.symbol,
                "points": args.points, "exclude": args.exclude,
                "observable": obs.name,
                "t_max": float(t_hi)},
        rows=rows,
        fits={"max_radius": max(radii), "edge_radius": edge,
              "max_step": max_step},
        passed=passed,
    )
    print(f"spectral-radius: max {max(radii):.4f}, at band edge "
          f"{edge:.4f}, largest grid jump {max_step:.4f}")
    return [rep], []


EXPERIMENTS = {
    "mgf-oracle": run_mgf_oracle,
    "duality": run_duality,
    "ly": run_ly,
    "cone-certify": run_cone_certify,
    "rpf-convergence": run_rpf_convergence,
    "be": run_be,
    "lclt": run_lclt,
    "deviations": run_deviations,
    "mixing": run_mixing,
    "correlation": run_correlation,
    "variance": run_variance,
    "pressure": run_pressure,
    "spectral-radius": run_spectral_radius,
}


# --------------------------------------------------------------------------
# subcommands


def _config_echo(args, extra=None):
    skip = {"func"}
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    cfg["version"] = __version__
    if extra:
        cfg.update(extra)
    return cfg


def cmd_validate(args):
    model, seed = _load_model_spec(args.model, args.seed)
    out_dir = os.path.join(args.out, "validate")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.json")
    try:
        fam = validate_family(model)
    except RandomTowerError as exc:
        payload = {
            "version": __version__,
            "config": report._jsonable(_config_echo(args)),
            "model": model.name,
            "error": type(exc).__name__,
            "message": str(exc),
        }
        report.write_json(path, payload)
        print(f"validate {model.name}: FAIL ({type(exc).__name__}: {exc})")
        return 1
    bundle = TowerBundle(Environment(model, seed))
    payload = {
        "version": __version__,
        "config": report._jsonable(_config_echo(args)),
        "model": model.name,
        "family": report._jsonable(fam),
        "tower": report.tower_summary(bundle, args.fiber),
    }
    report.write_json(path, payload)
    print(f"validate {model.name}: PASS (tail c2 = {fam.tail_c2:.4f}, "
          f"eps0 = {fam.eps0_default:.4f}, "
          f"weighted mass <= {fam.weight_sum_bound:.4f})")
    return 0


def cmd_run(args):
    model, seed = _load_model_spec(args.model, args.seed)
    env = Environment(model, seed)
    # variants get their own directory so lattice/aperiodic or
    # large/moderate runs do not clobber each other's reports
    dir_name = args.experiment + (f"-{args.variant}" if args.variant else "")
    exp_dir = os.path.join(args.out, dir_name)
    os.makedirs(exp_dir, exist_ok=True)
    runner = EXPERIMENTS[args.experiment]
    reports, criteria = runner(args, env, exp_dir)
    config = _config_echo(args, {"resolved_model": model.name,
                                 "resolved_seed": seed})
    report.write_json(os.path.join(exp_dir, "report.json"),
                      report.report_payload(reports, config, criteria))
    if args.format == "csv":
        report.write_tables_csv(os.path.join(exp_dir, "tables.csv"),
                                reports, config)
    for line in criteria:
        print(line.render())
    if not criteria:
        print(f"{args.experiment}: report written to {exp_dir}")
    return 0 if all(c.passed for c in criteria) else 1


def cmd_report(args):
    paths = sorted(glob.glob(os.path.join(args.out, "*", "report.json")))
    payloads = []
    for p in paths:
        try:
            payloads.append(report.load_json(p))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"skipping unreadable {p}: {exc}", file=sys.stderr)
    dashboard = report.render_dashboard(payloads)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "dashboard.txt"), "w") as fh:
        fh.write(dashboard)
    print(dashboard, end="")
    if not args.no_figures:
        figs = report.render_figures(os.path.join(args.out, "figures"),
                                     payloads)
        print(f"{len(figs)} figures under {os.path.join(args.out, 'figures')}")
    any_fail = any(
        not c["passed"] for p in payloads for c in p.get("criteria", ())
    )
    return 1 if any_fail else 0


# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rytower",
        description=__doc__.split("\n\n")[0],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version",
                        version=f"rytower {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", default="gm3",
                       help="builtin name (gm3, geo, single) or model file")
        p.add_argument("--seed", type=int, default=None,
                       help="driving-sequence seed (default: model file "
                            "value, 0 for builtins)")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--fiber", type=int, default=0)

    v = sub.add_parser("validate", help="check the standing assumptions")
    common(v)
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser(
        "run", help="run one experiment and write its report",
        epilog="Experiment-specific flags: --n (exact step counts, e.g. "
               "4..16), --n-mc (Monte Carlo step counts), --paths, --k "
               "(block length / lag list), --variant "
               "(lclt: lattice|aperiodic; deviations: large|moderate), "
               "--eps / --x (deviation levels), --obs (base|mixed|irr).",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common(r)
    r.add_argument("experiment", choices=sorted(EXPERIMENTS))
    r.add_argument("--jobs", type=int, default=1,
                   help="thread workers for independent grid points")
    r.add_argument("--format", choices=("csv", "json"), default="csv",
                   help="csv keeps report.json + tables.csv; json drops "
                        "the table file")
    r.add_argument("--depth", type=int, default=1,
                   help="cylinder resolution of the function space")
    r.add_argument("--measure", choices=("equivariant", "reference"),
                   default="equivariant")
    r.add_argument("--obs", default="base")
    r.add_argument("--n", default=None)
    r.add_argument("--n-mc", dest="n_mc", default=None)
    r.add_argument("--paths", type=int, default=None)
    r.add_argument("--samples", type=int, default=None)
    r.add_argument("--k", default=None)
    r.add_argument("--variant", default=None)
    r.add_argument("--eps", default=None)
    r.add_argument("--x", default=None)
    r.add_argument("--n-large", dest="n_large", type=int, default=None)
    r.add_argument("--n-steps", dest="n_steps", type=int, default=1024)
    r.add_argument("--t-lo", dest="t_lo", type=float, default=-2.0)
    r.add_argument("--t-hi", dest="t_hi", type=float, default=2.4)
    r.add_argument("--t-points", dest="t_points", type=int, default=23)
    r.add_argument("--cone-eps", dest="cone_eps", type=float, default=0.2)
    r.add_argument("--no-radius", dest="no_radius", action="store_true",
                   help="skip the complex-radius step of cone-certify")
    r.add_argument("--symbol", type=int, default=0,
                   help="fixed symbol for the spectral-radius sweep")
    r.add_argument("--points", type=int, default=33)
    r.add_argument("--exclude", type=float, default=0.25,
                   help="frequency neighborhood of 0 left out of the sweep")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("report", help="merge runs into a dashboard")
    d.add_argument("--out", default="runs")
    d.add_argument("--no-figures", dest="no_figures", action="store_true")
    d.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RandomTowerError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
