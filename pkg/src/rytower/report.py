"""Artifact emission: JSON reports, delimited tables, and figures.

Serialization conventions
-------------------------
``tables.csv`` uses the long schema ``experiment, n, statistic, value,
ci_low, ci_high``: one line per (row, statistic) pair of each experiment
report, fit parameters appended with an empty ``n`` column and a
``fit:`` prefix.  The confidence columns are filled only for Monte-Carlo
statistics that carry a distribution-free band; exact quantities leave
them empty.  Float cells are written with ``repr`` (shortest
round-trip), so identical resolved configs produce byte-identical files.

Decay tables use ``n, value, fit_residual`` with the residual written in
log space against the fitted exponential and left empty once the value
sits at rounding level.  Cylinder dumps use ``depth, word, floor,
mass_m, mass_mu, birkhoff_sum`` with the word rendered as
``floor:atom`` steps joined by ``-``.

JSON payloads embed the resolved config and the library version; key
order is fixed only for convenience, not contract.  Non-finite floats
are emitted as the strings ``"inf"``, ``"-inf"`` and ``"nan"`` to stay
inside the interchange grammar.
"""

import csv
import dataclasses
import json
import math
import os

import numpy as np

from . import __version__
from .limits import RESIDUAL_FLOOR, ExperimentReport

# Acceptance checklist rendered by the dashboard.  Each experiment run
# tags its report with the criteria it exercised; anything never tagged
# shows up as NOT RUN.
CRITERIA = (
    ("mgf-oracle", "operator MGF matches brute-force cylinder enumeration"),
    ("duality", "adjoint identity, equivariant density and push-forward defect"),
    ("lasota-yorke", "all four uniform inequality slacks nonnegative"),
    ("cone-contraction", "projective contraction certificate and complex radius"),
    ("rpf-convergence", "exponential convergence of normalized iterates"),
    ("berry-esseen", "Kolmogorov distance scaling in the step count"),
    ("lclt", "lattice point probabilities sharpen to the Gaussian profile"),
    ("deviations-large", "tail exponents track the rate function"),
    ("deviations-moderate", "tail exponents track the quadratic rate"),
    ("decay", "mixing and correlation tables fit exponentials"),
    ("variance", "variance estimators agree pairwise and stay bounded"),
)


@dataclasses.dataclass(frozen=True)
class CriterionLine:
    """One pass/fail verdict as printed by the runner."""

    name: str
    passed: bool
    detail: str

    def render(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"criterion {self.name}: {status} -- {self.detail}"


# --------------------------------------------------------------------------
# JSON


def _jsonable(obj):
    if isinstance(obj, (bool, int, str)) or obj is None:
        return obj
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, complex):
        return {"re": _jsonable(obj.real), "im": _jsonable(obj.imag)}
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            f.name: _jsonable(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
        }
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        return [_jsonable(v) for v in obj]
    return repr(obj)


def report_payload(reports, config, criteria=()):
    """Bundle experiment reports with the resolved config and version."""
    return {
        "version": __version__,
        "config": _jsonable(config),
        "criteria": [_jsonable(c) for c in criteria],
        "reports": [_jsonable(r) for r in reports],
    }


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# delimited tables


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (np.generic,)):
        v = v.item()
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_INDEX_KEYS = ("n", "k", "t", "eps", "x", "re", "sample", "pair")
# bands: statistic -> row key holding its symmetric half-width
_BAND_KEYS = {"distance": "dkw"}


def table_rows(report: ExperimentReport):
    """Long-format rows ``(experiment, n, statistic, value, lo, hi)``."""
    out = []
    for row in report.rows:
        idx = next((row[k] for k in _INDEX_KEYS if k in row), "")
        for key in sorted(row):
            val = row[key]
            if isinstance(val, (tuple, list, np.ndarray)):
                continue  # nested tables go to JSON only
            lo = hi = None
            band_key = _BAND_KEYS.get(key)
            if band_key and band_key in row:
                lo = val - row[band_key]
                hi = val + row[band_key]
            out.append((report.kind, idx, key, val, lo, hi))
    for key in sorted(report.fits):
        val = report.fits[key]
        if isinstance(val, (tuple, list, np.ndarray)):
            continue
        out.append((report.kind, "", f"fit:{key}", val, None, None))
    if report.passed is not None:
        out.append((report.kind, "", "passed", report.passed, None, None))
    return out


def write_tables_csv(path, reports, config=None):
    """Canonical CSV emission; header comment carries config + version."""
    with open(path, "w", newline="") as fh:
        if config is not None:
            blob = json.dumps(_jsonable(config), sort_keys=True,
                              separators=(",", ":"))
            fh.write(f"# rytower {__version__} config {blob}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "n", "statistic", "value",
                    "ci_low", "ci_high"])
        for rep in reports:
            for cells in table_rows(rep):
                w.writerow([_fmt(c) for c in cells])
    return path


def write_decay_csv(path, pairs, slope, amplitude):
    """Decay table with per-entry residual against the fitted line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "value", "fit_residual"])
        for n, value in pairs:
            v = abs(value)
            if v > RESIDUAL_FLOOR and amplitude > 0:
                resid = math.log(v) - (math.log(amplitude) + slope * n)
                w.writerow([_fmt(int(n)), _fmt(float(v)), _fmt(resid)])
            else:
                w.writerow([_fmt(int(n)), _fmt(float(v)), ""])
    return path


def write_density_csv(path, coc, fiber):
    """Equivariant density per cylinder: ``floor, word, value``."""
    idx = coc.index(fiber)
    dens = coc.density(fiber)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["floor", "word", "value"])
        for r in range(idx.n):
            word = "-".join(
                f"{int(c) // 4096}:{int(c) % 4096}" for c in idx.codes[r]
            )
            w.writerow([_fmt(int(idx.floor0[r])), word,
                        _fmt(float(dens[r]))])
    return path


def write_cylinder_csv(path, coc, fiber, depth, obs=None):
    """Cylinder dump at one fiber; masses under both measures."""
    step = obs.value if obs is not None else None
    density = (coc.density(fiber), coc.depth)
    records = coc.bundle.enumerate_cylinders(fiber, depth, step_value=step,
                                             density=density)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["depth", "word", "floor", "mass_m", "mass_mu",
                    "birkhoff_sum"])
        for rec in records:
            word = "-".join(
                [f"{rec.start_floor}:{rec.start_atom}"]
                + [str(a) for a in rec.word]
            )
            w.writerow([
                _fmt(rec.depth), word, _fmt(rec.start_floor),
                _fmt(rec.mass_m), _fmt(rec.mass_mu),
                _fmt(rec.birkhoff_sum),
            ])
    return path


def tower_summary(bundle, fiber):
    """Static geometry of one fiber tower as a plain dict."""
    shape = bundle.tower(fiber)
    return {
        "fiber": fiber,
        "floors": shape.l_max + 1,
        "floor_masses": [float(m) for m in shape.floor_masses],
        "total_mass": float(shape.total_mass),
        "weighted_mass_sum": float(shape.weighted_mass),
        "residue": float(shape.residue),
        "alive_cylinders": shape.alive_count(),
    }


# --------------------------------------------------------------------------
# dashboard


def render_dashboard(payloads) -> str:
    """Plain-text acceptance checklist merged from run payloads.

    ``payloads`` are parsed ``report.json`` dicts.  The dashboard is a
    pure function of their contents, so re-rendering the same directory
    reproduces it byte for byte.
    """
    seen = {}
    for payload in payloads:
        for crit in payload.get("criteria", ()):
            name = crit["name"]
            prev = seen.get(name)
            # a failure anywhere outweighs a pass elsewhere
            if prev is None or (prev["passed"] and not crit["passed"]):
                seen[name] = crit
    lines = [f"rytower {__version__} acceptance dashboard", ""]
    width = max(len(name) for name, _ in CRITERIA) + 2
    n_pass = n_fail = 0
    for name, blurb in CRITERIA:
        crit = seen.get(name)
        if crit is None:
            status = "NOT RUN"
        elif crit["passed"]:
            status, n_pass = "PASS", n_pass + 1
        else:
            status, n_fail = "FAIL", n_fail + 1
        lines.append(f"{name:<{width}}{status:<9}{blurb}")
        if crit is not None:
            lines.append(f"{'':<{width}}{'':<9}{crit['detail']}")
    lines.append("")
    n_missing = len(CRITERIA) - n_pass - n_fail
    lines.append(
        f"{n_pass} passed, {n_fail} failed, {n_missing} not run"
    )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# figures


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _rows(payload_report, *keys):
    for row in payload_report["rows"]:
        if all(k in row for k in keys):
            yield row


def _fig_berry_esseen(rep, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for mode, marker in (("exact", "o"), ("mc", "s")):
        pts = [(r["n"], r["scaled"]) for r in rep["rows"]
               if r.get("mode") == mode]
        if pts:
            ns, sc = zip(*pts)
            ax.loglog(ns, sc, marker, ms=4, label=mode)
    ax.set_xlabel("n")
    ax.set_ylabel(r"$\sqrt{n}\,\cdot$ Kolmogorov distance")
    ax.legend(frameon=False)
    ax.set_title("normal approximation scaling")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _fig_lclt(rep, path):
    plt = _plt()
    key = "sup_gap" if any("sup_gap" in r for r in rep["rows"]) \
        else "sup_window_gap"
    ns = [r["n"] for r in _rows(rep, key)]
    gaps = [r[key] for r in _rows(rep, key)]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.semilogy(ns, gaps, "o-", ms=4)
    ax.set_xlabel("n")
    ax.set_ylabel("sup gap to Gaussian profile")
    ax.set_title(rep["kind"])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _fig_decay(rep, path):
    plt = _plt()
    key = "d_hat" if rep["kind"] == "mixing" else "cov"
    xkey = "k" if rep["kind"] == "mixing" else "n"
    ks = [r[xkey] for r in rep["rows"]]
    vals = [abs(_num(r[key])) for r in rep["rows"]]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    kept = [(k, v) for k, v in zip(ks, vals) if v > RESIDUAL_FLOOR]
    if kept:
        ax.semilogy(*zip(*kept), "o", ms=4, label="table")
    fit = rep.get("fits", {})
    slope, amp = _num(fit.get("slope")), _num(fit.get("amplitude"))
    if slope is not None and amp and math.isfinite(slope):
        xs = np.linspace(min(ks), max(ks), 64)
        ax.semilogy(xs, amp * np.exp(slope * xs), "-",
                    label=f"fit slope {slope:.3f}")
    ax.set_xlabel(xkey)
    ax.set_ylabel("coefficient")
    ax.legend(frameon=False)
    ax.set_title(f"{rep['kind']} decay")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _fig_deviations(rep, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    if rep["kind"].endswith("large"):
        for r in rep["rows"]:
            stages = [r["exact_small"], r["tilted_mid"], r["tilted_large"]]
            ax.plot([0, 1, 2], stages, "o-", ms=4,
                    label=f"eps={r['eps']:g}")
            ax.axhline(r["target"], ls=":", color="gray")
        ax.set_xticks([0, 1, 2],
                      ["exact small n", "tilted n/4", "tilted n"])
        ax.set_ylabel(r"$\frac{1}{n}\log P$")
    else:
        for r in rep["rows"]:
            stages = [r["normalized_log_p_mid"],
                      r["normalized_log_p_large"]]
            ax.plot([0, 1], stages, "o-", ms=4, label=f"x={r['x']:g}")
            ax.axhline(r["target"], ls=":", color="gray")
        ax.set_xticks([0, 1], ["tilted n/4", "tilted n"])
        ax.set_ylabel(r"$\epsilon_n \log P$")
    ax.legend(frameon=False)
    ax.set_title(f"{rep['kind']}: dotted = rate-function target")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _fig_variance(rep, path):
    plt = _plt()
    ns = [r["n"] for r in _rows(rep, "var_mu")]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for key, style in (("var_mu", "o-"), ("pi2", "s--"),
                       ("var_ref", "^:")):
        ax.plot(ns, [r[key] for r in _rows(rep, "var_mu")], style, ms=4,
                label=key)
    ax.set_xlabel("n")
    ax.set_ylabel("variance / n")
    ax.legend(frameon=False)
    ax.set_title("variance estimators")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _fig_pressure(rep, path):
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.4))
    tp = [(r["t"], r["p"]) for r in _rows(rep, "t", "p")]
    xr = [(r["x"], r["rate"], r["quadratic"])
          for r in _rows(rep, "x", "rate")]
    if tp:
        ax1.plot(*zip(*tp), "o-", ms=3)
    ax1.set_xlabel("t")
    ax1.set_ylabel("P(t)")
    ax1.set_title("pressure")
    if xr:
        xs, rates, quads = zip(*xr)
        ax2.plot(xs, rates, "o-", ms=3, label="I(x)")
        ax2.plot(xs, quads, ":", label=r"$x^2/2\Sigma^2$")
    ax2.set_xlabel("x")
    ax2.legend(frameon=False)
    ax2.set_title("rate function")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _fig_convergence(rep, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    series = {}
    for r in _rows(rep, "resid"):
        series.setdefault((r["z_re"], r["z_im"]), []).append(
            (r["n"], r["resid"])
        )
    for (re, im), pts in sorted(series.items()):
        pts = [(n, v) for n, v in sorted(pts) if v > RESIDUAL_FLOOR]
        if pts:
            ax.semilogy(*zip(*pts), "o-", ms=3, label=f"z={re:g}+{im:g}i")
    ax.set_xlabel("n")
    ax.set_ylabel("residual to eigen-chain")
    ax.legend(frameon=False)
    ax.set_title("normalized iterate convergence")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _fig_spectral(rep, path):
    plt = _plt()
    pts = [(r["t"], r["radius"]) for r in _rows(rep, "t", "radius")]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(*zip(*sorted(pts)), "o-", ms=3)
    ax.axhline(1.0, ls=":", color="gray")
    ax.set_xlabel("t")
    ax.set_ylabel("spectral radius")
    ax.set_title("fixed-symbol frequency sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _fig_mgf(rep, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for kind, marker in (("equivariant", "o"), ("reference", "s")):
        pts = [(i, r[f"worst_rel_{kind}"])
               for i, r in enumerate(_rows(rep, f"worst_rel_{kind}"))]
        if pts:
            xs, gaps = zip(*pts)
            ax.semilogy(xs, [max(g, 1e-18) for g in gaps], marker, ms=4,
                        label=kind)
    ax.axhline(1e-10, ls=":", color="gray", label="tolerance")
    ax.set_xlabel("z grid point")
    ax.set_ylabel("worst relative gap")
    ax.legend(frameon=False)
    ax.set_title("operator vs enumeration")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _num(v):
    """Undo the string spelling of non-finite floats."""
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return None
    return v


_FIG_BY_KIND = {
    "berry-esseen": ("be_scaling", _fig_berry_esseen),
    "lclt-lattice": ("lclt_lattice_gap", _fig_lclt),
    "lclt-aperiodic": ("lclt_aperiodic_gap", _fig_lclt),
    "mixing": ("mixing_decay", _fig_decay),
    "correlation": ("correlation_decay", _fig_decay),
    "deviations-large": ("deviations_large", _fig_deviations),
    "deviations-moderate": ("deviations_moderate", _fig_deviations),
    "variance": ("variance_agreement", _fig_variance),
    "pressure": ("pressure_rate", _fig_pressure),
    "rpf-convergence": ("convergence_profiles", _fig_convergence),
    "spectral-radius": ("spectral_radius", _fig_spectral),
    "mgf-oracle": ("mgf_oracle", _fig_mgf),
}


def render_figures(out_dir, payloads):
    """Render one figure per recognized experiment into ``out_dir``.

    Later payloads win when an experiment was run twice.  Returns the
    written paths; unknown experiment kinds are skipped silently.
    """
    os.makedirs(out_dir, exist_ok=True)
    latest = {}
    for payload in payloads:
        for rep in payload.get("reports", ()):
            if rep.get("kind") in _FIG_BY_KIND:
                latest[rep["kind"]] = rep
    written = []
    for kind in sorted(latest):
        stem, fn = _FIG_BY_KIND[kind]
        path = os.path.join(out_dir, f"{stem}.png")
        fn(latest[kind], path)
        written.append(path)
    return written
