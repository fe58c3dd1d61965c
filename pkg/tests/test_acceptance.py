"""End-to-end acceptance battery.

One test per acceptance check, each asserting its stated tolerance and
wall-clock budget.  Every test prints a single verdict line with the
measured figure next to its threshold, so a transcript of this module
reads as the acceptance checklist.
"""

import math
import time

import numpy as np
import pytest

from rytower.cones import ConeParams, certify_contraction, complex_radius
from rytower.ops import AtomTable, BaseIndicator, TowerFn, TransferCocycle
from rytower.tower import TowerBundle
from rytower import limits

CONE_PARAMS = ConeParams(a=8.0, b=512.0, c=512.0, eps=0.2, s=3)
MIXED = AtomTable({0: (0.3, -1.1, 0.7), 1: (1.2, -0.4)}, name="mixed")


@pytest.fixture(scope="module")
def gm3_coc(gm3_env):
    return TransferCocycle(TowerBundle(gm3_env), depth=1)


@pytest.fixture(scope="module")
def geo_coc(geo_env):
    return TransferCocycle(TowerBundle(geo_env), depth=1)


def _verdict(label, ok, elapsed, budget, detail):
    state = "PASS" if ok else "FAIL"
    print(f"\n{label}: {state} [{elapsed:.1f}s of {budget:.0f}s] {detail}")


def test_criterion_1_mgf_oracle(gm3_coc, geo_coc):
    t0 = time.perf_counter()
    grid = np.linspace(-0.5, 0.5, 5)
    zs = [complex(re, im) for re in grid for im in grid]
    worst = 0.0
    for coc in (gm3_coc, geo_coc):
        obs = coc.centered(BaseIndicator())
        for kind in ("equivariant", "reference"):
            for n in range(1, 13):
                s, w = limits._mu_law(coc, 0, n, obs, kind)
                for z in zs:
                    want = complex(np.dot(w, np.exp(z * s)))
                    got = limits.mgf_value(coc, 0, n, z, obs, kind)
                    worst = max(worst, abs(got - want) / abs(want))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed <= 60
    _verdict("criterion 1 (mgf oracle)", ok, elapsed, 60,
             f"worst relative gap {worst:.3g} vs 1e-10 "
             f"(2 models, both kinds, 25 z, n <= 12)")
    assert worst <= 1e-10
    assert elapsed <= 60


def test_criterion_2_duality_and_equivariance(gm3_coc):
    t0 = time.perf_counter()
    coc = gm3_coc
    rng = np.random.default_rng(2)
    z_cycle = (0.0, 0.5j, 0.3, -0.2 + 0.4j)
    worst = 0.0
    for i in range(100):
        fiber = i % 8
        g = TowerFn(fiber, 1, rng.uniform(-1, 1, coc.index(fiber).n))
        f = TowerFn(fiber + 1, 1,
                    rng.uniform(-1, 1, coc.index(fiber + 1).n))
        z = z_cycle[i % 4]
        worst = max(worst, abs(coc.duality_gap(fiber, f, g, z=z,
                                               obs=MIXED)))
    dens = coc.density_result(0)
    integral = float(np.dot(np.real(dens.values), coc.index(0).mass_mt))
    elapsed = time.perf_counter() - t0
    ok = (worst <= 1e-10 and dens.equivariance_defect <= 1e-8
          and abs(integral - 1.0) <= 1e-10 and dens.h_min > 0
          and elapsed <= 30)
    _verdict("criterion 2 (duality/equivariance)", ok, elapsed, 30,
             f"worst duality gap {worst:.3g} vs 1e-10 over 100 pairs; "
             f"push-forward defect {dens.equivariance_defect:.3g} vs 1e-8; "
             f"density integral 1{integral - 1.0:+.3g}; "
             f"min h {dens.h_min:.3g} > 0")
    assert worst <= 1e-10
    assert dens.equivariance_defect <= 1e-8
    assert abs(integral - 1.0) <= 1e-10
    assert dens.h_min > 0
    assert elapsed <= 30


def test_criterion_3_uniform_inequalities(gm3_coc, geo_coc):
    t0 = time.perf_counter()
    t_cycle = (0.0, 0.7, 2.0)
    min_slack = math.inf
    for coc, obs in ((gm3_coc, MIXED), (geo_coc, BaseIndicator())):
        rng = np.random.default_rng(3)
        for i in range(200):
            fiber = i % 4
            g = TowerFn(fiber, 1,
                        rng.uniform(0.1, 2.0, coc.index(fiber).n))
            check = coc.ly_check(fiber, g, 1 + i % 8, t_cycle[i % 3], obs)
            min_slack = min(min_slack, check.worst())
    elapsed = time.perf_counter() - t0
    ok = min_slack >= -1e-9 and elapsed <= 60
    _verdict("criterion 3 (uniform inequalities)", ok, elapsed, 60,
             f"minimum slack {min_slack:.3g} over 200 (g, N, t) triples "
             f"per model, both models")
    assert min_slack >= -1e-9
    assert elapsed <= 60


def test_criterion_4_cone_certification(gm3_env):
    t0 = time.perf_counter()
    coc3 = TransferCocycle(TowerBundle(gm3_env), depth=3)
    cert = certify_contraction(coc3, 0, 12, CONE_PARAMS, n_samples=200,
                               seed=0)
    rad = complex_radius(coc3, 0, 12, CONE_PARAMS, BaseIndicator(), cert)
    elapsed = time.perf_counter() - t0
    ok = (cert.passed and cert.delta_achieved <= 0.5 and rad.r > 0
          and rad.delta < 1.0 and elapsed <= 300)
    _verdict("criterion 4 (cone certification)", ok, elapsed, 300,
             f"shrink factor {cert.delta_achieved:.4f} vs 0.5 over 200 "
             f"samples; complex radius r = {rad.r:.3g} > 0 with "
             f"criterion {rad.delta:.4f} < 1")
    assert cert.passed
    assert cert.delta_achieved <= 0.5
    assert rad.r > 0
    assert rad.delta < 1.0
    assert elapsed <= 300


def test_criterion_5_exponential_convergence(geo_coc):
    t0 = time.perf_counter()
    coc = geo_coc
    obs = coc.centered(BaseIndicator())
    anchor = 4
    rng = np.random.default_rng(5)
    worst_r2 = 1.0
    for z in (0.0, 0.1, 0.1j):
        ref, _ = limits._eigen_chain(coc, anchor - 64, anchor + 65, z, obs)
        for _ in range(20):
            g0 = rng.uniform(0.3, 3.0, coc.index(anchor).n)
            ns, res = limits.convergence_profile(coc, anchor, z, obs, g0,
                                                 64, reference=ref)
            slope, _, r2, used = limits.fit_log_decay(ns, res)
            assert used >= 3 and slope < 0
            worst_r2 = min(worst_r2, r2)
    elapsed = time.perf_counter() - t0
    ok = worst_r2 >= 0.98 and elapsed <= 120
    _verdict("criterion 5 (exponential convergence)", ok, elapsed, 120,
             f"worst log-linear fit R2 {worst_r2:.4f} vs 0.98 "
             f"(20 g x 3 z, n in 4..64)")
    assert worst_r2 >= 0.98
    assert elapsed <= 120


def test_criterion_6_normal_approximation_scaling(gm3_coc):
    t0 = time.perf_counter()
    coc = gm3_coc
    obs = coc.centered(BaseIndicator())
    rep = limits.berry_esseen_experiment(
        coc, obs, fiber=0, n_exact=tuple(range(4, 17)),
        n_mc=(32, 64, 128, 256), n_paths=10**6, seed=0,
    )
    band = rep.fits["exact_band_ratio"]
    slope = rep.fits["mc_slope"]
    elapsed = time.perf_counter() - t0
    ok = band <= 3.0 and -0.5 <= slope <= 0.15 and elapsed <= 300
    _verdict("criterion 6 (normal approximation scaling)", ok, elapsed,
             300,
             f"exact scaled-distance band ratio {band:.3f} vs 3 "
             f"(n 4..16); Monte Carlo slope {slope:.3f} in [-0.5, 0.15] "
             f"(n 32..256, 1e6 paths)")
    assert band <= 3.0
    assert -0.5 <= slope <= 0.15
    assert elapsed <= 300


def test_criterion_7_lattice_local_limit(gm3_coc):
    t0 = time.perf_counter()
    rep = limits.lclt_lattice_experiment(
        gm3_coc, BaseIndicator(), fiber=0, n_gauss=(8, 16, 32, 64),
        cross_check_n=10,
    )
    gaps = [r["sup_gap"] for r in rep.rows]
    monotone = all(b <= 1.2 * a for a, b in zip(gaps, gaps[1:]))
    enum_gap = rep.fits["enumeration_gap"]
    elapsed = time.perf_counter() - t0
    ok = monotone and enum_gap <= 1e-10 and elapsed <= 120
    _verdict("criterion 7 (lattice local limit)", ok, elapsed, 120,
             f"sup gaps {', '.join(f'{g:.4f}' for g in gaps)} each within "
             f"1.2x the previous; inversion vs enumeration "
             f"{enum_gap:.3g} vs 1e-10 at n = 10")
    assert monotone
    assert enum_gap <= 1e-10
    assert elapsed <= 120


def test_criterion_8_deviations(gm3_coc):
    t0 = time.perf_counter()
    coc = gm3_coc
    obs = coc.centered(BaseIndicator())
    curve = limits.pressure_curve(coc, obs, np.linspace(-2.0, 2.4, 23),
                                  n_steps=1024, fiber_samples=(0,))
    large = limits.deviations_experiment(
        coc, obs, "large", eps_list=(0.12, 0.18), n_large=2048,
        n_paths=100_000, seed=0, curve=curve,
    )
    moderate = limits.deviations_experiment(
        coc, obs, "moderate", x_list=(0.5, 1.0), n_large=2048,
        n_paths=100_000, seed=0, curve=curve,
    )
    gap_l = large.fits["worst_gap_pct"]
    gap_m = moderate.fits["worst_gap_pct"]
    elapsed = time.perf_counter() - t0
    ok = gap_l <= 15.0 and gap_m <= 20.0 and elapsed <= 600
    upper = float(curve.spline()(curve.t_grid[-1], 1))
    _verdict("criterion 8 (deviations)", ok, elapsed, 600,
             f"large: worst gap {gap_l:.1f}% vs 15% at eps in (0.12, "
             f"0.18), n = 2048, upper-tail window eps < {upper:.3f}; "
             f"moderate: worst gap "
             f"{gap_m:.1f}% vs 20% at x in (0.5, 1.0)")
    assert gap_l <= 15.0
    assert gap_m <= 20.0
    assert elapsed <= 600


def test_criterion_9_mixing_and_correlation(gm3_coc, geo_coc):
    t0 = time.perf_counter()
    mix = limits.mixing_experiment(geo_coc, 0, tuple(range(1, 13)),
                                   n_samples=50, seed=0)
    cor = limits.correlation_experiment(
        gm3_coc, gm3_coc.centered(MIXED), gm3_coc.centered(MIXED),
        fiber=15, n_list=tuple(range(1, 21)),
    )
    elapsed = time.perf_counter() - t0
    ok = (mix.fits["r2"] >= 0.95 and cor.fits["r2"] >= 0.95
          and elapsed <= 120)
    _verdict("criterion 9 (mixing/correlation decay)", ok, elapsed, 120,
             f"mixing coefficient fit R2 {mix.fits['r2']:.4f} vs 0.95 "
             f"(k 1..12); correlation fit R2 {cor.fits['r2']:.4f} vs "
             f"0.95 ({cor.fits['n_points']} usable lags)")
    assert mix.fits["r2"] >= 0.95
    assert cor.fits["r2"] >= 0.95
    assert elapsed <= 120


def test_criterion_10_variance_agreement(gm3_coc):
    t0 = time.perf_counter()
    coc = gm3_coc
    obs = coc.centered(BaseIndicator())
    rep = limits.variance_report(coc, 0, 12, obs)
    ests = (rep.fd, rep.exact, rep.green_kubo)
    pairwise = max(
        abs(a - b) / max(abs(a), abs(b))
        for i, a in enumerate(ests) for b in ests[i + 1:]
    )
    curvature_gap = max(abs(r[1] - r[2]) for r in rep.per_n)
    elapsed = time.perf_counter() - t0
    ok = pairwise <= 1e-4 and curvature_gap <= 1e-4 and elapsed <= 60
    _verdict("criterion 10 (variance agreement)", ok, elapsed, 60,
             f"three estimators within {pairwise:.3g} relative vs 1e-4; "
             f"log-MGF curvature vs exact variance within "
             f"{curvature_gap:.3g} for n in 4..12")
    assert pairwise <= 1e-4
    assert curvature_gap <= 1e-4
    assert elapsed <= 60
