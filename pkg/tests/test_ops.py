"""Operator algebra against brute-force enumeration and linear algebra."""

import math

import numpy as np
import pytest
import scipy.linalg

from rytower.env import symbol_at
from rytower.errors import ResolutionMismatch, TruncationEscape
from rytower.ops import (
    AtomTable,
    BaseIndicator,
    Observable,
    TowerFn,
    TransferCocycle,
)
from rytower.tower import _CODE_BASE, TowerBundle

from oracles import oracle_cylinders


class _Mixed(Observable):
    name = "mixed"

    def value(self, fiber, floor, sid, atom):
        return 0.25 * floor + 0.5 * sid - 0.35 * atom


GM3_TABLE = AtomTable({0: (0.3, -1.1, 0.7), 1: (1.2, -0.4)}, name="tbl")


def _random_fn(coc, fiber, seed, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return TowerFn(fiber, coc.depth, rng.uniform(lo, hi, coc.index(fiber).n))


# ------------------------------------------------------------ hand algebra


def test_integral_identity_plain_operator(gm3_bundle):
    # pairing the iterated operator with the constant function must give
    # the brute-force weighted sum over depth-n cylinders
    coc = TransferCocycle(gm3_bundle, depth=1)
    obs = _Mixed()
    fiber, n, z = 2, 5, 0.4 - 0.3j
    g = _random_fn(coc, fiber, seed=3)
    lhs = coc.integral_m(coc.apply_P_n(fiber, g, n, z, obs))
    idx = coc.index(fiber)
    rhs = 0.0
    for leaf in oracle_cylinders(gm3_bundle.env, fiber, n, value=obs.value):
        f0, a0 = leaf["itin"][0]
        pos = idx.pos[(f0 * _CODE_BASE + a0,)]
        rhs += float(leaf["mass"]) * np.exp(z * leaf["sum"]) * g.values[pos]
    assert abs(lhs - rhs) < 1e-12 * (1.0 + abs(rhs))


def test_integral_identity_weighted_operator(geo_bundle):
    coc = TransferCocycle(geo_bundle, depth=1)
    obs = BaseIndicator()
    fiber, n, z = 0, 4, 0.2j
    g = _random_fn(coc, fiber, seed=9)
    lhs = coc.integral_mt(coc.apply_L_n(fiber, g, n, z, obs))
    idx = coc.index(fiber)
    eps0 = coc.eps0
    rhs = 0.0
    for leaf in oracle_cylinders(geo_bundle.env, fiber, n, value=obs.value):
        f0, a0 = leaf["itin"][0]
        pos = idx.pos[(f0 * _CODE_BASE + a0,)]
        rhs += (
            float(leaf["mass"]) * math.exp(eps0 * f0)
            * np.exp(z * leaf["sum"]) * g.values[pos]
        )
    assert abs(lhs - rhs) < 1e-12 * (1.0 + abs(rhs))


def test_weighted_operator_is_conjugated_plain(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    fiber = 3
    g = _random_fn(coc, fiber, seed=1)
    v_src = np.exp(coc.eps0 * coc.index(fiber).floor0)
    v_tgt = np.exp(coc.eps0 * coc.index(fiber + 1).floor0)
    direct = coc.apply_L(fiber, g)
    conj = coc.apply_P(
        fiber, TowerFn(fiber, 1, v_src * g.values)
    ).values / v_tgt
    np.testing.assert_allclose(direct.values, conj, rtol=0, atol=1e-14)


def test_operator_preserves_reference_integrals(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    g = _random_fn(coc, 5, seed=4)
    assert coc.integral_m(coc.apply_P(5, g)) == pytest.approx(
        coc.integral_m(g), abs=1e-14
    )
    assert coc.integral_mt(coc.apply_L(5, g)) == pytest.approx(
        coc.integral_mt(g), abs=1e-14
    )


def test_wrong_fiber_rejected(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    g = _random_fn(coc, 2, seed=0)
    with pytest.raises(ResolutionMismatch):
        coc.apply_P(3, g)


def test_structure_guards_truncation(gm3_env):
    coc = TransferCocycle(TowerBundle(gm3_env, l_max=1), depth=1)
    with pytest.raises(TruncationEscape):
        coc.apply_P(0, coc.ones(0))


# ----------------------------------------------------------------- duality


def test_duality_gap_vanishes(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    fiber = 4
    g = _random_fn(coc, fiber, seed=11)
    f = _random_fn(coc, fiber + 1, seed=12)
    assert abs(coc.duality_gap(fiber, f, g)) < 1e-13
    assert abs(coc.duality_gap(fiber, f, g, z=0.5j, obs=_Mixed())) < 1e-13


def test_duality_gap_vanishes_geo(geo_bundle):
    coc = TransferCocycle(geo_bundle, depth=1)
    g = _random_fn(coc, 0, seed=21)
    f = _random_fn(coc, 1, seed=22)
    assert abs(coc.duality_gap(0, f, g)) < 1e-13


# ----------------------------------------------------------------- density


def test_all_constant_fiber_density_is_perron_vector(all_a_bundle):
    # with a deterministic environment the weighted operator is one fixed
    # matrix, so the pullback limit must match its leading eigenvector
    coc = TransferCocycle(all_a_bundle, depth=1)
    src, tgt, _, wl, n_tgt = coc._structure(0)
    mat = np.zeros((n_tgt, coc.index(0).n))
    np.add.at(mat, (tgt, src), wl)
    vals, vecs = scipy.linalg.eig(mat)
    k = int(np.argmax(vals.real))
    assert vals[k].real == pytest.approx(1.0, abs=1e-12)
    assert abs(vals[k].imag) < 1e-12
    vec = vecs[:, k].real
    vec = vec * np.sign(vec.sum())
    vec /= np.dot(vec, coc.index(0).mass_mt)
    np.testing.assert_allclose(coc.density(6), vec, rtol=0, atol=1e-10)


def test_density_result_bounds(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    res = coc.density_result(3)
    assert res.residual < 1e-11
    assert res.h_min > 0.0
    assert res.h_max < 20.0
    assert res.equivariance_defect < 1e-12
    mass = np.dot(res.values, coc.index(3).mass_mt)
    assert mass == pytest.approx(1.0, abs=1e-12)


def test_density_constant_on_floors(gm3_bundle):
    # affine full-branch returns spread mass uniformly over the next base,
    # so the limit density cannot vary inside a floor
    coc = TransferCocycle(gm3_bundle, depth=1)
    for fiber in (0, 4, 9):
        idx = coc.index(fiber)
        h = coc.density(fiber)
        for floor in idx.floors_present():
            on = h[idx.floor0 == floor]
            assert np.ptp(on) < 1e-13


def test_centered_observable_has_zero_mean(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    centered = coc.centered(GM3_TABLE)
    for fiber in (0, 3, 7):
        assert coc.fiber_mean(fiber, centered) == pytest.approx(0.0, abs=1e-13)


# ------------------------------------------------------------------- norms


def test_norm_report_hand_example(all_a_bundle):
    coc = TransferCocycle(all_a_bundle, depth=1)
    assert coc.eps0 == pytest.approx(math.log(2.0) / 2.0)
    # depth-1 cylinders in canonical order: floor 0 atoms 0,1,2 then
    # floor 1 atoms 1,2 then floor 2 atom 2
    fn = TowerFn(0, 1, np.array([1.0, 2.0, 4.0, 3.0, 5.0, 7.0]))
    rep = coc.norms(fn)
    assert rep.sup == 7.0
    assert rep.seminorm == pytest.approx(6.0)  # |1-4| / 0.5 on the base
    assert rep.norm_s == pytest.approx(4.0)
    assert rep.norm_h == pytest.approx(6.0)
    assert rep.norm_li == pytest.approx(13.0)
    assert rep.l1_m == pytest.approx(5.75)
    assert rep.l1_mt == pytest.approx(5.5 + 2.0 * math.sqrt(2.0))
    assert rep.norm_omega == pytest.approx(10.0)


def test_lip_constant_hand_example(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    # widest same-floor gap of the mixed observable is 0.7 at metric 1/2,
    # then the geometric series doubles it again
    assert coc.lip_constant(_Mixed()) == pytest.approx(2.8)


# ----------------------------------------------------- uniform inequalities


@pytest.mark.parametrize("n_steps,t", [(2, 0.0), (2, 0.7), (5, 0.0), (5, 3.0)])
def test_ly_slacks_nonnegative_gm3(gm3_bundle, n_steps, t):
    coc = TransferCocycle(gm3_bundle, depth=1)
    g = _random_fn(coc, 1, seed=40 + n_steps)
    check = coc.ly_check(1, g, n_steps, t, GM3_TABLE)
    assert check.worst() > -1e-9
    assert check.r_n > 0.0


def test_ly_slacks_nonnegative_geo(geo_bundle):
    coc = TransferCocycle(geo_bundle, depth=1)
    g = _random_fn(coc, 0, seed=50)
    check = coc.ly_check(0, g, 4, 1.3, BaseIndicator())
    assert check.worst() > -1e-9


def test_comparability_constant(gm3_bundle, geo_bundle):
    assert TransferCocycle(gm3_bundle).comparability_q() == pytest.approx(4.0)
    assert TransferCocycle(geo_bundle).comparability_q() == pytest.approx(
        2.0**11
    )


# ------------------------------------------------------------------ mixing


def test_mixing_coefficients_decay(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    table = coc.mixing_coefficients(0, (1, 3, 6, 10), n_samples=25, seed=5)
    ks = [k for k, _ in table]
    ds = [d for _, d in table]
    assert ks == [1, 3, 6, 10]
    assert all(d >= 0 for d in ds)
    assert ds[-1] < 0.2 * ds[0]
    assert ds[2] <= ds[0] + 1e-12


def test_correlation_matches_bruteforce(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    fiber, n = 1, 3
    g_obs, f_obs = GM3_TABLE, BaseIndicator()
    (got_n, got), = coc.correlation(fiber, g_obs, f_obs, [n])
    assert got_n == n

    env = gm3_bundle.env
    eps0 = coc.eps0
    idx = coc.index(fiber)
    dens = coc.density(fiber)
    h_by_key = {
        (int(idx.floor0[r]), int(idx.atom0[r])): dens[r] for r in range(idx.n)
    }

    def obs_at(j, floor, atom, obs):
        sid = symbol_at(env, j - floor)
        return obs.value(j, floor, sid, atom)

    joint = 0.0
    for leaf in oracle_cylinders(env, fiber, n + 1):
        f0, a0 = leaf["itin"][0]
        fn_, an_ = leaf["itin"][n]
        joint += (
            h_by_key[(f0, a0)] * math.exp(eps0 * f0) * float(leaf["mass"])
            * obs_at(fiber, f0, a0, g_obs)
            * obs_at(fiber + n, fn_, an_, f_obs)
        )
    expect = joint - coc.fiber_mean(fiber, g_obs) * coc.fiber_mean(
        fiber + n, f_obs
    )
    assert got == pytest.approx(expect, abs=1e-12)


def test_correlation_of_constant_vanishes(gm3_bundle):
    coc = TransferCocycle(gm3_bundle, depth=1)
    const = AtomTable({0: (2.0, 2.0, 2.0), 1: (2.0, 2.0)}, name="const")
    for n, c in coc.correlation(2, const, GM3_TABLE, [1, 4]):
        assert abs(c) < 1e-13
