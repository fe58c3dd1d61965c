import math
from fractions import Fraction

import numpy as np
import pytest

from oracles import oracle_cylinders
from rytower.env import Environment, Model
from rytower.errors import AscovFailure, CombinatorialBlowup, TruncationEscape
from rytower.models import geo_model, gm3_model
from rytower.tower import TowerBundle, TowerPoint


def test_gm3_all_a_floor_masses(all_a_bundle):
    tw = all_a_bundle.tower(0)
    assert np.allclose(tw.floor_masses, [1.0, 0.5, 0.25])
    assert tw.total_mass == pytest.approx(7 / 4, abs=1e-15)
    assert tw.residue == 0.0


def test_geo_floor_masses(geo_bundle):
    tw = geo_bundle.tower(5)
    expect = [2.0**-f for f in range(12)]
    assert np.allclose(tw.floor_masses, expect)
    assert tw.total_mass == pytest.approx(sum(expect), abs=1e-14)


def test_random_gm3_floor_masses_follow_symbols(gm3_bundle):
    # floor f keeps the tail mass of the symbol driving index j - f
    tw = gm3_bundle.tower(3)
    for f, sid in enumerate(tw.floor_symbols):
        sym = gm3_bundle.model.symbols[sid]
        assert tw.floor_masses[f] == pytest.approx(sym.tail(f + 1), abs=1e-15)
        assert sid == gm3_bundle.symbol(3 - f)


def test_apply_f_return_branch(all_a_bundle):
    # base atom [0, 1/2) with return time 1: affine onto [0,1), slope 2
    img, jac = all_a_bundle.apply_F(0, TowerPoint(0, 0.25))
    assert img == TowerPoint(0, 0.5)
    assert jac == pytest.approx(2.0)


def test_apply_f_climb_then_return(all_a_bundle):
    # the atom [3/4, 1) has return time 3: two climbs then a full branch
    p = TowerPoint(0, 0.8)
    p, jac = all_a_bundle.apply_F(0, p)
    assert (p.floor, jac) == (1, 1.0)
    p, jac = all_a_bundle.apply_F(1, p)
    assert (p.floor, jac) == (2, 1.0)
    p, jac = all_a_bundle.apply_F(2, p)
    assert p.floor == 0
    assert p.x == pytest.approx((0.8 - 0.75) / 0.25)
    assert jac == pytest.approx(4.0)


def test_truncation_escape():
    env = Environment(Model(gm3_model().symbols, (1.0, 0.0)), seed=1)
    bundle = TowerBundle(env, l_max=1)
    p = TowerPoint(1, 0.9)  # inside the return-time-3 atom on floor 1
    with pytest.raises(TruncationEscape):
        bundle.apply_F(0, p)
    with pytest.raises(TruncationEscape):
        bundle.index(0, 4)


def test_locate_rejects_points_above_atom_roof(all_a_bundle):
    # x = 0.1 sits in the return-time-1 atom, which never reaches floor 1
    with pytest.raises(ValueError):
        all_a_bundle.locate(0, TowerPoint(1, 0.1))


def test_separation_time_examples(all_a_bundle):
    one = all_a_bundle.separation_time(0, TowerPoint(0, 0.1), TowerPoint(0, 0.6))
    assert one == 1
    # same atom, images land in different atoms one step later
    s = all_a_bundle.separation_time(0, TowerPoint(0, 0.1), TowerPoint(0, 0.3))
    assert s == 2
    assert all_a_bundle.metric(s) == pytest.approx(0.25)


def test_separation_capped_at_horizon(all_a_bundle):
    s = all_a_bundle.separation_time(
        0, TowerPoint(0, 0.100001), TowerPoint(0, 0.100002), horizon=8
    )
    assert s >= 2


@pytest.mark.parametrize("fixture_name,depth", [
    ("gm3_bundle", 6), ("geo_bundle", 4), ("all_a_bundle", 7),
])
def test_cylinder_masses_match_exact_oracle(request, fixture_name, depth):
    bundle = request.getfixturevalue(fixture_name)
    idx = bundle.index(0, depth)
    leaves = oracle_cylinders(bundle.env, 0, depth)
    assert idx.n == len(leaves)
    got = {}
    for r in range(idx.n):
        key = tuple(
            (int(c // 4096), int(c % 4096)) for c in idx.codes[r]
        )
        got[key] = idx.mass_m[r]
    for leaf in leaves:
        assert leaf["itin"] in got
        assert got[leaf["itin"]] == pytest.approx(float(leaf["mass"]), rel=1e-13)


@pytest.mark.parametrize("depth", [1, 2, 3, 5, 8])
def test_mass_completeness(gm3_bundle, depth):
    # cylinders at any depth partition the tower: masses add to m(tower)
    idx = gm3_bundle.index(0, depth)
    assert math.fsum(idx.mass_m) == pytest.approx(
        gm3_bundle.tower(0).total_mass, abs=1e-12
    )


def test_weighted_masses(gm3_bundle):
    idx = gm3_bundle.index(0, 2)
    w = np.exp(gm3_bundle.eps0 * idx.floor0)
    assert np.allclose(idx.mass_mt, idx.mass_m * w, atol=1e-15)
    assert math.fsum(idx.mass_mt) == pytest.approx(
        gm3_bundle.tower(0).weighted_mass, abs=1e-12
    )


def test_birkhoff_sums_match_oracle(gm3_bundle):
    # per-atom values that depend on floor, symbol and atom
    def value(j, floor, sid, atom):
        return float(floor) + 0.5 * sid + 0.25 * atom

    prefix, mass, _, sums = gm3_bundle.leaves(0, 5, step_value=value)
    leaves = oracle_cylinders(gm3_bundle.env, 0, 5, value=value)
    assert len(mass) == len(leaves)
    lib = sorted(zip(mass, sums))
    ora = sorted((float(l["mass"]), l["sum"]) for l in leaves)
    for (m1, s1), (m2, s2) in zip(lib, ora):
        assert m1 == pytest.approx(m2, rel=1e-12)
        assert s1 == pytest.approx(s2, abs=1e-12)


def test_enumeration_cap():
    env = Environment(geo_model(), seed=2)
    bundle = TowerBundle(env)
    with pytest.raises(CombinatorialBlowup):
        bundle.leaves(0, 10, cap=50)


def test_cylinder_records(gm3_bundle):
    records = gm3_bundle.enumerate_cylinders(0, 3)
    assert all(r.depth == 3 for r in records)
    total = math.fsum(r.mass_m for r in records)
    assert total == pytest.approx(gm3_bundle.tower(0).total_mass, abs=1e-12)
    # every word entry is a landing-atom index of some later fiber
    for r in records:
        assert all(w >= 0 for w in r.word)
        assert r.mass_weighted == pytest.approx(
            r.mass_m * math.exp(gm3_bundle.eps0 * r.start_floor), rel=1e-14
        )


def test_floor_pairs_separation(gm3_bundle):
    idx = gm3_bundle.index(0, 3)
    for floor in idx.floors_present():
        ii, jj, sep = idx.floor_pairs(int(floor))
        for a, b, s in zip(ii, jj, sep):
            row_a, row_b = idx.codes[a], idx.codes[b]
            first = next(
                t for t in range(idx.depth) if row_a[t] != row_b[t]
            )
            assert s == first + 1
            assert 1 <= s <= idx.depth


def test_cover_partition_greedy_and_delta(gm3_bundle):
    idx1 = gm3_bundle.index(0, 1)
    ones = np.ones(idx1.n)
    part = gm3_bundle.cover_partition(0, (ones, 1), eps=0.3, s=2)
    assert part.n_cells >= 1
    # cells are ordered heaviest first and the complement keeps mass
    sel = part.cell_mass_mt[:-1]
    assert all(sel[i] >= sel[i + 1] - 1e-15 for i in range(len(sel) - 1))
    assert part.cell_mass_mt[-1] > 0
    assert part.cell_mass_mt[-1] < 0.3
    assert part.delta > 0
    # all cylinders assigned to a cell
    assert part.cell_of.min() >= 0 and part.cell_of.max() <= part.n_cells


def test_cover_partition_single_heavy_atom(gm3_bundle):
    # eps just under the total: the first greedy step alone suffices
    idx1 = gm3_bundle.index(0, 1)
    heaviest = idx1.mass_mt.max()
    total = idx1.mass_mt.sum()
    part = gm3_bundle.cover_partition(
        0, (np.ones(idx1.n), 1), eps=total - heaviest + 1e-9, s=1
    )
    assert part.n_cells == 1
    assert part.cell_mass_mt[0] == pytest.approx(heaviest, rel=1e-12)


def test_cover_partition_eps_zero_fails(gm3_bundle):
    idx1 = gm3_bundle.index(0, 1)
    with pytest.raises(AscovFailure):
        gm3_bundle.cover_partition(0, (np.ones(idx1.n), 1), eps=0.0, s=1)


def test_footprints_cover_atoms(gm3_bundle):
    # time-0 footprints of depth-n cylinders tile each atom exactly
    idx = gm3_bundle.index(0, 4)
    for floor in idx.floors_present():
        sid = gm3_bundle.floor_symbol(0, int(floor))
        spec = gm3_bundle.model.symbols[sid]
        for k in np.unique(idx.atom0[idx.floor0 == floor]):
            rows = np.nonzero((idx.floor0 == floor) & (idx.atom0 == k))[0]
            lo = idx.lo0[rows].min()
            hi = idx.hi0[rows].max()
            atom = spec.atoms[int(k)]
            assert lo == pytest.approx(atom.left, abs=1e-12)
            assert hi == pytest.approx(atom.left + atom.length, abs=1e-9)
            # footprint lengths sum to the atom length
            assert (idx.hi0[rows] - idx.lo0[rows]).sum() == pytest.approx(
                atom.length, rel=1e-9
            )
