"""Cone geometry: membership, projective metric, certification, radius."""

import math
from dataclasses import replace

import numpy as np
import pytest

from rytower.cones import (
    ConeFrame,
    ConeParams,
    certify_contraction,
    complex_bilinear_min,
    complex_radius,
    hilbert_distance,
)
from rytower.errors import NoPositiveRadius
from rytower.ops import AtomTable, BaseIndicator, TransferCocycle

# eps must exceed the lightest depth-s cylinder mass (0.125 on the
# all-heavy-symbol fibers) or no fiber can keep a light complement cell
PARAMS = ConeParams(a=8.0, b=512.0, c=512.0, eps=0.2, s=3)


@pytest.fixture(scope="module")
def gm3_coc3(gm3_env):
    from rytower.tower import TowerBundle

    return TransferCocycle(TowerBundle(gm3_env), depth=3)


@pytest.fixture(scope="module")
def gm3_frame(gm3_coc3):
    return ConeFrame(gm3_coc3, 2, PARAMS)


def test_params_validation():
    with pytest.raises(ValueError):
        ConeParams(a=0.5, b=2.0, c=2.0, eps=0.1, s=2)
    with pytest.raises(ValueError):
        ConeParams(a=8.0, b=2.0, c=2.0, eps=0.1, s=2, delta=1.5)
    with pytest.raises(ValueError):
        # a shrunk amplitude below one leaves an empty shrunk cone
        ConeParams(a=1.5, b=2.0, c=2.0, eps=0.1, s=2, delta=0.5)


def test_density_and_constant_are_members(gm3_frame):
    m_h = gm3_frame.membership(gm3_frame.h_values)
    assert m_h.is_member
    assert m_h.min_margin > 0.0
    m_one = gm3_frame.membership(np.ones(gm3_frame.idx.n))
    assert m_one.is_member


def test_sign_flip_on_cell_breaks_average(gm3_frame):
    vals = np.ones(gm3_frame.idx.n)
    vals[gm3_frame.family.cell_of == 0] = -1.0
    assert gm3_frame.membership(vals).avg_low < 0.0


def test_margins_are_projective(gm3_frame):
    rng = np.random.default_rng(2)
    g = gm3_frame.random_member(rng)
    m1 = gm3_frame.membership(g)
    m3 = gm3_frame.membership(3.0 * g)
    assert m3.avg_low == pytest.approx(m1.avg_low, rel=1e-12)
    assert m3.avg_high == pytest.approx(m1.avg_high, rel=1e-12)
    assert m3.lip == pytest.approx(m1.lip, rel=1e-12, abs=1e-12)
    assert m3.point == pytest.approx(m1.point, rel=1e-12)


def test_hilbert_distance_projective_and_symmetric(gm3_frame):
    rng = np.random.default_rng(3)
    f = gm3_frame.random_member(rng)
    g = gm3_frame.random_member(rng)
    assert hilbert_distance(f, 2.0 * f, gm3_frame.family) == pytest.approx(
        0.0, abs=1e-12
    )
    d_fg = hilbert_distance(f, g, gm3_frame.family)
    d_gf = hilbert_distance(g, f, gm3_frame.family)
    assert d_fg == d_gf
    assert d_fg >= 0.0


def test_reproducing_projection(gm3_frame, gm3_coc3):
    rng = np.random.default_rng(4)
    k1 = gm3_frame.reproducing_bound_k1(gm3_coc3.weight_sum_bound())
    from rytower.ops import TowerFn

    for trial in range(20):
        raw = rng.uniform(-1.0, 1.0, gm3_frame.idx.n)
        coeff = gm3_frame.reproducing_coefficient(raw)
        member = raw + coeff * gm3_frame.h_values
        assert gm3_frame.membership(member).min_margin >= -1e-12
        norm = gm3_coc3.norms(TowerFn(2, 3, raw)).norm_li
        assert coeff <= k1 * norm * (1.0 + 1e-9)


def test_aperture_inequality(gm3_frame, gm3_coc3):
    from rytower.ops import TowerFn

    k_ap = gm3_frame.aperture_k()
    rng = np.random.default_rng(5)
    for trial in range(30):
        member = gm3_frame.random_member(rng)
        norm = gm3_coc3.norms(TowerFn(2, 3, member)).norm_li
        mass = float(np.dot(member, gm3_frame.family.mt))
        assert norm <= k_ap * mass * (1.0 + 1e-9)


def test_complex_members_pass_bilinear_audit(gm3_frame):
    rng = np.random.default_rng(6)
    f = gm3_frame.random_member(rng) + 1j * gm3_frame.random_member(rng)
    assert complex_bilinear_min(f, gm3_frame.family) >= -1e-10


def test_certification_passes_gm3(gm3_coc3):
    cert = certify_contraction(gm3_coc3, 0, 12, PARAMS, n_samples=60, seed=0)
    assert cert.passed
    assert cert.delta_achieved <= PARAMS.delta
    assert cert.failures == ()
    assert math.isfinite(cert.diameter_bound)
    assert cert.diameter_bound >= 0.0
    assert cert.eigen_defect < 1e-9
    assert cert.implied_step_rate() > 0.0


def test_certified_images_stay_close(gm3_coc3):
    # fresh members pushed through the same block should have pairwise
    # projective distances on the scale of the certified diameter
    cert = certify_contraction(gm3_coc3, 0, 12, PARAMS, n_samples=40, seed=1)
    frame_src = ConeFrame(gm3_coc3, 0, PARAMS)
    frame_tgt = ConeFrame(gm3_coc3, 12, PARAMS)
    from rytower.ops import TowerFn

    rng = np.random.default_rng(99)
    imgs = []
    for _ in range(6):
        member = frame_src.random_member(rng)
        imgs.append(
            gm3_coc3.apply_L_n(0, TowerFn(0, 3, member), 12).values
        )
    for i in range(len(imgs)):
        for j in range(i + 1, len(imgs)):
            d = hilbert_distance(imgs[i], imgs[j], frame_tgt.family)
            assert math.isfinite(d)
            assert d <= cert.diameter_bound + 1.0


def test_contraction_shrinks_wiggles(gm3_coc3):
    from rytower.ops import TowerFn

    frame_src = ConeFrame(gm3_coc3, 0, PARAMS)
    frame_tgt = ConeFrame(gm3_coc3, 12, PARAMS)
    wiggle = np.where(np.arange(frame_src.idx.n) % 2 == 0, 1.0, -1.0)
    member = frame_src.project_member(wiggle)
    before = frame_src.shrink_factor_needed(member)
    img = gm3_coc3.apply_L_n(0, TowerFn(0, 3, member), 12).values
    after = frame_tgt.shrink_factor_needed(img)
    assert after <= before + 1e-12
    assert after <= PARAMS.delta


def test_certification_rejects_zero_steps(gm3_coc3):
    with pytest.raises(ValueError):
        certify_contraction(gm3_coc3, 0, 0, PARAMS)


def test_resolution_mismatch_rejected(gm3_bundle):
    coc1 = TransferCocycle(gm3_bundle, depth=1)
    with pytest.raises(ValueError):
        ConeFrame(coc1, 0, PARAMS)


def test_tight_shrink_target_fails_then_recovers(gm3_coc3):
    # a shrink target barely above the structural floor of 1/a cannot be
    # met after one step, but a long block mixes far enough
    tight = ConeParams(a=8.0, b=512.0, c=512.0, eps=0.2, s=3, delta=0.1275)
    short = certify_contraction(gm3_coc3, 0, 1, tight, n_samples=30, seed=7)
    assert not short.passed
    assert any(f["kind"] == "shrink-factor" for f in short.failures)
    long = certify_contraction(gm3_coc3, 0, 18, tight, n_samples=30, seed=7)
    assert long.passed


def test_complex_radius_positive(gm3_coc3):
    cert = certify_contraction(gm3_coc3, 0, 12, PARAMS, n_samples=60, seed=0)
    rep = complex_radius(
        gm3_coc3, 0, 12, PARAMS, BaseIndicator(), cert,
        n_members=8, n_angles=4, seed=2,
    )
    assert rep.r > 0.0
    assert rep.delta < 1.0
    assert rep.d1_complex >= rep.d0
    if rep.r < 1.0:
        # linear regime: halving the radius roughly halves the ratio
        assert 0.25 < rep.slope_ratio < 0.85


def test_zero_weight_reaches_window(gm3_coc3):
    cert = certify_contraction(gm3_coc3, 0, 12, PARAMS, n_samples=30, seed=3)
    zero = AtomTable({0: (0.0, 0.0, 0.0), 1: (0.0, 0.0)}, name="zero")
    rep = complex_radius(
        gm3_coc3, 0, 12, PARAMS, zero, cert, n_members=4, n_angles=2,
    )
    assert rep.r == pytest.approx(1.0)
    assert rep.eps1 == pytest.approx(0.0, abs=1e-12)


def test_huge_diameter_rejected(gm3_coc3):
    cert = certify_contraction(gm3_coc3, 0, 12, PARAMS, n_samples=20, seed=4)
    bad = replace(cert, diameter_bound=2000.0)
    with pytest.raises(NoPositiveRadius):
        complex_radius(gm3_coc3, 0, 12, PARAMS, BaseIndicator(), bad)
