"""Birkhoff cones, projective metric, and contraction certificates.

The real cone of one fiber consists of functions whose cell averages
against the weighted measure stay between zero and ``a`` times the total
mass, whose same-floor Lipschitz constant stays below ``b`` times the
mass, and whose values on the complement cell of the cover partition stay
below ``c`` times the mass.  The cone is described dually by a finite
sampled family of linear functionals; the projective (Hilbert) metric and
the complex perturbation radius are both computed from that family.

Everything here works at one fixed cylinder resolution, normally the
cover-partition depth ``s``, through a :class:`~rytower.ops.TransferCocycle`
built at that depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import (
    CertificationFailure,
    DegenerateRatio,
    NoPositiveRadius,
)
from .ops import Observable, TowerFn, TransferCocycle
from .tower import CoverPartition

_TINY = 1e-300


@dataclass(frozen=True)
class ConeParams:
    """Shape parameters of the cone; all three amplitudes exceed one."""

    a: float
    b: float
    c: float
    eps: float
    s: int
    delta: float = 0.5

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 1.0:
            raise ValueError("cone amplitudes a, b, c must exceed 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.eps <= 0.0 or self.s < 1:
            raise ValueError("need eps > 0 and s >= 1")
        if self.delta * self.a <= 1.0:
            raise ValueError("shrunk cone needs delta * a > 1")

    def scaled(self, factor: float) -> "ConeParams":
        return replace(
            self, a=self.a * factor, b=self.b * factor, c=self.c * factor
        )


@dataclass(frozen=True)
class ConeMargins:
    """Constraint slacks normalized by the weighted mass; membership means
    every margin is nonnegative."""

    mass: float  # un-normalized weighted integral
    avg_low: float  # min cell average / mass
    avg_high: float  # min of (a - cell average / mass)
    lip: float  # b - seminorm / mass
    point: float  # c - complement sup / mass

    @property
    def min_margin(self) -> float:
        return min(self.avg_low, self.avg_high, self.lip, self.point)

    @property
    def is_member(self) -> bool:
        return self.mass > 0.0 and self.min_margin >= 0.0


class FunctionalFamily:
    """Finite sampled family of linear functionals describing one cone.

    Four groups: cell averages, their ``a``-gap versions, signed same-floor
    difference quotients (capped per floor), and signed point evaluations
    on the complement cell (capped).  Evaluation is a dense matrix-vector
    product, so complex arguments work unchanged.
    """

    def __init__(self, coc: TransferCocycle, fiber: int, params: ConeParams,
                 partition: CoverPartition, pair_cap: int = 64,
                 point_cap: int = 128):
        self.fiber = fiber
        self.params = params
        self.partition = partition
        idx = coc.index(fiber)
        if partition.eval_depth != coc.depth:
            raise ValueError(
                f"partition evaluated at depth {partition.eval_depth} but "
                f"cocycle resolves depth {coc.depth}"
            )
        self.mt = idx.mass_mt
        self.cell_of = partition.cell_of
        self.n_cells = partition.n_cells + 1  # complement included
        self.mu_cells = partition.cell_mass_mu
        pairs_i, pairs_j, pair_d = [], [], []
        for floor in idx.floors_present():
            ii, jj, sep = idx.floor_pairs(int(floor))
            take = min(len(ii), pair_cap)
            pairs_i.append(ii[:take])
            pairs_j.append(jj[:take])
            pair_d.append(coc.beta ** sep[:take].astype(float))
        self.pair_i = np.concatenate(pairs_i) if pairs_i else np.zeros(0, int)
        self.pair_j = np.concatenate(pairs_j) if pairs_j else np.zeros(0, int)
        self.pair_d = np.concatenate(pair_d) if pair_d else np.zeros(0)
        comp = np.nonzero(self.cell_of == partition.n_cells)[0]
        self.comp_points = comp[:point_cap]
        self.counts = {
            "cells": self.n_cells,
            "pairs": len(self.pair_i),
            "points": len(self.comp_points),
        }

    @property
    def n_functionals(self) -> int:
        return 2 * self.n_cells + 2 * self.counts["pairs"] \
            + 2 * self.counts["points"]

    def cell_averages(self, values: np.ndarray) -> np.ndarray:
        sums = np.zeros(self.n_cells, dtype=np.result_type(values, float))
        np.add.at(sums, self.cell_of, values * self.mt)
        return sums / self.mu_cells

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        """All functional values, one flat vector per input function."""
        p = self.params
        mass = np.dot(values, self.mt)
        avg = self.cell_averages(values)
        diff = (values[self.pair_i] - values[self.pair_j]) / self.pair_d
        pts = values[self.comp_points]
        return np.concatenate([
            avg,
            p.a * mass - avg,
            p.b * mass - diff,
            p.b * mass + diff,
            p.c * mass - pts,
            p.c * mass + pts,
        ])


class ConeFrame:
    """One fiber's cone: partition, functional family, and membership."""

    def __init__(self, coc: TransferCocycle, fiber: int, params: ConeParams,
                 pair_cap: int = 64, point_cap: int = 128):
        if coc.depth != params.s:
            raise ValueError(
                f"cone resolution {params.s} needs a cocycle at that depth, "
                f"got {coc.depth}"
            )
        self.coc = coc
        self.fiber = fiber
        self.params = params
        dens = coc.density(fiber)
        self.partition = coc.bundle.cover_partition(
            fiber, density=(dens, coc.depth), eps=params.eps, s=params.s
        )
        self.family = FunctionalFamily(
            coc, fiber, params, self.partition, pair_cap, point_cap
        )
        self.idx = coc.index(fiber)
        self.h_values = dens
        h_fn = TowerFn(fiber, coc.depth, dens)
        rep = coc.norms(h_fn)
        self.h_seminorm = rep.seminorm
        self.h_sup = rep.sup
        # worst cell mass ratio between the weighted and equivariant measures
        self.mass_ratio_d = float(
            np.max(self.partition.cell_mass_mt / self.partition.cell_mass_mu)
        )

    def _seminorm(self, values) -> float:
        return self.coc.norms(TowerFn(self.fiber, self.coc.depth,
                                      values)).seminorm

    def membership(self, values: np.ndarray, scale: float = 1.0
                   ) -> ConeMargins:
        """Margins of the (possibly ``scale``-shrunk) cone conditions."""
        p = self.params
        mass = float(np.dot(values, self.family.mt))
        if mass <= 0.0:
            return ConeMargins(mass, -math.inf, -math.inf, -math.inf,
                               -math.inf)
        avg = self.family.cell_averages(values) / mass
        sem = self._seminorm(values) / mass
        comp = np.nonzero(self.family.cell_of == self.partition.n_cells)[0]
        peak = float(np.abs(values[comp]).max()) / mass
        return ConeMargins(
            mass=mass,
            avg_low=float(avg.min()),
            avg_high=float(scale * p.a - avg.max()),
            lip=scale * p.b - sem,
            point=scale * p.c - peak,
        )

    def shrink_factor_needed(self, values: np.ndarray):
        """Smallest scale at which the function meets the scaled cone, or
        ``inf`` when a scale-free condition (nonnegative averages,
        positive mass) already fails."""
        p = self.params
        mass = float(np.dot(values, self.family.mt))
        if mass <= 0.0:
            return math.inf
        avg = self.family.cell_averages(values) / mass
        if avg.min() < -1e-11:
            return math.inf
        sem = self._seminorm(values) / mass
        comp = np.nonzero(self.family.cell_of == self.partition.n_cells)[0]
        peak = float(np.abs(values[comp]).max()) / mass
        return max(avg.max() / p.a, sem / p.b, peak / p.c)

    # ---------------------------------------------------- reproducing map
    def reproducing_coefficient(self, values: np.ndarray) -> float:
        """Shift size that lands ``f + R * density`` inside the cone.

        Four lower bounds, one per cone constraint; the denominators stay
        away from zero because the reference density has small seminorm
        and sup compared to ``b`` and ``c``.
        """
        p = self.params
        if p.b - self.h_seminorm < 0.5 or p.c - self.h_sup < 0.5:
            raise CertificationFailure(
                f"b={p.b} or c={p.c} too close to the reference density "
                f"(seminorm {self.h_seminorm:.3g}, sup {self.h_sup:.3g})"
            )
        mass = float(np.dot(values, self.family.mt))
        avg = self.family.cell_averages(values)
        sem = self._seminorm(values)
        sup = float(np.abs(values).max())
        r1 = float((avg - p.a * mass).max()) / (p.a - 1.0)
        r2 = (sem - p.b * mass) / (p.b - self.h_seminorm)
        r3 = float((-avg).max())
        r4 = (sup - p.c * mass) / (p.c - self.h_sup)
        return max(0.0, r1, r2, r3, r4) * (1.0 + 1e-9) + 1e-12

    def project_member(self, values: np.ndarray) -> np.ndarray:
        return values + self.reproducing_coefficient(values) * self.h_values

    def random_member(self, rng) -> np.ndarray:
        return self.project_member(rng.uniform(-1.0, 1.0, self.idx.n))

    def reproducing_bound_k1(self, weight_mass_bound: float) -> float:
        """Explicit bound constant relating the shift size to the norm of
        the input, valid once ``a`` exceeds 2."""
        p = self.params
        c0 = weight_mass_bound
        return 2.0 * max(
            self.mass_ratio_d + p.a * c0, 1.0 + p.b * c0, 1.0 + p.c * c0
        )

    def sup_bound_c2(self) -> float:
        """Sup-norm control for cone members: on the complement the point
        condition applies directly, on covered cells the average bound
        plus one Lipschitz oscillation across the cell."""
        p = self.params
        return max(
            p.c, self.mass_ratio_d * p.a + p.b * self.coc.beta ** p.s
        )

    def aperture_k(self) -> float:
        return 2.0 * math.sqrt(2.0) * (self.sup_bound_c2() + self.params.b)


def hilbert_distance(u: np.ndarray, w: np.ndarray, family: FunctionalFamily,
                     tol: float = 1e-12) -> float:
    """Projective distance through the sampled dual family.

    A lower bound for the true metric (the family is finite); infinite
    when either argument leaves the sampled cone.
    """
    gu = np.asarray(family.evaluate(u), dtype=float)
    gw = np.asarray(family.evaluate(w), dtype=float)
    scale_u = float(np.abs(gu).max())
    scale_w = float(np.abs(gw).max())
    if scale_u <= _TINY or scale_w <= _TINY:
        raise DegenerateRatio("vanishing functional vector; zero function?")
    if gu.min() < -tol * scale_u or gw.min() < -tol * scale_w:
        return math.inf
    mask_w = gw > tol * scale_w
    mask_u = gu > tol * scale_u
    if not mask_w.any() or not mask_u.any():
        raise DegenerateRatio(
            "every sampled functional vanishes on a strict member"
        )
    r1 = float((gu[mask_w] / gw[mask_w]).max())
    r2 = float((gw[mask_u] / gu[mask_u]).max())
    if r1 <= 0.0 or r2 <= 0.0:
        return math.inf
    return max(math.log(r1 * r2), 0.0)


def complex_bilinear_min(values: np.ndarray, family: FunctionalFamily,
                         cap: int = 300) -> float:
    """Audit form of complex-cone membership: minimum over sampled
    functional pairs of the real part of one conjugated value times the
    other, normalized.  Nonnegative for members of the complexification."""
    g = family.evaluate(values)
    if len(g) > cap:
        step = max(1, len(g) // cap)
        g = g[::step]
    norm = float(np.abs(g).max())
    if norm <= _TINY:
        raise DegenerateRatio("zero functional vector in bilinear audit")
    g = g / norm
    prod = np.conjugate(g)[:, None] * g[None, :]
    return float(prod.real.min())


# --------------------------------------------------------------------------
# certification


@dataclass(frozen=True)
class ContractionCertificate:
    anchor: int
    k: int
    params: ConeParams
    delta_achieved: float  # worst shrink factor over all image samples
    diameter_bound: float  # max pairwise projective distance of images
    sample_counts: dict
    failures: tuple
    eigen_defect: float  # gap between pushed density and the next one
    mass_ratio_d: float
    radius_r: Optional[float] = None

    @property
    def passed(self) -> bool:
        return not self.failures and \
            self.delta_achieved <= self.params.delta + 1e-12

    def implied_step_rate(self) -> float:
        """Per-step decay exponent implied by the diameter via the
        projective contraction factor of one certified block."""
        eta = math.tanh(self.diameter_bound / 4.0)
        return -math.log(eta) / self.k


def certify_contraction(coc: TransferCocycle, anchor: int, k: int,
                        params: ConeParams, n_samples: int = 200,
                        seed: int = 0, pair_cap: int = 64,
                        point_cap: int = 128, d0_sample_cap: int = 60
                        ) -> ContractionCertificate:
    """Push sampled cone members through ``k`` operator steps and measure
    how deep inside the shrunk cone the images land.

    Failures list hard violations (negative cell averages, lost mass,
    shrink factor above the target); an empty list plus
    ``delta_achieved <= delta`` is a pass.
    """
    if k < 1:
        raise ValueError("need at least one operator step")
    frame_src = ConeFrame(coc, anchor, params, pair_cap, point_cap)
    frame_tgt = ConeFrame(coc, anchor + k, params, pair_cap, point_cap)
    failures = []

    h_m = frame_src.membership(frame_src.h_values)
    if not h_m.is_member:
        raise CertificationFailure(
            f"reference density outside the cone (margins {h_m}); "
            f"raise b and c"
        )
    rng = np.random.default_rng(seed)
    samples = [frame_src.h_values.copy(),
               np.ones(frame_src.idx.n)]
    for _ in range(max(0, n_samples - 2)):
        samples.append(frame_src.random_member(rng))

    one_m = frame_src.membership(samples[1])
    if not one_m.is_member:
        failures.append(
            {"kind": "constant-not-member", "margin": one_m.min_margin}
        )

    images = []
    h_img = None
    delta_achieved = 0.0
    for i, vals in enumerate(samples):
        src_m = frame_src.membership(vals)
        if src_m.min_margin < -1e-9:
            failures.append({"kind": "source-margin", "sample": i,
                             "margin": src_m.min_margin})
            continue
        img = coc.apply_L_n(anchor, TowerFn(anchor, coc.depth, vals.copy()),
                            k).values
        if i == 0:
            h_img = img
        need = frame_tgt.shrink_factor_needed(img)
        if not math.isfinite(need):
            failures.append({"kind": "image-left-cone", "sample": i})
            continue
        delta_achieved = max(delta_achieved, need)
        if need > params.delta + 1e-12:
            failures.append({"kind": "shrink-factor", "sample": i,
                             "needed": need})
        images.append(img)

    # the pushed reference density must track the next fiber's density
    h_tgt = frame_tgt.h_values
    if h_img is None:
        eigen_defect = math.inf
        failures.append({"kind": "reference-image-missing"})
    else:
        eigen_defect = float(
            np.abs(h_img / np.dot(h_img, frame_tgt.family.mt) - h_tgt).max()
        )

    d0 = 0.0
    sub = images[:d0_sample_cap]
    for i in range(len(sub)):
        for j in range(i + 1, len(sub)):
            d = hilbert_distance(sub[i], sub[j], frame_tgt.family)
            if math.isfinite(d):
                d0 = max(d0, d)
            else:
                failures.append({"kind": "infinite-image-distance",
                                 "pair": (i, j)})
    return ContractionCertificate(
        anchor=anchor, k=k, params=params,
        delta_achieved=delta_achieved, diameter_bound=d0,
        sample_counts={"members": len(samples), "images": len(images),
                       **frame_src.family.counts},
        failures=tuple(failures),
        eigen_defect=eigen_defect,
        mass_ratio_d=frame_src.mass_ratio_d,
    )


def auto_certify(coc_builder, anchor: int, params: ConeParams, k: int,
                 n_samples: int = 200, seed: int = 0, budget: int = 4):
    """Retry certification along the sufficiency direction: widen the
    Lipschitz and sup amplitudes, add steps, and shrink the complement.

    ``coc_builder`` maps a partition depth ``s`` to a cocycle at that
    resolution, letting the search change ``s`` later if needed.
    """
    last_exc = None
    for round_ in range(budget):
        try:
            cert = certify_contraction(
                coc_builder(params.s), anchor, k, params,
                n_samples=n_samples, seed=seed + round_,
            )
            if cert.passed:
                return cert
            last_exc = CertificationFailure(
                f"round {round_}: delta {cert.delta_achieved:.3g} over "
                f"target {params.delta}, {len(cert.failures)} failures"
            )
        except CertificationFailure as exc:
            last_exc = exc
        params = replace(params, b=params.b * 4.0, c=params.c * 4.0,
                         eps=params.eps / 2.0)
        k += 6
    raise last_exc


# --------------------------------------------------------------------------
# complex perturbation radius


@dataclass(frozen=True)
class ComplexRadiusReport:
    r: float
    eps1: float  # worst relative functional perturbation at radius r
    delta: float  # contraction criterion value at r, must stay below 1
    d0: float
    d1_complex: float  # image diameter bound in the complex metric
    slope_ratio: float  # eps1(r/2) / eps1(r); near 1/2 in the linear regime
    n_members: int
    n_angles: int
    k: int


def complex_radius(coc: TransferCocycle, anchor: int, k: int,
                   params: ConeParams, obs: Observable,
                   certificate: ContractionCertificate,
                   n_members: int = 24, n_angles: int = 8, seed: int = 1,
                   r_window: float = 1.0, rel_tol: float = 1e-3
                   ) -> ComplexRadiusReport:
    """Largest certified radius for the complex-weighted operators.

    Bisection on the radius; at each candidate the worst relative
    perturbation of the sampled functionals between the weighted and
    unweighted images is compared against the cosh criterion derived from
    the real diameter estimate.
    """
    d0 = certificate.diameter_bound
    if d0 / 2.0 > 700.0:
        raise NoPositiveRadius(f"diameter estimate {d0:.3g} overflows the "
                               f"criterion; certify with more samples")
    cosh_term = 1.0 + math.cosh(d0 / 2.0)
    frame_src = ConeFrame(coc, anchor, params)
    frame_tgt = ConeFrame(coc, anchor + k, params)
    rng = np.random.default_rng(seed)
    members = [frame_src.h_values.copy(), np.ones(frame_src.idx.n)]
    for _ in range(max(0, n_members - 2)):
        members.append(frame_src.random_member(rng))
    base = []
    for vals in members:
        img = coc.apply_L_n(anchor, TowerFn(anchor, coc.depth, vals.copy()),
                            k).values
        base.append((vals, frame_tgt.family.evaluate(img)))
    angles = np.exp(2j * np.pi * np.arange(n_angles) / n_angles)

    def eps1_at(r: float) -> float:
        worst = 0.0
        for vals, g0 in base:
            floor = 1e-14 * float(np.abs(g0).max())
            ok = g0 > floor
            for rot in angles:
                z = r * rot
                img = coc.apply_L_n(
                    anchor, TowerFn(anchor, coc.depth,
                                    vals.astype(complex)), k, z, obs,
                ).values
                gz = frame_tgt.family.evaluate(img)
                diff = np.abs(gz - g0)
                if np.any(~ok & (diff > floor)):
                    return math.inf
                worst = max(worst, float((diff[ok] / g0[ok]).max()))
        return worst

    def delta_at(r: float) -> float:
        return 2.0 * eps1_at(r) * cosh_term

    if delta_at(r_window) < 1.0 - 1e-6:
        r_best = r_window  # only the configured window limits the radius
    else:
        lo, hi = 0.0, r_window
        if delta_at(1e-8 * r_window) >= 1.0 - 1e-6:
            raise NoPositiveRadius(
                f"criterion fails even at radius {1e-8 * r_window:.2e}; "
                f"diameter estimate {d0:.3g} is likely too coarse"
            )
        lo = 1e-8 * r_window
        while hi - lo > rel_tol * hi:
            mid = 0.5 * (lo + hi)
            if delta_at(mid) < 1.0 - 1e-6:
                lo = mid
            else:
                hi = mid
        r_best = lo
    e_r = eps1_at(r_best)
    e_half = eps1_at(r_best / 2.0)
    d_r = 2.0 * e_r * cosh_term
    return ComplexRadiusReport(
        r=r_best, eps1=e_r, delta=d_r, d0=d0,
        d1_complex=d0 + 6.0 * abs(math.log(max(1.0 - d_r, 1e-300))),
        slope_ratio=e_half / e_r if e_r > 0 else float("nan"),
        n_members=len(members), n_angles=n_angles, k=k,
    )
