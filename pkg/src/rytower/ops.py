"""Transfer operators on cylinder-resolved tower functions.

A *tower function* stores one complex value per depth-``D`` cylinder of one
fiber.  For observables that are constant on atoms (resolution 1) and any
``D >= 1``, a single operator step is an exact finite linear map: the value
of the image on a target cylinder is a weighted sum over the predecessor
cylinders obtained by prepending one atom to the target itinerary — the
unique climb predecessor for floors above the base, and one predecessor per
returning atom for base floors.

The module also hosts the weighted norms, the equivariant density obtained
by pulling back the constant function and renormalizing, empirical
Lasota-Yorke inequality checks, mixing coefficients, and correlation decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NoConvergence, ResolutionMismatch, TruncationEscape
from .tower import _CODE_BASE, CylinderIndex, TowerBundle

# numerical slack allowed when asserting certified inequalities
SLACK = 1e-9


# --------------------------------------------------------------------------
# observables


class Observable:
    """Real observable on tower points, one value family per fiber.

    ``value`` gives the atom-constant part; observables whose values vary
    inside atoms set ``pointwise`` and override ``value_at`` — they are
    handled at cylinder resolution by midpoint evaluation, which is
    approximate and reported as such.
    """

    name = "obs"
    lattice_span: Optional[float] = None
    pointwise = False

    def value(self, fiber: int, floor: int, sid: int, atom: int) -> float:
        raise NotImplementedError

    def value_at(self, fiber, floor, sid, atom, x) -> float:
        return self.value(fiber, floor, sid, atom)


class BaseIndicator(Observable):
    """1 on the base floor, 0 above; integer lattice with span 1."""

    name = "base-indicator"
    lattice_span = 1.0

    def value(self, fiber, floor, sid, atom):
        return 1.0 if floor == 0 else 0.0


class AtomTable(Observable):
    """Per-symbol, per-atom values, independent of floor and fiber."""

    def __init__(self, tables, name="atom-table", lattice_span=None):
        self.tables = {k: tuple(v) for k, v in tables.items()}
        self.name = name
        self.lattice_span = lattice_span

    def value(self, fiber, floor, sid, atom):
        return float(self.tables[sid][atom])


class Coordinate(Observable):
    """The base coordinate itself; varies inside atoms (Lipschitz demo)."""

    name = "coordinate"
    pointwise = True

    def value(self, fiber, floor, sid, atom):
        raise ResolutionMismatch(
            "coordinate observable needs a point; use value_at"
        )

    def value_at(self, fiber, floor, sid, atom, x):
        return float(x)


class Centered(Observable):
    """Base observable minus its exact fiber mean under the equivariant
    measure; built via :meth:`TransferCocycle.centered`."""

    def __init__(self, base: Observable, cocycle: "TransferCocycle"):
        self.base = base
        self.cocycle = cocycle
        self.name = f"{base.name}-centered"
        self.lattice_span = None  # shifted values leave the lattice
        self.pointwise = base.pointwise
        self._means: dict[int, float] = {}

    def mean(self, fiber: int) -> float:
        if fiber not in self._means:
            self._means[fiber] = self.cocycle.fiber_mean(fiber, self.base)
        return self._means[fiber]

    def value(self, fiber, floor, sid, atom):
        return self.base.value(fiber, floor, sid, atom) - self.mean(fiber)

    def value_at(self, fiber, floor, sid, atom, x):
        return self.base.value_at(fiber, floor, sid, atom, x) - self.mean(fiber)


# --------------------------------------------------------------------------
# tower functions and reports


@dataclass
class TowerFn:
    """Values on the depth-``depth`` cylinders of one fiber."""

    fiber: int
    depth: int
    values: np.ndarray

    def copy(self):
        return TowerFn(self.fiber, self.depth, self.values.copy())


@dataclass(frozen=True)
class NormReport:
    sup: float  # plain sup norm
    seminorm: float  # unweighted Lipschitz seminorm over same-floor pairs
    norm_s: float  # weighted sup norm
    norm_h: float  # weighted Lipschitz norm
    norm_li: float  # sup + seminorm
    l1_m: float  # L1 against the reference measure
    l1_mt: float  # L1 against the weighted measure

    @property
    def norm_omega(self):
        return self.norm_s + self.norm_h


@dataclass(frozen=True)
class DensityResult:
    fiber: int
    values: np.ndarray  # weighted density per cylinder (real)
    residual: float  # norm gap between successive pullback windows
    equivariance_defect: float  # TV defect of the push-forward, atom level
    h_min: float  # bounds for the plain (unweighted) density
    h_max: float
    h_seminorm: float


@dataclass(frozen=True)
class LyCheck:
    """Empirical slack of the four inequality branches for one sample."""

    n_steps: int
    t: float
    slack_high_sup: float  # floors >= N, sup bound
    slack_high_lip: float  # floors >= N, Lipschitz bound
    slack_low_sup: float  # floors < N, integral bound
    slack_low_lip: float
    r_n: float  # the integral-plus-tail majorant

    def worst(self):
        return min(
            self.slack_high_sup, self.slack_high_lip,
            self.slack_low_sup, self.slack_low_lip,
        )


# --------------------------------------------------------------------------


class TransferCocycle:
    """Transfer operators of one environment at fixed cylinder resolution.

    Parameters
    ----------
    bundle : TowerBundle
        Tower geometry provider.
    depth : int
        Cylinder resolution of all tower functions handled here.  With
        atom-constant observables every operation is exact at any depth;
        pointwise observables are resolved by cylinder midpoints.
    density_window : int
        Pullback length used when extracting equivariant densities.
    """

    def __init__(self, bundle: TowerBundle, depth: int = 1,
                 density_window: int = 64):
        self.bundle = bundle
        self.depth = int(depth)
        self.density_window = int(density_window)
        self._structs: dict[int, tuple] = {}
        self._phi: dict[tuple, np.ndarray] = {}
        self._dens: dict[int, np.ndarray] = {}
        self._shift_pos: dict[int, np.ndarray] = {}

    # ------------------------------------------------------------- plumbing
    @property
    def beta(self):
        return self.bundle.beta

    @property
    def eps0(self):
        return self.bundle.eps0

    def index(self, fiber: int) -> CylinderIndex:
        return self.bundle.index(fiber, self.depth)

    def ones(self, fiber: int) -> TowerFn:
        return TowerFn(fiber, self.depth, np.ones(self.index(fiber).n))

    def inverse_weight(self, fiber: int) -> TowerFn:
        """The reciprocal floor weight ``exp(-eps0 * floor)`` as a function."""
        idx = self.index(fiber)
        return TowerFn(fiber, self.depth, np.exp(-self.eps0 * idx.floor0))

    def lift(self, fiber: int, obs: Observable) -> TowerFn:
        """Observable values per cylinder (midpoints when pointwise)."""
        return TowerFn(fiber, self.depth, self._obs_values(fiber, obs).copy())

    def _obs_values(self, fiber: int, obs: Observable) -> np.ndarray:
        key = (fiber, obs)
        if key not in self._phi:
            idx = self.index(fiber)
            vals = np.empty(idx.n)
            for r in range(idx.n):
                f = int(idx.floor0[r])
                a = int(idx.atom0[r])
                sid = self.bundle.floor_symbol(fiber, f)
                if obs.pointwise:
                    mid = 0.5 * (idx.lo0[r] + idx.hi0[r])
                    vals[r] = obs.value_at(fiber, f, sid, a, mid)
                else:
                    vals[r] = obs.value(fiber, f, sid, a)
            self._phi[key] = vals
        return self._phi[key]

    def centered(self, obs: Observable) -> Centered:
        return Centered(obs, self)

    def fiber_mean(self, fiber: int, obs: Observable) -> float:
        """Exact mean of the observable under the equivariant measure."""
        idx = self.index(fiber)
        mu = self.density(fiber) * idx.mass_mt
        return float(np.dot(self._obs_values(fiber, obs), mu))

    # ------------------------------------------------------------ integrals
    def integral_mt(self, fn: TowerFn):
        """Integral against the weighted reference measure."""
        return np.dot(fn.values, self.index(fn.fiber).mass_mt)

    def integral_m(self, fn: TowerFn):
        return np.dot(fn.values, self.index(fn.fiber).mass_m)

    # ------------------------------------------------------------- operator
    def _structure(self, fiber: int):
        """Predecessor map from cylinders at ``fiber`` to ``fiber + 1``."""
        if fiber not in self._structs:
            src_idx = self.index(fiber)
            tgt_idx = self.index(fiber + 1)
            model = self.bundle.model
            # guard: truncated towers must not lose climbing mass
            top = self.bundle.l_max
            sid_top = self.bundle.floor_symbol(fiber, top)
            for a in self.bundle.tower(fiber).floor_alive[top]:
                if model.symbols[sid_top].atoms[int(a)].return_time > top + 1:
                    raise TruncationEscape(
                        f"atom {int(a)} on floor {top} climbs past the "
                        f"truncation height"
                    )
            returning = []  # (floor, atom, length) with return time floor+1
            tw = self.bundle.tower(fiber)
            for f in range(self.bundle.l_max + 1):
                sid = tw.floor_symbols[f]
                for a in tw.floor_alive[f]:
                    atom = model.symbols[sid].atoms[int(a)]
                    if atom.return_time == f + 1:
                        returning.append((f, int(a), atom.length))
            src_list, tgt_list, wp_list = [], [], []
            d = self.depth
            for t in range(tgt_idx.n):
                row = tgt_idx.codes[t]
                fl0 = int(row[0]) // _CODE_BASE
                at0 = int(row[0]) % _CODE_BASE
                if fl0 >= 1:
                    key = ((fl0 - 1) * _CODE_BASE + at0,) + tuple(row[: d - 1])
                    src_list.append(src_idx.pos[key])
                    tgt_list.append(t)
                    wp_list.append(1.0)
                else:
                    for f, a, length in returning:
                        key = (f * _CODE_BASE + a,) + tuple(row[: d - 1])
                        src_list.append(src_idx.pos[key])
                        tgt_list.append(t)
                        wp_list.append(length)
            src = np.array(src_list, dtype=np.int64)
            tgt = np.array(tgt_list, dtype=np.int64)
            wp = np.array(wp_list)
            wl = wp * np.exp(
                self.eps0 * (src_idx.floor0[src] - tgt_idx.floor0[tgt])
            )
            self._structs[fiber] = (src, tgt, wp, wl, tgt_idx.n)
        return self._structs[fiber]

    def _apply(self, fiber, fn, z, obs, weighted):
        if fn.fiber != fiber or fn.depth != self.depth:
            raise ResolutionMismatch(
                f"function at fiber {fn.fiber} depth {fn.depth}; "
                f"expected fiber {fiber} depth {self.depth}"
            )
        src, tgt, wp, wl, n_tgt = self._structure(fiber)
        w = wl if weighted else wp
        if obs is not None and z != 0:
            phi = self._obs_values(fiber, obs)
            amp = w * np.exp(z * phi[src])
        else:
            amp = w
        contrib = amp * fn.values[src]
        out = np.zeros(n_tgt, dtype=contrib.dtype)
        np.add.at(out, tgt, contrib)
        return TowerFn(fiber + 1, self.depth, out)

    def apply_P(self, fiber: int, fn: TowerFn, z=0.0,
                obs: Observable | None = None) -> TowerFn:
        """One step of the plain transfer operator with weight
        ``exp(z * observable) / |F'|``; result lives at ``fiber + 1``."""
        return self._apply(fiber, fn, z, obs, weighted=False)

    def apply_L(self, fiber: int, fn: TowerFn, z=0.0,
                obs: Observable | None = None) -> TowerFn:
        """One step of the floor-weighted transfer operator (the plain
        operator conjugated by the floor weight)."""
        return self._apply(fiber, fn, z, obs, weighted=True)

    def apply_L_n(self, fiber, fn, n, z=0.0, obs=None):
        for j in range(fiber, fiber + n):
            fn = self.apply_L(j, fn, z, obs)
        return fn

    def apply_P_n(self, fiber, fn, n, z=0.0, obs=None):
        for j in range(fiber, fiber + n):
            fn = self.apply_P(j, fn, z, obs)
        return fn

    # ------------------------------------------------------------- duality
    def _shifted_positions(self, fiber: int) -> np.ndarray:
        """For each depth-(D+1) cylinder at ``fiber``, the position of its
        one-step image cylinder in the depth-D index at ``fiber + 1``."""
        if fiber not in self._shift_pos:
            deep = self.bundle.index(fiber, self.depth + 1)
            nxt = self.index(fiber + 1)
            self._shift_pos[fiber] = np.array(
                [nxt.pos[tuple(row[1:])] for row in deep.codes], dtype=np.int64
            )
        return self._shift_pos[fiber]

    def duality_gap(self, fiber: int, f: TowerFn, g: TowerFn, z=0.0,
                    obs: Observable | None = None):
        """Defect of the adjoint identity: integral of ``f * (step g)``
        downstream minus integral of ``exp(z*phi) * g * (f o F)`` upstream.

        Vanishes identically (up to rounding) for exact resolutions.
        """
        lhs = self.integral_mt(
            TowerFn(
                fiber + 1, self.depth,
                f.values * self.apply_L(fiber, g, z, obs).values,
            )
        )
        deep = self.bundle.index(fiber, self.depth + 1)
        pre = deep.prefix_positions(self.index(fiber))
        img = self._shifted_positions(fiber)
        weight = deep.mass_mt
        gv = g.values[pre]
        if obs is not None and z != 0:
            gv = gv * np.exp(z * self._obs_values(fiber, obs)[pre])
        rhs = np.dot(f.values[img] * gv, weight)
        return lhs - rhs

    # -------------------------------------------------------------- density
    def _pullback(self, fiber: int, window: int) -> np.ndarray:
        g = self.ones(fiber - window)
        g.values /= self.integral_mt(g)
        for j in range(fiber - window, fiber):
            g = self.apply_L(j, g)
            g.values /= self.integral_mt(g)
        return g.values

    def density(self, fiber: int) -> np.ndarray:
        """Equivariant density against the weighted measure, normalized to
        unit weighted integral; cached per fiber."""
        if fiber not in self._dens:
            self._dens[fiber] = self._pullback(
                fiber, self.density_window + 8
            )
        return self._dens[fiber]

    def density_result(self, fiber: int, window: int | None = None,
                       tol: float = 1e-11) -> DensityResult:
        window = window or self.density_window
        a = self._pullback(fiber, window)
        b = self._pullback(fiber, window + 8)
        gap = TowerFn(fiber, self.depth, a - b)
        residual = self.norms(gap).norm_li
        if residual > tol:
            raise NoConvergence(
                f"density pullback residual {residual:.3e} above {tol:.1e} "
                f"at window {window}; raise the window"
            )
        idx = self.index(fiber)
        plain = b * np.exp(self.eps0 * idx.floor0)  # unweighted density
        rep = self.norms(TowerFn(fiber, self.depth, plain))
        self._dens[fiber] = b
        defect = self.equivariance_defect(fiber)
        return DensityResult(
            fiber=fiber,
            values=b,
            residual=residual,
            equivariance_defect=defect,
            h_min=float(plain.min()),
            h_max=float(plain.max()),
            h_seminorm=rep.seminorm,
        )

    def equivariance_defect(self, fiber: int) -> float:
        """Total-variation defect, at cylinder resolution, between the
        pushed-forward equivariant measure and the next fiber's one."""
        h = self.density(fiber)
        pushed = self.apply_L(fiber, TowerFn(fiber, self.depth, h.copy()))
        nxt = self.density(fiber + 1)
        mt = self.index(fiber + 1).mass_mt
        return 0.5 * float(np.abs(pushed.values - nxt).dot(mt))

    # ---------------------------------------------------------------- norms
    def norms(self, fn: TowerFn) -> NormReport:
        idx = self.index(fn.fiber)
        vals = fn.values
        sup = float(np.abs(vals).max()) if len(vals) else 0.0
        seminorm = 0.0
        norm_s = 0.0
        norm_h = 0.0
        for floor in idx.floors_present():
            v_f = math.exp(self.eps0 * floor)
            members = idx.floor0 == floor
            s_f = float(np.abs(vals[members]).max())
            norm_s = max(norm_s, s_f / v_f)
            ii, jj, sep = idx.floor_pairs(int(floor))
            if len(ii):
                lip = float(
                    (np.abs(vals[ii] - vals[jj]) / self.beta**sep).max()
                )
            else:
                lip = 0.0
            seminorm = max(seminorm, lip)
            norm_h = max(norm_h, lip / v_f)
        l1m = float(np.abs(vals).dot(idx.mass_m))
        l1mt = float(np.abs(vals).dot(idx.mass_mt))
        return NormReport(
            sup=sup, seminorm=seminorm, norm_s=norm_s, norm_h=norm_h,
            norm_li=sup + seminorm, l1_m=l1m, l1_mt=l1mt,
        )

    # ------------------------------------------------- inequality constants
    def lip_constant(self, obs: Observable) -> float:
        """Worst-case Lipschitz seminorm of the observable over floors and
        symbols, amplified by the geometric series of the metric base."""
        worst = 0.0
        model = self.bundle.model
        for sid, sym in enumerate(model.symbols):
            for floor in range(self.bundle.l_max + 1):
                alive = sym.atoms_with_return_above(floor)
                vals = [obs.value(0, floor, sid, int(a)) for a in alive]
                for i in range(len(vals)):
                    for k in range(i + 1, len(vals)):
                        worst = max(
                            worst, abs(vals[i] - vals[k]) / self.beta
                        )
        return worst / (1.0 - self.beta)

    def comparability_q(self) -> float:
        """Cylinder-mass versus Jacobian comparability constant.

        For affine branches the ratio of cylinder mass to reciprocal
        Jacobian equals the length of the atom entered at the last return,
        so the two-sided constant is the reciprocal of the shortest atom.
        """
        return 1.0 / self.bundle.model.min_atom_length

    def weight_sum_bound(self) -> float:
        """Worst-case weighted tower mass over fibers (finite sum)."""
        model = self.bundle.model
        return math.fsum(
            math.exp(self.eps0 * f)
            * max(sym.tail(f + 1) for sym in model.symbols)
            for f in range(model.max_return)
        )

    # distortion constant of the affine family: log-Jacobian is constant on
    # every branch, so iterated distortion vanishes identically
    C1 = 0.0

    def ly_check(self, fiber: int, g: TowerFn, n_steps: int, t: float,
                 obs: Observable) -> LyCheck:
        """Empirical slack of the uniform inequalities for the plain
        operator with imaginary weight ``exp(i t * observable)``.

        All four bounds must come out with nonnegative slack (up to
        rounding) for resolved functions; a negative value signals a bug
        in the operator, the norms, or the constants.
        """
        src_rep = self.norms(g)
        h_n = self.apply_P_n(fiber, g, n_steps, 1j * t, obs)
        tgt_idx = self.index(fiber + n_steps)
        a_const = self.lip_constant(obs)
        q = self.comparability_q()
        c2 = self.weight_sum_bound()
        r_n = q * (
            src_rep.l1_m + self.beta**n_steps * src_rep.norm_h * c2
        )
        hi_sup = math.inf
        hi_lip = math.inf
        lo_sup = math.inf
        lo_lip = math.inf
        vals = h_n.values
        for floor in tgt_idx.floors_present():
            members = tgt_idx.floor0 == floor
            peak = float(np.abs(vals[members]).max())
            ii, jj, sep = tgt_idx.floor_pairs(int(floor))
            pair_gap = np.abs(vals[ii] - vals[jj]) if len(ii) else None
            if floor >= n_steps:
                v_low = math.exp(self.eps0 * (floor - n_steps))
                hi_sup = min(hi_sup, v_low * src_rep.norm_s - peak)
                if pair_gap is not None and len(ii):
                    bound = (
                        src_rep.norm_h * self.beta**n_steps
                        + (a_const * abs(t) + 2.0 / self.beta) * src_rep.norm_s
                    ) * v_low * self.beta**sep
                    hi_lip = min(hi_lip, float((bound - pair_gap).min()))
            else:
                lo_sup = min(lo_sup, r_n - peak)
                if pair_gap is not None and len(ii):
                    bound = (
                        (self.C1 + 2.0 / self.beta + abs(t) * a_const)
                        * r_n * self.beta**sep
                    )
                    lo_lip = min(lo_lip, float((bound - pair_gap).min()))
        return LyCheck(
            n_steps=n_steps, t=t,
            slack_high_sup=hi_sup, slack_high_lip=hi_lip,
            slack_low_sup=lo_sup, slack_low_lip=lo_lip, r_n=r_n,
        )

    # ------------------------------------------------------------ mixing
    def mixing_coefficients(self, fiber: int, k_list: Sequence[int],
                            n_samples: int = 50, seed: int = 0):
        """Empirical uniform mixing coefficients.

        For each lag ``k`` the weighted operator is applied to a battery of
        random nonnegative functions and the L1 gap to the limit density,
        normalized by the Lipschitz norm of the input, is maximized.
        """
        rng = np.random.default_rng([seed, fiber & 0xFFFF])
        idx = self.index(fiber)
        batch = [
            TowerFn(fiber, self.depth, rng.uniform(0.05, 1.0, idx.n))
            for _ in range(n_samples)
        ]
        denoms = [self.norms(g).norm_li for g in batch]
        masses = [self.integral_mt(g) for g in batch]
        out = []
        for k in sorted(k_list):
            tgt_mt = self.index(fiber + k).mass_mt
            h_tgt = self.density(fiber + k)
            worst = 0.0
            for g, d, m in zip(batch, denoms, masses):
                img = self.apply_L_n(fiber, g.copy(), k)
                gap = float(np.abs(img.values - m * h_tgt).dot(tgt_mt))
                worst = max(worst, gap / d)
            out.append((k, worst))
        return out

    def correlation(self, fiber: int, g_obs: Observable, f_obs: Observable,
                    n_list: Sequence[int]):
        """Exact correlations between an observable now and one later.

        Returns ``[(n, covariance)]`` with the covariance of ``g`` at the
        start fiber and ``f`` pushed ``n`` steps, both under the
        equivariant measures.
        """
        g0 = self.lift(fiber, g_obs)
        h0 = self.density(fiber)
        mean_g = float(np.dot(g0.values * h0, self.index(fiber).mass_mt))
        out = []
        pos = fiber
        current = TowerFn(fiber, self.depth, g0.values * h0)
        for n in sorted(n_list):
            while pos < fiber + n:
                current = self.apply_L(pos, current)
                pos += 1
            idx_n = self.index(fiber + n)
            f_n = self._obs_values(fiber + n, f_obs)
            joint = float(np.dot(f_n * current.values, idx_n.mass_mt))
            mean_f = float(
                np.dot(f_n * self.density(fiber + n), idx_n.mass_mt)
            )
            out.append((n, joint - mean_g * mean_f))
        return out
