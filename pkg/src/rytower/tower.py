"""Tower geometry over a driven symbol sequence.

For an environment ``env`` and fiber index ``j``, the tower at ``j`` stacks
copies of base atoms: floor ``f`` holds the atoms of the symbol driving
index ``j - f`` whose return time exceeds ``f``.  The tower map climbs one
floor per step until the return time expires, then applies the atom's
affine full branch back to the base of the *next* fiber's tower.

Cylinders of depth ``n`` are the atoms of the common refinement of the
first ``n`` symbolic coordinates; on an affine family their reference
masses are exact products of conditional branch lengths.  The walk used
here maintains the footprint of each cylinder in the coordinates of the
current fiber, so conditional factors stay well scaled even at depths
where the absolute mass underflows the interesting digits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import Environment, Model, symbol_at
from .errors import (
    AscovFailure,
    CombinatorialBlowup,
    TruncationEscape,
    WeightTooLarge,
)
from . import env as _env_mod

# itinerary step code = floor * _CODE_BASE + atom_index
_CODE_BASE = 4096


@dataclass(frozen=True)
class TowerPoint:
    """A point of a fiber tower: base coordinate ``x`` on floor ``floor``."""

    floor: int
    x: float


@dataclass(frozen=True)
class TowerShape:
    """Static geometry of one fiber's (truncated) tower."""

    fiber: int
    l_max: int
    floor_symbols: tuple[int, ...]  # symbol id per floor 0..l_max
    floor_alive: tuple[np.ndarray, ...]  # atom indices alive per floor
    floor_masses: np.ndarray
    total_mass: float
    weighted_mass: float  # sum of exp(eps0*f) * floor mass
    residue: float  # exact mass lost to truncation (0 at full height)

    def alive_count(self) -> int:
        return sum(len(a) for a in self.floor_alive)


# --------------------------------------------------------------------------


class CylinderIndex:
    """Canonical ordering of the depth-``depth`` cylinders of one fiber.

    Cylinders are emitted in depth-first walk order starting from
    ``(floor, atom)`` in increasing order, branching over landing atoms in
    increasing order at each return; the order is deterministic and stable
    across runs.
    """

    def __init__(self, fiber, depth, codes, mass_m, mass_mt, lo0, hi0):
        self.fiber = fiber
        self.depth = depth
        self.codes = codes  # (n, depth) int64 itinerary codes
        self.mass_m = mass_m
        self.mass_mt = mass_mt
        self.lo0 = lo0
        self.hi0 = hi0
        self.n = len(mass_m)
        self.floor0 = (codes[:, 0] // _CODE_BASE).astype(np.int64)
        self.atom0 = (codes[:, 0] % _CODE_BASE).astype(np.int64)
        self.pos = {tuple(row): k for k, row in enumerate(codes)}
        self._pair_cache: dict[int, tuple] = {}

    def prefix_positions(self, shallow: "CylinderIndex") -> np.ndarray:
        """For each cylinder here, the position of its prefix in a
        shallower index of the same fiber."""
        d = shallow.depth
        if d > self.depth or shallow.fiber != self.fiber:
            raise ValueError("prefix index must be shallower, same fiber")
        return np.array(
            [shallow.pos[tuple(row[:d])] for row in self.codes], dtype=np.int64
        )

    def floor_pairs(self, floor: int):
        """All unordered pairs of distinct cylinders starting on ``floor``
        with their exact separation times.

        Returns ``(i_idx, j_idx, sep)``; two cylinders separate at the
        first symbolic coordinate where their itineraries differ, plus one.
        """
        if floor not in self._pair_cache:
            members = np.nonzero(self.floor0 == floor)[0]
            k = len(members)
            if k < 2:
                empty = np.zeros(0, dtype=np.int64)
                self._pair_cache[floor] = (empty, empty, empty)
            else:
                sub = self.codes[members]  # (k, depth)
                diff = sub[:, None, :] != sub[None, :, :]
                # first differing coordinate; argmax returns 0 when equal,
                # but distinct cylinders always differ somewhere
                first = np.argmax(diff, axis=2)
                iu, ju = np.triu_indices(k, 1)
                sep = first[iu, ju] + 1
                self._pair_cache[floor] = (members[iu], members[ju], sep)
        return self._pair_cache[floor]

    def floors_present(self) -> np.ndarray:
        return np.unique(self.floor0)


@dataclass(frozen=True)
class Cylinder:
    """Record form of one cylinder, used for delimited output."""

    depth: int
    start_floor: int
    start_atom: int
    word: tuple[int, ...]  # landing-atom choices at successive returns
    mass_m: float
    mass_weighted: float
    birkhoff_sum: Optional[float] = None
    mass_mu: Optional[float] = None


@dataclass(frozen=True)
class CoverPartition:
    """Heavy depth-``s`` cylinders of one fiber plus the complement cell.

    ``cell_of[c]`` maps each cylinder of the evaluation-depth index to its
    cell: values ``0 .. n_cells-1`` are selected cells in decreasing
    weighted-mass order, ``n_cells`` is the complement.  Mass arrays have
    length ``n_cells + 1`` with the complement last.
    """

    fiber: int
    s: int
    eval_depth: int
    n_cells: int
    cell_of: np.ndarray
    cell_mass_m: np.ndarray
    cell_mass_mt: np.ndarray
    cell_mass_mu: np.ndarray
    delta: float
    eps: float


# --------------------------------------------------------------------------


class TowerBundle:
    """Lazy family of towers of one environment, sharing truncation height,
    floor-weight exponent and the symbolic-metric base.

    Parameters
    ----------
    env : Environment
    l_max : int, optional
        Truncation height; defaults to ``max_return - 1`` which is exact
        (no mass above the top floor, no escaping orbits).
    eps0 : float, optional
        Floor-weight exponent; defaults to half the fitted tail decay rate.
    beta : float
        Base of the symbolic metric ``d(x, y) = beta ** separation``.
    weight_budget : float, optional
        Upper bound allowed for the weighted tower mass of any fiber.
    """

    def __init__(self, env: Environment, l_max=None, eps0=None, beta=0.5,
                 weight_budget=None):
        self.env = env
        self.model: Model = env.model
        if eps0 is None:
            _, c2 = _env_mod._fit_tail_envelope(self.model, 16.0)
            eps0 = c2 / 2.0
        self.eps0 = float(eps0)
        self.beta = float(beta)
        self.l_max = int(l_max) if l_max is not None else self.model.max_return - 1
        self.weight_budget = weight_budget
        self._symbols: dict[int, int] = {}
        self._towers: dict[int, TowerShape] = {}
        self._indexes: dict[tuple[int, int], CylinderIndex] = {}

    # ---------------------------------------------------------------- basics
    def symbol(self, index: int) -> int:
        if index not in self._symbols:
            self._symbols[index] = symbol_at(self.env, index)
        return self._symbols[index]

    def floor_symbol(self, fiber: int, floor: int) -> int:
        return self.symbol(fiber - floor)

    def floor_weight(self, floor) -> np.ndarray | float:
        return np.exp(self.eps0 * np.asarray(floor, dtype=float))

    def tower(self, fiber: int) -> TowerShape:
        if fiber not in self._towers:
            self._towers[fiber] = self._build_tower(fiber)
        return self._towers[fiber]

    def _build_tower(self, fiber: int) -> TowerShape:
        syms = tuple(self.symbol(fiber - f) for f in range(self.l_max + 1))
        alive = []
        masses = []
        for f, sid in enumerate(syms):
            spec = self.model.symbols[sid]
            idx = spec.atoms_with_return_above(f)
            alive.append(idx)
            masses.append(math.fsum(spec.atoms[int(k)].length for k in idx))
        masses = np.array(masses)
        total = math.fsum(masses)
        weighted = math.fsum(
            math.exp(self.eps0 * f) * m for f, m in enumerate(masses)
        )
        if self.weight_budget is not None and weighted > self.weight_budget:
            raise WeightTooLarge(
                f"weighted tower mass {weighted:.6g} exceeds budget "
                f"{self.weight_budget:.6g} at fiber {fiber}"
            )
        residue = math.fsum(
            self.model.symbols[self.symbol(fiber - f)].tail(f + 1)
            for f in range(self.l_max + 1, self.model.max_return)
        )
        return TowerShape(
            fiber=fiber,
            l_max=self.l_max,
            floor_symbols=syms,
            floor_alive=tuple(alive),
            floor_masses=masses,
            total_mass=total,
            weighted_mass=weighted,
            residue=residue,
        )

    # ------------------------------------------------------------- dynamics
    def locate(self, fiber: int, point: TowerPoint):
        """Atom containing a tower point; returns ``(symbol_id, atom_index)``."""
        if not 0 <= point.floor <= self.l_max:
            raise ValueError(f"floor {point.floor} outside tower")
        if not 0.0 <= point.x < 1.0:
            raise ValueError(f"coordinate {point.x} outside [0, 1)")
        sid = self.floor_symbol(fiber, point.floor)
        spec = self.model.symbols[sid]
        k = int(np.searchsorted(spec.lefts, point.x, side="right")) - 1
        if spec.atoms[k].return_time <= point.floor:
            raise ValueError(
                f"point {point} is above the roof of atom {k} "
                f"(return time {spec.atoms[k].return_time})"
            )
        return sid, k

    def apply_F(self, fiber: int, point: TowerPoint):
        """One step of the tower map.

        Returns ``(image_point, jacobian)`` where the image lives in the
        tower at ``fiber + 1``.  The jacobian is 1 on climbs and the
        reciprocal branch length on returns.
        """
        sid, k = self.locate(fiber, point)
        atom = self.model.symbols[sid].atoms[k]
        if atom.return_time > point.floor + 1:
            if point.floor + 1 > self.l_max:
                raise TruncationEscape(
                    f"orbit climbed past truncation height {self.l_max} "
                    f"at fiber {fiber}"
                )
            return TowerPoint(point.floor + 1, point.x), 1.0
        x_new = (point.x - atom.left) / atom.length
        # clip strictly inside [0,1) against rounding at the right edge
        x_new = min(max(x_new, 0.0), np.nextafter(1.0, 0.0))
        return TowerPoint(0, x_new), 1.0 / atom.length

    def separation_time(self, fiber: int, p: TowerPoint, q: TowerPoint,
                        horizon: int = 64) -> int:
        """First depth at which ``p`` and ``q`` lie in different cylinders.

        Returns ``horizon + 1`` when the two orbits stay together for the
        whole horizon (a conservative lower bound, not an exact value).
        """
        a, b = p, q
        for i in range(horizon):
            ka = self.locate(fiber + i, a)
            kb = self.locate(fiber + i, b)
            if a.floor != b.floor or ka != kb:
                return i + 1
            a, _ = self.apply_F(fiber + i, a)
            b, _ = self.apply_F(fiber + i, b)
        return horizon + 1

    def metric(self, separation: int) -> float:
        return self.beta**separation

    # ------------------------------------------------------------ cylinders
    def _walk(self, fiber, depth, *, step_value=None, cap=10_000_000,
              emit_itin_depth=0, want_footprint=False):
        """Depth-first cylinder walk.

        Yields per-leaf tuples appended into parallel lists; see
        :meth:`index` and :meth:`leaves` for the public faces.
        """
        if not 0 <= emit_itin_depth <= depth:
            raise ValueError("emit_itin_depth must lie in [0, depth]")
        model = self.model
        out_codes = [] if emit_itin_depth > 0 else None
        out_mass = []
        out_sum = [] if step_value is not None else None
        out_foot = [] if want_footprint else None
        count = 0

        tw = self.tower(fiber)
        # stack entries: (time, floor, atom, lo, hi, mass, ssum, J, off, itin)
        stack = []
        for f in range(self.l_max, -1, -1):
            sid = tw.floor_symbols[f]
            spec = model.symbols[sid]
            for k in tw.floor_alive[f][::-1]:
                k = int(k)
                atom = spec.atoms[k]
                val = (
                    step_value(fiber, f, sid, k) if step_value is not None else 0.0
                )
                code = f * _CODE_BASE + k
                stack.append(
                    (
                        0, f, k, atom.left, atom.left + atom.length,
                        atom.length, val, 1.0, 0.0,
                        (code,) if emit_itin_depth > 0 else None,
                    )
                )
        while stack:
            (i, f, k, lo, hi, mass, ssum, jac, off, itin) = stack.pop()
            if i == depth - 1:
                count += 1
                if count > cap:
                    raise CombinatorialBlowup(
                        f"cylinder count exceeded cap {cap} at depth {depth}"
                    )
                out_mass.append(mass)
                if out_sum is not None:
                    out_sum.append(ssum)
                if out_codes is not None:
                    out_codes.append(itin)
                if out_foot is not None:
                    # pull the current footprint back to time-0 coordinates
                    out_foot.append(((lo - off) / jac, (hi - off) / jac))
                continue
            sid = self.floor_symbol(fiber + i, f)
            atom = model.symbols[sid].atoms[k]
            j_next = fiber + i + 1
            grow = itin is not None and len(itin) < emit_itin_depth
            if atom.return_time > f + 1:
                if f + 1 > self.l_max:
                    raise TruncationEscape(
                        f"cylinder walk escaped above floor {self.l_max}"
                    )
                nxt = itin + ((f + 1) * _CODE_BASE + k,) if grow else itin
                if step_value is not None:
                    ssum = ssum + step_value(j_next, f + 1, sid, k)
                stack.append((i + 1, f + 1, k, lo, hi, mass, ssum, jac, off, nxt))
            else:
                alpha = (lo - atom.left) / atom.length
                beta_ = (hi - atom.left) / atom.length
                span = beta_ - alpha
                jac2 = jac / atom.length
                off2 = (off - atom.left) / atom.length
                sid2 = self.symbol(j_next)
                spec2 = self.model.symbols[sid2]
                for b in range(len(spec2.atoms) - 1, -1, -1):
                    batom = spec2.atoms[b]
                    ilo = max(alpha, batom.left)
                    ihi = min(beta_, batom.left + batom.length)
                    if ihi <= ilo:
                        continue
                    val = (
                        step_value(j_next, 0, sid2, b)
                        if step_value is not None
                        else 0.0
                    )
                    nxt = itin + (b,) if grow else itin
                    stack.append(
                        (
                            i + 1, 0, b, ilo, ihi,
                            mass * (ihi - ilo) / span, ssum + val,
                            jac2, off2, nxt,
                        )
                    )
        return out_codes, out_mass, out_sum, out_foot

    def index(self, fiber: int, depth: int) -> CylinderIndex:
        """Cached canonical cylinder index of one fiber at small depth."""
        key = (fiber, depth)
        if key not in self._indexes:
            codes, mass, _, foot = self._walk(
                fiber, depth, emit_itin_depth=depth, want_footprint=True
            )
            codes = np.array(codes, dtype=np.int64).reshape(len(mass), depth)
            mass = np.array(mass)
            floor0 = codes[:, 0] // _CODE_BASE
            mass_mt = mass * np.exp(self.eps0 * floor0)
            lo0 = np.array([f[0] for f in foot])
            hi0 = np.array([f[1] for f in foot])
            self._indexes[key] = CylinderIndex(
                fiber, depth, codes, mass, mass_mt, lo0, hi0
            )
        return self._indexes[key]

    def leaves(self, fiber: int, depth: int, step_value=None, *,
               prefix_depth: int = 1, cap: int = 10_000_000):
        """Flat arrays over all depth-``depth`` cylinders of one fiber.

        Returns ``(prefix_pos, mass_m, mass_mt, birkhoff)`` where
        ``prefix_pos`` locates each cylinder's depth-``prefix_depth``
        prefix in :meth:`index` of the same fiber (used to attach density
        values), masses are reference and weighted masses, and
        ``birkhoff`` accumulates ``step_value`` along the first ``depth``
        positions (``None`` when no observable is given).
        """
        codes, mass, ssum, _ = self._walk(
            fiber, depth, step_value=step_value,
            emit_itin_depth=prefix_depth, cap=cap,
        )
        base = self.index(fiber, prefix_depth)
        prefix_pos = np.array([base.pos[tuple(c)] for c in codes], dtype=np.int64)
        mass = np.array(mass)
        floors = base.floor0[prefix_pos]
        mass_mt = mass * np.exp(self.eps0 * floors)
        birkhoff = np.array(ssum) if ssum is not None else None
        return prefix_pos, mass, mass_mt, birkhoff

    def enumerate_cylinders(self, fiber: int, depth: int, step_value=None,
                            density=None, cap: int = 10_000_000):
        """Cylinder records with masses, words and optional Birkhoff sums.

        ``density`` may be ``(values, density_depth)`` pairing a weighted
        density resolved at ``density_depth`` with its index; cylinder
        masses under the equivariant measure are then reported too.
        """
        codes, mass, ssum, _ = self._walk(
            fiber, depth, step_value=step_value, emit_itin_depth=depth, cap=cap
        )
        mu_vals = None
        if density is not None:
            values, d_depth = density
            base = self.index(fiber, d_depth)
            pos = np.array(
                [base.pos[tuple(c[:d_depth])] for c in codes], dtype=np.int64
            )
            floors = np.array([c[0] // _CODE_BASE for c in codes])
            mu_vals = np.real(np.asarray(values))[pos] * (
                np.array(mass) * np.exp(self.eps0 * floors)
            )
        records = []
        for r, code_row in enumerate(codes):
            floor0 = code_row[0] // _CODE_BASE
            atom0 = code_row[0] % _CODE_BASE
            word = tuple(
                int(c % _CODE_BASE) for c in code_row[1:] if c // _CODE_BASE == 0
            )
            records.append(
                Cylinder(
                    depth=depth,
                    start_floor=int(floor0),
                    start_atom=int(atom0),
                    word=word,
                    mass_m=float(mass[r]),
                    mass_weighted=float(mass[r] * math.exp(self.eps0 * floor0)),
                    birkhoff_sum=float(ssum[r]) if ssum is not None else None,
                    mass_mu=float(mu_vals[r]) if mu_vals is not None else None,
                )
            )
        return records

    # ------------------------------------------------------------ partitions
    def cover_partition(self, fiber: int, density, eps: float, s: int
                        ) -> CoverPartition:
        """Greedy cover of one fiber by heavy depth-``s`` cylinders.

        ``density`` is ``(values, density_depth)`` for the fiber's
        equivariant density relative to the weighted measure.  Cells are
        selected heaviest-first (weighted mass) until the unselected
        weighted mass drops below ``eps``; the complement must keep
        positive mass.
        """
        if eps <= 0:
            raise AscovFailure("eps must be positive (the complement cell "
                               "keeps mass at least delta > 0)")
        values, d_depth = density
        m_eval = max(s, d_depth)
        idx = self.index(fiber, m_eval)
        sidx = self.index(fiber, s) if s != m_eval else idx
        cell_key = (
            idx.prefix_positions(sidx) if s != m_eval
            else np.arange(idx.n, dtype=np.int64)
        )
        dpos = (
            idx.prefix_positions(self.index(fiber, d_depth))
            if d_depth != m_eval else np.arange(idx.n, dtype=np.int64)
        )
        dens = np.real(np.asarray(values))
        mu = dens[dpos] * idx.mass_mt

        # aggregate evaluation cylinders into their depth-s cells
        n_s = sidx.n
        cell_mt = np.zeros(n_s)
        cell_m = np.zeros(n_s)
        cell_mu = np.zeros(n_s)
        np.add.at(cell_mt, cell_key, idx.mass_mt)
        np.add.at(cell_m, cell_key, idx.mass_m)
        np.add.at(cell_mu, cell_key, mu)

        order = sorted(range(n_s), key=lambda c: (-cell_mt[c], c))
        remaining = math.fsum(cell_mt)
        chosen = []
        ptr = 0
        while remaining >= eps:
            if ptr >= len(order):
                raise AscovFailure(
                    f"eps={eps}: no cylinders left for the complement"
                )
            remaining -= cell_mt[order[ptr]]
            chosen.append(order[ptr])
            ptr += 1
        rest = order[ptr:]
        if not rest:
            raise AscovFailure(
                f"eps={eps} forces an empty complement cell at fiber {fiber}"
            )
        n_cells = len(chosen)
        cell_rank = np.full(n_s, n_cells, dtype=np.int64)
        for r, c in enumerate(chosen):
            cell_rank[c] = r
        cell_of = cell_rank[cell_key]

        mass_m = np.array(
            [cell_m[c] for c in chosen] + [math.fsum(cell_m[c] for c in rest)]
        )
        mass_mt = np.array(
            [cell_mt[c] for c in chosen] + [math.fsum(cell_mt[c] for c in rest)]
        )
        mass_mu = np.array(
            [cell_mu[c] for c in chosen] + [math.fsum(cell_mu[c] for c in rest)]
        )
        delta = float(min(np.minimum(mass_m, mass_mu)))
        return CoverPartition(
            fiber=fiber,
            s=s,
            eval_depth=m_eval,
            n_cells=n_cells,
            cell_of=cell_of,
            cell_mass_m=mass_m,
            cell_mass_mt=mass_mt,
            cell_mass_mu=mass_mu,
            delta=delta,
            eps=float(eps),
        )
