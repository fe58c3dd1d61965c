"""Driving system for i.i.d. random tower families.

A *model* is a finite list of symbols; each symbol partitions the unit
interval into finitely many atoms, and each atom carries an affine full
branch onto ``[0, 1)`` together with an integer return time.  The driving
system draws one symbol per integer index from a fixed probability vector,
independently across indices, using a counter-based generator so that the
two-sided symbol sequence is deterministic in ``(seed, index)`` and supports
O(1) random access at negative indices.

Family validation certifies the standing assumptions used downstream:

* a gcd-1 set of return times present with positive mass in every symbol
  (aperiodicity),
* an exponential envelope ``tail(n) <= c1 * exp(-c2 * n)`` for the
  return-time tails of every symbol,
* uniform lower randomness: for each requested ``eps`` a bounded number of
  heavy atoms covering the fiber up to ``eps`` of weighted mass, with a
  non-trivial complement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .errors import AscovFailure, NoCommonReturnTimes, TailViolation

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# tolerance for "atoms partition [0,1)" checks
_PARTITION_TOL = 1e-12


class Atom(NamedTuple):
    """One affine full branch: ``[left, left+length)`` maps onto ``[0,1)``."""

    left: float
    length: float
    return_time: int


@dataclass(frozen=True)
class SymbolSpec:
    """One symbol of the driving alphabet.

    Parameters
    ----------
    symbol_id : int
        Position of the symbol in the model's alphabet.
    atoms : tuple of Atom
        Atoms listed left to right; they must partition ``[0, 1)``.
    label : str
        Display name used in model files and reports.
    """

    symbol_id: int
    atoms: tuple[Atom, ...]
    label: str = ""

    def __post_init__(self):
        if not self.atoms:
            raise ValueError(f"symbol {self.label or self.symbol_id}: no atoms")
        cursor = 0.0
        for k, atom in enumerate(self.atoms):
            if atom.length <= 0:
                raise ValueError(f"atom {k}: non-positive length {atom.length}")
            if abs(atom.left - cursor) > _PARTITION_TOL:
                raise ValueError(
                    f"atom {k}: left endpoint {atom.left} leaves a gap at {cursor}"
                )
            if atom.return_time < 1 or atom.return_time != int(atom.return_time):
                raise ValueError(f"atom {k}: return time must be a positive integer")
            cursor = atom.left + atom.length
        if abs(cursor - 1.0) > _PARTITION_TOL:
            raise ValueError(f"atom lengths sum to {cursor}, expected 1")

    @cached_property
    def lefts(self) -> np.ndarray:
        return np.array([a.left for a in self.atoms])

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([a.length for a in self.atoms])

    @cached_property
    def return_times(self) -> np.ndarray:
        return np.array([a.return_time for a in self.atoms], dtype=np.int64)

    @cached_property
    def max_return(self) -> int:
        return int(self.return_times.max())

    def tail(self, n: int) -> float:
        """Mass of ``{return_time >= n}`` under Lebesgue on the base."""
        if n <= 1:
            return 1.0
        return float(math.fsum(a.length for a in self.atoms if a.return_time >= n))

    def atoms_with_return_above(self, floor: int) -> np.ndarray:
        """Indices of atoms that survive to tower floor ``floor``."""
        return np.nonzero(self.return_times > floor)[0]


@dataclass(frozen=True)
class Model:
    """A symbol alphabet together with the i.i.d. symbol probabilities."""

    symbols: tuple[SymbolSpec, ...]
    probs: tuple[float, ...]
    name: str = "model"

    def __post_init__(self):
        if len(self.symbols) != len(self.probs):
            raise ValueError("probs length does not match number of symbols")
        if any(p < 0 for p in self.probs):
            raise ValueError("negative symbol probability")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"symbol probabilities sum to {total}, expected 1")
        for k, sym in enumerate(self.symbols):
            if sym.symbol_id != k:
                raise ValueError(f"symbol {k} carries id {sym.symbol_id}")

    @cached_property
    def cum_probs(self) -> np.ndarray:
        c = np.cumsum(np.asarray(self.probs, dtype=float))
        c[-1] = 1.0  # guard against rounding at the top
        return c

    @cached_property
    def max_return(self) -> int:
        return max(s.max_return for s in self.symbols)

    @cached_property
    def min_atom_length(self) -> float:
        return min(float(a.length) for s in self.symbols for a in s.atoms)

    def label_of(self, symbol_id: int) -> str:
        sym = self.symbols[symbol_id]
        return sym.label or str(symbol_id)


@dataclass(frozen=True)
class Environment:
    """A seeded two-sided symbol sequence over a model.

    ``index_offset`` implements the shift: the symbol seen by this
    environment at index ``j`` is the symbol of the unshifted sequence at
    ``j + index_offset``.
    """

    model: Model
    seed: int
    index_offset: int = 0


def _mix64(z: int) -> int:
    """splitmix64 finalizer; a bijective avalanche on 64-bit words."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _uniform01(seed: int, counter: int) -> float:
    """Deterministic uniform draw keyed by (seed, counter); O(1) access."""
    x = _mix64((_mix64(seed) + (counter & _MASK64) * _GOLDEN) & _MASK64)
    return x / 2.0**64


def symbol_at(env: Environment, index: int) -> int:
    """Symbol id driving fiber ``index`` of the environment.

    Deterministic in ``(seed, index + index_offset)``; identical across
    calls, processes, and platforms.
    """
    u = _uniform01(env.seed, index + env.index_offset)
    return int(np.searchsorted(env.model.cum_probs, u, side="right"))


def shift(env: Environment, k: int) -> Environment:
    """Advance the environment by ``k`` steps of the driving shift."""
    return replace(env, index_offset=env.index_offset + k)


# --------------------------------------------------------------------------
# family validation


class AscovCertificate(NamedTuple):
    """Atom-selection certificate for one coarseness level ``eps``."""

    eps: float
    max_atoms: int  # J: most atoms any checked fiber needed
    delta: float  # uniform lower bound on selected masses and complement
    fibers_checked: int


@dataclass(frozen=True)
class FamilyReport:
    """Output of :func:`validate_family`."""

    aperiodicity_witness: tuple[int, ...]
    tail_c1: float
    tail_c2: float
    eps0_default: float  # weight exponent actually safe to use (c2 / 2)
    weight_sum_bound: float  # worst-case weighted tower mass at eps0_default
    ascov: tuple[AscovCertificate, ...]
    per_symbol_tails: tuple[tuple[float, ...], ...]


def _fit_tail_envelope(model: Model, c1_cap: float) -> tuple[float, float]:
    """Canonical (c1, c2) with ``tail(n) <= c1 exp(-c2 n)`` for all symbols.

    Uses the steepest chord anchored at ``tail(1) = 1``; falls back to the
    uniform envelope ``c1 = c1_cap`` when the anchored fit degenerates
    (e.g. the tail plateaus at 1 before dropping).
    """
    r_max = model.max_return
    anchored = math.inf
    for sym in model.symbols:
        for n in range(2, r_max + 1):
            t = sym.tail(n)
            if t > 0:
                anchored = min(anchored, -math.log(t) / (n - 1))
    candidates = []
    if math.isfinite(anchored) and anchored > 0:
        c1 = max(
            sym.tail(n) * math.exp(anchored * n)
            for sym in model.symbols
            for n in range(1, r_max + 1)
        )
        if c1 <= c1_cap:
            candidates.append((anchored, c1))
    # uniform fallback: tail(n) <= 1 <= c1_cap * exp(-c2 n) for n <= r_max
    c2_alt = math.log(c1_cap) / (r_max + 1)
    if c2_alt > 0:
        candidates.append((c2_alt, c1_cap))
    if not candidates:
        raise TailViolation(
            f"no exponential envelope with c1 <= {c1_cap} fits the return tails"
        )
    c2, c1 = max(candidates)
    if c2 <= 1e-9:
        raise TailViolation("fitted tail decay rate is numerically zero")
    return c1, c2


def _fiber_atoms(model: Model, floor_symbols: Sequence[int], eps0: float):
    """All tower atoms of a fiber given its per-floor symbols.

    Returns a list of ``(floor, atom_index, mass_m, mass_weighted)`` over
    floors ``0 .. len(floor_symbols)-1``; floor ``f`` keeps the atoms of
    ``floor_symbols[f]`` whose return time exceeds ``f``.
    """
    out = []
    for f, sid in enumerate(floor_symbols):
        sym = model.symbols[sid]
        for k in sym.atoms_with_return_above(f):
            mass = float(sym.atoms[int(k)].length)
            out.append((f, int(k), mass, mass * math.exp(eps0 * f)))
    return out


def _select_cover(entries, eps: float):
    """Greedy heaviest-first selection until the unselected weighted mass
    drops below ``eps``; the complement must stay non-empty.

    Returns ``(n_selected, delta)`` or raises :class:`AscovFailure`.
    """
    order = sorted(entries, key=lambda e: (-e[3], e[0], e[1]))
    remaining = math.fsum(e[3] for e in order)
    selected = []
    pos = 0
    while remaining >= eps:
        if pos >= len(order):
            raise AscovFailure(
                f"cannot reach unselected mass < {eps}: atoms exhausted"
            )
        remaining -= order[pos][3]
        selected.append(order[pos])
        pos += 1
    complement = order[pos:]
    if not complement:
        raise AscovFailure(
            f"eps={eps} forces an empty complement; the uniform "
            "lower-randomness assumption needs a non-trivial remainder"
        )
    comp_mass = math.fsum(e[3] for e in complement)
    floor_small = min((e[3] for e in selected), default=math.inf)
    delta = min(floor_small, comp_mass)
    return len(selected), delta


def validate_family(
    model: Model,
    *,
    eps_grid: Sequence[float] | None = None,
    n_fibers: int = 64,
    probe_seed: int = 0,
    c1_cap: float = 16.0,
) -> FamilyReport:
    """Certify the standing assumptions for a model.

    Parameters
    ----------
    model : Model
        Symbol family with probabilities.
    eps_grid : sequence of float, optional
        Coarseness levels for the atom-selection certificates.  A finite
        truncated tower cannot leave a complement lighter than its
        lightest atom, so when omitted the grid is placed just above that
        model-dependent floor; explicit levels below it fail honestly.
    n_fibers : int
        Number of sampled fibers checked per level, in addition to every
        constant-symbol fiber (the worst cases for a finite alphabet).
    probe_seed : int
        Seed of the probing environment used for the sampled fibers.
    c1_cap : float
        Largest admissible envelope prefactor.

    Raises
    ------
    NoCommonReturnTimes, TailViolation, AscovFailure
    """
    # aperiodicity: return times present in every symbol, gcd 1
    common = set(int(t) for t in model.symbols[0].return_times)
    for sym in model.symbols[1:]:
        common &= set(int(t) for t in sym.return_times)
    witness = tuple(sorted(common))
    if not witness or math.gcd(*witness) != 1:
        raise NoCommonReturnTimes(
            f"return times shared by all symbols ({witness or '{}'}) "
            "do not have gcd 1"
        )

    tail_c1, tail_c2 = _fit_tail_envelope(model, c1_cap)
    eps0 = tail_c2 / 2.0
    r_max = model.max_return
    weight_sum = math.fsum(
        math.exp(eps0 * f) * max(sym.tail(f + 1) for sym in model.symbols)
        for f in range(r_max)
    )

    # fibers to check: every constant fiber plus sampled ones
    probe = Environment(model, probe_seed)
    fibers: list[tuple[int, ...]] = [
        (sid,) * r_max for sid in range(len(model.symbols))
    ]
    for anchor in range(n_fibers):
        fibers.append(
            tuple(symbol_at(probe, anchor - f) for f in range(r_max))
        )

    if eps_grid is None:
        floors_light = []
        totals = []
        for floor_syms in fibers:
            weights = [e[3] for e in _fiber_atoms(model, floor_syms, eps0)]
            floors_light.append(min(weights))
            totals.append(math.fsum(weights))
        eps_floor = max(floors_light)
        total_min = min(totals)
        if eps_floor >= total_min:
            raise AscovFailure(
                "no nontrivial atom selection exists: some fiber consists "
                "of a single atom"
            )
        eps_grid = tuple(
            e for e in (eps_floor * 1.25, eps_floor * 2.0, eps_floor * 4.0)
            if e < total_min
        ) or ((eps_floor + total_min) / 2.0,)

    certificates = []
    for eps in eps_grid:
        if eps <= 0:
            raise AscovFailure("eps must be positive")
        worst_j = 0
        worst_delta = math.inf
        for floor_syms in fibers:
            entries = _fiber_atoms(model, floor_syms, eps0)
            j, delta = _select_cover(entries, eps)
            worst_j = max(worst_j, j)
            worst_delta = min(worst_delta, delta)
        certificates.append(
            AscovCertificate(float(eps), worst_j, worst_delta, len(fibers))
        )

    tails = tuple(
        tuple(sym.tail(n) for n in range(1, r_max + 1)) for sym in model.symbols
    )
    return FamilyReport(
        aperiodicity_witness=witness,
        tail_c1=tail_c1,
        tail_c2=tail_c2,
        eps0_default=eps0,
        weight_sum_bound=weight_sum,
        ascov=tuple(certificates),
        per_symbol_tails=tails,
    )
