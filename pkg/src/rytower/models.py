"""Canonical test models and the model-file format.

A model file is JSON with the keys

* ``symbols``: list of ``{"id": ..., "atoms": [{"left", "length",
  "return_time"}, ...]}``,
* ``probs``: mapping from symbol id to probability,
* ``seed``: default seed for the driving sequence.

Ids may be strings; symbols are indexed internally by their position in the
list and keep the id as a display label.
"""

from __future__ import annotations

import json
from pathlib import Path

from .env import Atom, Environment, Model, SymbolSpec


def gm3_model() -> Model:
    """Two symbols with three and two affine branches, gcd-1 return times.

    Symbol ``A``: atom lengths (1/2, 1/4, 1/4), return times (1, 2, 3).
    Symbol ``B``: atom lengths (1/2, 1/2), return times (1, 2).
    """
    a = SymbolSpec(
        0,
        (
            Atom(0.0, 0.5, 1),
            Atom(0.5, 0.25, 2),
            Atom(0.75, 0.25, 3),
        ),
        label="A",
    )
    b = SymbolSpec(1, (Atom(0.0, 0.5, 1), Atom(0.5, 0.5, 2)), label="B")
    return Model(symbols=(a, b), probs=(0.5, 0.5), name="gm3")


def geo_model(p: float = 0.5, i_max: int = 12) -> Model:
    """Single symbol with geometrically shrinking atoms.

    Atom ``i`` has length ``p^i`` and return time ``i`` for ``i < i_max``;
    the leftover mass beyond ``i_max`` is merged into the last atom, so the
    exact tail is ``m(R >= n) = p^(n-1)`` for ``n <= i_max``.
    """
    if not 0 < p < 1 or i_max < 2:
        raise ValueError("need 0 < p < 1 and i_max >= 2")
    atoms = []
    left = 0.0
    for i in range(1, i_max):
        atoms.append(Atom(left, p**i, i))
        left += p**i
    atoms.append(Atom(left, 1.0 - left, i_max))
    sym = SymbolSpec(0, tuple(atoms), label="G")
    return Model(symbols=(sym,), probs=(1.0,), name=f"geo(p={p},imax={i_max})")


def single_atom_model() -> Model:
    """Degenerate one-branch family: the identity-return tower."""
    sym = SymbolSpec(0, (Atom(0.0, 1.0, 1),), label="I")
    return Model(symbols=(sym,), probs=(1.0,), name="single")


BUILTIN_MODELS = {
    "gm3": gm3_model,
    "geo": geo_model,
    "single": single_atom_model,
}


def model_to_dict(model: Model, seed: int = 0) -> dict:
    return {
        "seed": seed,
        "probs": {model.label_of(k): p for k, p in enumerate(model.probs)},
        "symbols": [
            {
                "id": model.label_of(k),
                "atoms": [
                    {
                        "left": a.left,
                        "length": a.length,
                        "return_time": a.return_time,
                    }
                    for a in sym.atoms
                ],
            }
            for k, sym in enumerate(model.symbols)
        ],
    }


def model_from_dict(payload: dict, name: str = "model") -> tuple[Model, int]:
    """Parse a model-file payload; returns ``(model, seed)``."""
    symbols = []
    labels = []
    for k, entry in enumerate(payload["symbols"]):
        label = str(entry.get("id", k))
        atoms = tuple(
            Atom(float(a["left"]), float(a["length"]), int(a["return_time"]))
            for a in entry["atoms"]
        )
        symbols.append(SymbolSpec(k, atoms, label=label))
        labels.append(label)
    raw_probs = payload["probs"]
    if isinstance(raw_probs, dict):
        probs = tuple(float(raw_probs[lbl]) for lbl in labels)
    else:
        probs = tuple(float(p) for p in raw_probs)
    model = Model(symbols=tuple(symbols), probs=probs, name=name)
    return model, int(payload.get("seed", 0))


def save_model(model: Model, path: str | Path, seed: int = 0) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, seed), indent=2))


def load_model(path: str | Path) -> tuple[Model, int]:
    p = Path(path)
    return model_from_dict(json.loads(p.read_text()), name=p.stem)


def resolve_model(spec: str, seed: int | None = None) -> Environment:
    """Build an environment from a builtin name or a model-file path."""
    if spec in BUILTIN_MODELS:
        model, file_seed = BUILTIN_MODELS[spec](), 0
    else:
        model, file_seed = load_model(spec)
    return Environment(model, seed if seed is not None else file_seed)
