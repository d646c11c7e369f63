"""Molecular data model, conformer ingestion and SELFIES parsing.

Atom and SELFIES positions are 0-based throughout the Python API. The
conformer document is 0-based as well, so no conversion happens on load.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from molgeom.errors import (
    BondIndexError,
    GeometryError,
    GrammarError,
    MismatchError,
    SchemaError,
    UnsupportedTokenError,
)

MIN_ATOM_SEPARATION = 0.1  # Å

# fmt: off
ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co "
    "Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb "
    "Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os "
    "Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md "
    "No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
# fmt: on
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}
SYMBOL = {z: sym for sym, z in ATOMIC_NUMBER.items()}

ORGANIC_SUBSET = frozenset({"B", "C", "N", "O", "S", "P", "F", "Cl", "Br", "I"})

# Bonding capacities used by the SELFIES derivation rules; "?" is the fallback.
BOND_CAPACITY = {
    "H": 1, "F": 1, "Cl": 1, "Br": 1, "I": 1,
    "B": 3, "B+1": 2, "B-1": 4,
    "O": 2, "O+1": 3, "O-1": 1,
    "N": 3, "N+1": 4, "N-1": 2,
    "C": 4, "C+1": 3, "C-1": 3,
    "P": 5, "P+1": 4, "P-1": 6,
    "S": 6, "S+1": 5, "S-1": 5,
    "?": 8,
}  # fmt: skip

# Normal valences for implicit-hydrogen perception of organic-subset atoms.
_NORMAL_VALENCES = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5),
    "S": (2, 4, 6), "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}  # fmt: skip

# Symbols usable as index digits after [Branch1]/[Ring1], in digit order.
INDEX_ALPHABET = (
    "[C]", "[Ring1]", "[Ring2]",
    "[Branch1]", "[=Branch1]", "[#Branch1]",
    "[Branch2]", "[=Branch2]", "[#Branch2]",
    "[O]", "[N]", "[=N]", "[=C]", "[#C]", "[S]", "[P]",
)  # fmt: skip
_INDEX_CODE = {s: i for i, s in enumerate(INDEX_ALPHABET)}

_BOND_CHAR_ORDER = {"": 1, "=": 2, "#": 3, "/": 1, "\\": 1}

_ATOM_RE = re.compile(
    r"^\[([=#/\\]?)(\d*)([A-Z][a-z]?)(@{0,2})((?:H\d)?)((?:[+-][1-9]+)?)\]$"
)
_BRANCH_RE = re.compile(r"^\[([=#]?)Branch([123])\]$")
_RING_RE = re.compile(r"^\[([=#]?)Ring([123])\]$")
_STEREO_RING_RE = re.compile(r"^\[[-/\\][-/\\]Ring[123]\]$")


class BondOrder(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


class Wedge(str, enum.Enum):
    NONE = "none"
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class Atom:
    element: int
    formal_charge: int = 0
    h_count: int = 0
    in_ring: bool = False

    def __post_init__(self):
        if self.element < 1:
            raise SchemaError(f"atomic number must be >= 1, got {self.element}")
        if self.h_count < 0:
            raise SchemaError(f"hydrogen count must be >= 0, got {self.h_count}")

    @property
    def symbol(self) -> str:
        return SYMBOL.get(self.element, "?")


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder = BondOrder.SINGLE
    wedge: Wedge = Wedge.NONE

    def __post_init__(self):
        if self.a == self.b:
            raise SchemaError(f"self-bond on atom {self.a}")

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.a, self.b), max(self.a, self.b))


def _check_bonds(n_atoms: int, bonds: Sequence[Bond]) -> None:
    seen = set()
    for bond in bonds:
        for idx in (bond.a, bond.b):
            if not 0 <= idx < n_atoms:
                raise BondIndexError(
                    f"bond ({bond.a}, {bond.b}) references atom {idx}; "
                    f"document has {n_atoms} atoms"
                )
        if bond.key in seen:
            raise SchemaError(f"duplicate bond between atoms {bond.key}")
        seen.add(bond.key)


@dataclass(frozen=True)
class MoleculeGraph:
    """Heavy-atom graph: atoms plus bonds, no coordinates."""

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]

    def __post_init__(self):
        _check_bonds(len(self.atoms), self.bonds)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def bond_between(self, i: int, k: int) -> Bond | None:
        return _bond_index(self).get((min(i, k), max(i, k)))

    def neighbors(self, i: int) -> list[int]:
        return _adjacency(self)[i]


# Per-graph caches keyed by identity; graphs are immutable.
_BOND_CACHE: dict[int, tuple[object, dict]] = {}
_ADJ_CACHE: dict[int, tuple[object, list]] = {}


def _bond_index(g) -> dict[tuple[int, int], Bond]:
    hit = _BOND_CACHE.get(id(g))
    if hit is not None and hit[0] is g:
        return hit[1]
    table = {b.key: b for b in g.bonds}
    if len(_BOND_CACHE) > 256:
        _BOND_CACHE.clear()
    _BOND_CACHE[id(g)] = (g, table)
    return table


def _adjacency(g) -> list[list[int]]:
    hit = _ADJ_CACHE.get(id(g))
    if hit is not None and hit[0] is g:
        return hit[1]
    adj: list[list[int]] = [[] for _ in g.atoms]
    for b in g.bonds:
        adj[b.a].append(b.b)
        adj[b.b].append(b.a)
    for row in adj:
        row.sort()
    if len(_ADJ_CACHE) > 256:
        _ADJ_CACHE.clear()
    _ADJ_CACHE[id(g)] = (g, adj)
    return adj


@dataclass(frozen=True, eq=False)
class Conformer(MoleculeGraph):
    """Heavy atoms, bonds and one set of 3D coordinates in Å."""

    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    selfies: str | None = None

    def __post_init__(self):
        super().__post_init__()
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 3)
        if coords.shape[0] != len(self.atoms):
            raise SchemaError(
                f"{coords.shape[0]} coordinate rows for {len(self.atoms)} atoms"
            )
        if not np.all(np.isfinite(coords)):
            raise GeometryError("non-finite coordinate")
        if len(coords) > 1:
            diff = coords[:, None, :] - coords[None, :, :]
            dist = np.sqrt((diff**2).sum(-1))
            np.fill_diagonal(dist, np.inf)
            i, k = np.unravel_index(np.argmin(dist), dist.shape)
            if dist[i, k] < MIN_ATOM_SEPARATION:
                raise GeometryError(
                    f"atoms {min(i, k)} and {max(i, k)} are {dist[i, k]:.4f} Å apart"
                )
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)

    def __eq__(self, other):
        if not isinstance(other, Conformer):
            return NotImplemented
        return (
            self.atoms == other.atoms
            and self.bonds == other.bonds
            and self.selfies == other.selfies
            and np.array_equal(self.coords, other.coords)
        )

    __hash__ = None

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> Conformer:
        """Copy with coordinates mapped by ``x -> R x + t``."""
        coords = self.coords @ np.asarray(rotation, dtype=np.float64).T
        coords = coords + np.asarray(translation, dtype=np.float64)
        return Conformer(self.atoms, self.bonds, coords, self.selfies)

    def permuted(self, order: Sequence[int]) -> Conformer:
        """Copy whose atom ``n`` is this conformer's atom ``order[n]``."""
        inverse = {old: new for new, old in enumerate(order)}
        bonds = tuple(
            Bond(inverse[b.a], inverse[b.b], b.order, b.wedge) for b in self.bonds
        )
        atoms = tuple(self.atoms[o] for o in order)
        return Conformer(atoms, bonds, self.coords[list(order)], self.selfies)


# --------------------------------------------------------------------------
# Conformer documents


def _require(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    # bool is an int subclass; keep them apart
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise SchemaError(f"{where}.{key}: expected integer, got {value!r}")
    if kind is bool and not isinstance(value, bool):
        raise SchemaError(f"{where}.{key}: expected boolean, got {value!r}")
    if kind is list and not isinstance(value, list):
        raise SchemaError(f"{where}.{key}: expected array")
    return value


def _parse_order(raw, where: str) -> BondOrder:
    if raw == "ar":
        return BondOrder.AROMATIC
    if isinstance(raw, int) and not isinstance(raw, bool) and raw in (1, 2, 3):
        return BondOrder(raw)
    raise SchemaError(f"{where}.order: expected 1, 2, 3 or 'ar', got {raw!r}")


def conformer_from_dict(doc: dict) -> Conformer:
    if not isinstance(doc, dict):
        raise SchemaError("conformer document must be a JSON object")
    atoms = []
    for n, a in enumerate(_require(doc, "atoms", list, "document")):
        where = f"atoms[{n}]"
        atoms.append(
            Atom(
                element=_require(a, "z", int, where),
                formal_charge=_require(a, "charge", int, where),
                h_count=_require(a, "h", int, where),
                in_ring=_require(a, "ring", bool, where),
            )
        )
    bonds = []
    for n, b in enumerate(_require(doc, "bonds", list, "document")):
        where = f"bonds[{n}]"
        wedge = b.get("wedge", "none") if isinstance(b, dict) else None
        try:
            wedge = Wedge(wedge)
        except ValueError:
            raise SchemaError(f"{where}.wedge: unknown value {wedge!r}") from None
        a_idx = _require(b, "a", int, where)
        b_idx = _require(b, "b", int, where)
        if a_idx == b_idx:
            raise SchemaError(f"{where}: self-bond on atom {a_idx}")
        bonds.append(
            Bond(a_idx, b_idx, _parse_order(_require(b, "order", object, where), where), wedge)
        )
    rows = _require(doc, "coords", list, "document")
    for n, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != 3:
            raise SchemaError(f"coords[{n}]: expected [x, y, z]")
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SchemaError(f"coords[{n}]: non-numeric value {v!r}")
    selfies = doc.get("selfies")
    if selfies is not None and not isinstance(selfies, str):
        raise SchemaError("selfies: expected string")
    _check_bonds(len(atoms), bonds)
    coords = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return Conformer(tuple(atoms), tuple(bonds), coords, selfies)


def parse_conformer(doc: bytes | str) -> Conformer:
    """Parse and validate a UTF-8 JSON conformer document."""
    if isinstance(doc, bytes):
        try:
            doc = doc.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError(f"document is not UTF-8: {exc}") from None
    try:
        # JSON has no NaN/Infinity; the parser accepts them, geometry rejects them
        data = json.loads(doc)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc}") from None
    return conformer_from_dict(data)


def conformer_to_dict(c: Conformer) -> dict:
    doc = {
        "atoms": [
            {"z": a.element, "charge": a.formal_charge, "h": a.h_count, "ring": a.in_ring}
            for a in c.atoms
        ],
        "bonds": [
            {
                "a": b.a,
                "b": b.b,
                "order": "ar" if b.order == BondOrder.AROMATIC else int(b.order),
                "wedge": b.wedge.value,
            }
            for b in c.bonds
        ],
        "coords": [[float(v) for v in row] for row in c.coords],
    }
    if c.selfies is not None:
        doc["selfies"] = c.selfies
    return doc


# --------------------------------------------------------------------------
# SELFIES


@dataclass(frozen=True)
class StructuralTokens:
    """SELFIES tokens plus the positions that introduce heavy atoms.

    ``phi[i]`` is the token position of heavy atom ``i``; ``atom_positions``
    is the same set in increasing order.
    """

    tokens: tuple[str, ...]
    atom_positions: tuple[int, ...]

    @property
    def phi(self) -> tuple[int, ...]:
        return self.atom_positions

    @property
    def length(self) -> int:
        return len(self.tokens)

    def is_atom_position(self, t: int) -> bool:
        return t in set(self.atom_positions)

    def to_string(self) -> str:
        return "".join(self.tokens)


def split_selfies(s: str) -> list[str]:
    """Split a SELFIES string into bracketed symbols.

    >>> split_selfies("[C][=C][F]")
    ['[C]', '[=C]', '[F]']
    """
    tokens = []
    pos = 0
    while pos < len(s):
        ch = s[pos]
        if ch == ".":
            raise UnsupportedTokenError("multi-fragment SELFIES ('.') is not supported")
        if ch != "[":
            raise GrammarError(f"unexpected character {ch!r} at offset {pos}")
        end = s.find("]", pos + 1)
        if end == -1:
            raise GrammarError(f"unbalanced '[' at offset {pos}")
        token = s[pos : end + 1]
        if "[" in token[1:]:
            raise GrammarError(f"nested '[' in {token!r}")
        tokens.append(token)
        pos = end + 1
    return tokens


@dataclass(frozen=True)
class _AtomSymbol:
    bond_order: int
    element: str
    chirality: str
    h_count: int | None  # None for organic-subset atoms (implicit H)
    charge: int

    @property
    def capacity(self) -> int:
        key = self.element if self.charge == 0 else f"{self.element}{self.charge:+d}"
        cap = BOND_CAPACITY.get(key, BOND_CAPACITY["?"])
        return cap - (self.h_count or 0)


def _classify(token: str):
    """Return ("atom", _AtomSymbol) | ("branch", order, n) | ("ring", order, n).

    Raises GrammarError for unparsable symbols. Valid-but-unsupported symbols
    come back as ("unsupported", reason) so index operands can still use them.
    """
    m = _BRANCH_RE.match(token)
    if m:
        order = _BOND_CHAR_ORDER[m.group(1)]
        return ("branch", order, int(m.group(2)))
    m = _RING_RE.match(token)
    if m:
        order = _BOND_CHAR_ORDER[m.group(1)]
        return ("ring", order, int(m.group(2)))
    if _STEREO_RING_RE.match(token):
        return ("unsupported", "stereo ring bonds")
    if token in ("[nop]", "[epsilon]"):
        return ("unsupported", "control symbol")
    m = _ATOM_RE.match(token)
    if not m:
        raise GrammarError(f"unknown SELFIES symbol {token!r}")
    bond_char, isotope, element, chirality, h, charge = m.groups()
    if element not in ATOMIC_NUMBER:
        raise GrammarError(f"unknown element in {token!r}")
    if element == "H":
        return ("unsupported", "explicit hydrogen atoms")
    if isotope:
        return ("unsupported", "isotope labels")
    if token[1 + len(bond_char) : -1] in ORGANIC_SUBSET:
        return ("atom", _AtomSymbol(_BOND_CHAR_ORDER[bond_char], element, "", None, 0))
    h_count = int(h[1:]) if h else 0
    q = 0
    if charge:
        q = int(charge[1:]) * (1 if charge[0] == "+" else -1)
    sym = _AtomSymbol(_BOND_CHAR_ORDER[bond_char], element, chirality, h_count, q)
    if sym.capacity < 0:
        raise GrammarError(f"too many hydrogens in {token!r}")
    return ("atom", sym)


class _Builder:
    def __init__(self):
        self.symbols: list[_AtomSymbol] = []
        self.positions: list[int] = []
        self.bonds: dict[tuple[int, int], int] = {}
        self.rings: list[tuple[int, int, int]] = []

    def add_atom(self, sym: _AtomSymbol, pos: int) -> int:
        self.symbols.append(sym)
        self.positions.append(pos)
        return len(self.symbols) - 1

    def bond_count(self, i: int) -> int:
        return sum(o for key, o in self.bonds.items() if i in key)


def _read_index(it: Iterator[tuple[int, str]], n: int) -> int:
    digits = []
    for _ in range(n):
        try:
            digits.append(next(it)[1])
        except StopIteration:
            digits.append(None)
    base = len(INDEX_ALPHABET)
    value = 0
    for d in digits:
        value = value * base + _INDEX_CODE.get(d, 0)
    return value


def _derive(it, kinds, b: _Builder, max_derive: float, state: int, prev: int | None) -> int:
    """Consume symbols from ``it`` following SELFIES derivation rules.

    Returns the number of symbols consumed (including index operands).
    """
    n_derived = 0
    while state is not None and n_derived < max_derive:
        try:
            pos, token = next(it)
        except StopIteration:
            break
        n_derived += 1
        kind = kinds[pos]
        if kind[0] == "unsupported":
            raise UnsupportedTokenError(f"{token!r} at position {pos}: {kind[1]}")

        if kind[0] == "branch":
            _, order, n = kind
            if n != 1:
                raise UnsupportedTokenError(f"{token!r}: only one-symbol branch lengths")
            if state <= 1:
                next_state = state
            else:
                branch_state = min(state - 1, order)
                next_state = state - branch_state
                q = _read_index(it, n)
                n_derived += n + _derive(it, kinds, b, q + 1, branch_state, prev)

        elif kind[0] == "ring":
            _, order, n = kind
            if n != 1:
                raise UnsupportedTokenError(f"{token!r}: only one-symbol ring lengths")
            if state == 0:
                next_state = state
            else:
                ring_order = min(order, state)
                left = state - ring_order
                next_state = left if left else None
                q = _read_index(it, n)
                n_derived += n
                b.rings.append((max(0, prev - (q + 1)), prev, ring_order))

        else:
            sym = kind[1]
            cap = sym.capacity
            order = 0 if state == 0 else sym.bond_order
            order = min(order, state, cap)
            left = cap - order
            next_state = left if left else None
            if order == 0:
                if state == 0:
                    prev = b.add_atom(sym, pos)
                else:
                    # zero-capacity atom cannot attach; derivation ends here
                    prev = None
            else:
                idx = b.add_atom(sym, pos)
                b.bonds[(min(prev, idx), max(prev, idx))] = order
                prev = idx

        if next_state is None:
            break
        state = next_state

    while n_derived < max_derive:
        try:
            next(it)
        except StopIteration:
            break
        n_derived += 1
    return n_derived


def _close_rings(b: _Builder) -> None:
    for left, right, order in b.rings:
        if left == right:
            continue
        lfree = b.symbols[left].capacity - b.bond_count(left)
        rfree = b.symbols[right].capacity - b.bond_count(right)
        if lfree <= 0 or rfree <= 0:
            continue
        order = min(order, lfree, rfree)
        key = (left, right)
        if key in b.bonds:
            b.bonds[key] = min(b.bonds[key] + order, 3)
        else:
            b.bonds[key] = order


def _ring_atoms(n: int, bonds: dict[tuple[int, int], int]) -> set[int]:
    adj = [set() for _ in range(n)]
    for a, c in bonds:
        adj[a].add(c)
        adj[c].add(a)
    in_ring = set()
    for a, c in bonds:
        # edge lies on a cycle iff c is reachable from a without it
        seen, stack = {a}, [a]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if (u, v) in ((a, c), (c, a)) or v in seen:
                    continue
                seen.add(v)
                stack.append(v)
        if c in seen:
            in_ring.update((a, c))
    return in_ring


def _implicit_h(sym: _AtomSymbol, bond_sum: int) -> int:
    if sym.h_count is not None:
        return sym.h_count
    for valence in _NORMAL_VALENCES.get(sym.element, ()):
        if valence >= bond_sum:
            return valence - bond_sum
    return 0


def parse_selfies(s: str) -> tuple[StructuralTokens, MoleculeGraph]:
    """Tokenize a SELFIES string and derive its heavy-atom graph.

    Supports atomic symbols (organic subset and bracketed element/charge/H/
    chirality forms), ``[Ring1]`` and ``[Branch1]`` with their ``=``/``#``
    variants. Anything else raises :class:`UnsupportedTokenError`.

    The returned tokens record which positions introduce a heavy atom; index
    operands of branch and ring symbols never do.
    """
    tokens = split_selfies(s)
    if not tokens:
        raise GrammarError("empty SELFIES string")
    kinds = [_classify(t) for t in tokens]
    b = _Builder()
    _derive(iter(enumerate(tokens)), kinds, b, math.inf, 0, None)
    _close_rings(b)

    ring = _ring_atoms(len(b.symbols), b.bonds)
    atoms = []
    for i, sym in enumerate(b.symbols):
        atoms.append(
            Atom(
                element=ATOMIC_NUMBER[sym.element],
                formal_charge=sym.charge,
                h_count=_implicit_h(sym, b.bond_count(i)),
                in_ring=i in ring,
            )
        )
    bonds = tuple(Bond(a, c, BondOrder(o)) for (a, c), o in sorted(b.bonds.items()))
    st = StructuralTokens(tuple(tokens), tuple(b.positions))
    return st, MoleculeGraph(tuple(atoms), bonds)


def align_phi(st: StructuralTokens, c: MoleculeGraph, graph: MoleculeGraph | None = None):
    """Check that tokens and conformer describe the same heavy atoms.

    Returns ``phi`` as a tuple: ``phi[i]`` is the token position of atom ``i``.
    """
    if graph is None:
        _, graph = parse_selfies(st.to_string())
    if graph.n_atoms != len(st.atom_positions):
        raise MismatchError("token atom positions disagree with the derived graph")
    if graph.n_atoms != c.n_atoms:
        raise MismatchError(
            f"SELFIES introduces {graph.n_atoms} heavy atoms, conformer has {c.n_atoms}"
        )
    for i, (ga, ca) in enumerate(zip(graph.atoms, c.atoms)):
        if ga.element != ca.element:
            raise MismatchError(
                f"atom {i}: SELFIES has {ga.symbol}, conformer has {ca.symbol}"
            )
    return st.phi
