"""Geometric shell fingerprints over a single conformer.

Each heavy atom gets one 32-bit identifier per iteration. Level 0 hashes the
atom's invariants. Level ``j`` hashes the atom's previous identifier together
with every atom inside a sphere of radius ``r * j``. Each neighbor in that
sphere is described by its bond code to the center, its previous identifier
and an octant code taken in a frame built from the shell itself.
Identifiers are folded into a vocabulary by ``id mod vocab_size``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from molgeom.errors import SchemaError
from molgeom.molgraph import Atom, BondOrder, Conformer, MoleculeGraph

MASK32 = 0xFFFFFFFF


def _rotl32(x: int, r: int) -> int:
    return ((x << r) | (x >> (32 - r))) & MASK32


def _fmix32(h: int) -> int:
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & MASK32
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & MASK32
    h ^= h >> 16
    return h


def murmur3_32(data: bytes, seed: int = 0) -> int:
    """MurmurHash3 x86 32-bit digest of ``data``, returned unsigned."""
    c1, c2 = 0xCC9E2D51, 0x1B873593
    length = len(data)
    h = seed & MASK32
    n_blocks = length // 4
    for k in struct.unpack_from(f"<{n_blocks}I", data):
        k = (k * c1) & MASK32
        k = _rotl32(k, 15)
        k = (k * c2) & MASK32
        h ^= k
        h = _rotl32(h, 13)
        h = (h * 5 + 0xE6546B64) & MASK32

    tail = data[n_blocks * 4 :]
    k = 0
    if len(tail) >= 3:
        k ^= tail[2] << 16
    if len(tail) >= 2:
        k ^= tail[1] << 8
    if tail:
        k ^= tail[0]
        k = (k * c1) & MASK32
        k = _rotl32(k, 15)
        k = (k * c2) & MASK32
        h ^= k

    h ^= length
    return _fmix32(h)


@dataclass(frozen=True)
class E3fpConfig:
    k: int = 5
    r: float = 1.718
    vocab_size: int = 4096
    dist_eps: float = 1e-6
    stereo_cos_tol: float = 0.01

    def __post_init__(self):
        if self.k < 0:
            raise SchemaError(f"k must be >= 0, got {self.k}")
        if not self.r > 0:
            raise SchemaError(f"r must be > 0, got {self.r}")
        if self.vocab_size < 2:
            raise SchemaError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not self.dist_eps > 0:
            raise SchemaError("dist_eps must be > 0")
        if not 0 < self.stereo_cos_tol < 1:
            raise SchemaError("stereo_cos_tol must lie in (0, 1)")


class ShellMember(NamedTuple):
    connectivity: int
    prev_id: int
    stereo: int


@dataclass(frozen=True)
class ShellDescriptor:
    center: int
    level: int
    center_prev_id: int
    members: tuple[ShellMember, ...]
    member_atoms: tuple[int, ...] = ()  # atom indices, same order as members


@dataclass(frozen=True)
class FingerprintTable:
    raw: np.ndarray  # (n_atoms, k + 1) uint32
    folded: np.ndarray  # (n_atoms, k + 1) int64 in [0, vocab_size)
    vocab_size: int

    @property
    def n_atoms(self) -> int:
        return self.raw.shape[0]

    @property
    def k(self) -> int:
        return self.raw.shape[1] - 1

    def __eq__(self, other):
        if not isinstance(other, FingerprintTable):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and np.array_equal(self.raw, other.raw)
            and np.array_equal(self.folded, other.folded)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "n_atoms": self.n_atoms,
            "k": self.k,
            "vocab": self.vocab_size,
            "folded": self.folded.tolist(),
            "raw_hex": [[f"{int(v):08x}" for v in row] for row in self.raw],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> FingerprintTable:
        try:
            raw = np.array(
                [[int(h, 16) for h in row] for row in doc["raw_hex"]], dtype=np.uint32
            ).reshape(doc["n_atoms"], doc["k"] + 1)
            folded = np.array(doc["folded"], dtype=np.int64).reshape(raw.shape)
            vocab = int(doc["vocab"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad fingerprint table: {exc}") from None
        if not np.array_equal(folded, raw.astype(np.int64) % vocab):
            raise SchemaError("folded codes do not match raw identifiers")
        return cls(raw, folded, vocab)


# --------------------------------------------------------------------------
# invariants and connectivity


def atomic_invariants(g: MoleculeGraph, i: int) -> tuple[int, ...]:
    """ECFP-style invariants of heavy atom ``i``.

    (heavy degree, valence minus H, atomic number, mass code, formal charge,
    H count, ring flag). Aromatic bonds count 1.5 toward valence, floored.
    Mass code is always 0.
    """
    atom: Atom = g.atoms[i]
    neighbors = g.neighbors(i)
    half_units = 0
    for k in neighbors:
        order = g.bond_between(i, k).order
        half_units += 3 if order == BondOrder.AROMATIC else 2 * int(order)
    heavy_valence = half_units // 2
    return (
        len(neighbors),
        heavy_valence,
        atom.element,
        0,
        atom.formal_charge,
        atom.h_count,
        int(atom.in_ring),
    )


def connectivity(g: MoleculeGraph, k: int, i: int) -> int:
    """Bond code between atoms: 1/2/3 by order, 4 aromatic, 0 unbonded."""
    bond = g.bond_between(k, i)
    return 0 if bond is None else int(bond.order)


def initial_identifier(g: MoleculeGraph, i: int) -> int:
    return murmur3_32(struct.pack("<7i", *atomic_invariants(g, i)), 0)


# --------------------------------------------------------------------------
# stereo codes

# quadrant of (x, y) sign pair -> 1..4; z sign gives the overall sign
_QUADRANT = {(1, 1): 1, (-1, 1): 2, (-1, -1): 3, (1, -1): 4}


def _unit(v: np.ndarray) -> np.ndarray:
    return v / math.sqrt(float(v @ v))


def shell_stereo_codes(
    coords: np.ndarray,
    center: int,
    members: Sequence[int],
    prev_ids: Sequence[int],
    conn: Sequence[int],
    level0: Sequence[int],
    cfg: E3fpConfig,
) -> dict[int, int]:
    """Octant code for every member of one shell, keyed by atom index.

    Axes come from two reference members picked by (prev id, bond code,
    distance). ``y`` points at the first reference, ``z`` is normal to the
    plane of the two references, ``x = y × z``. Mirroring the shell flips
    ``z`` and therefore the sign of every nonzero code.
    """
    codes = {k: 0 for k in members}
    if len(members) < 2:
        return codes
    origin = coords[center]
    vec = {k: coords[k] - origin for k in members}
    dist2 = {k: float(vec[k] @ vec[k]) for k in members}

    by_key = sorted(members, key=lambda k: (prev_ids[k], conn[k], dist2[k]))

    # Near-equal distances are a tie; break it with the folded level-0 id.
    # Members still indistinguishable cannot anchor the frame.
    candidates: list[int] = []
    ambiguous: set[int] = set()
    start = 0
    while start < len(by_key):
        end = start + 1
        while (
            end < len(by_key)
            and prev_ids[by_key[end]] == prev_ids[by_key[start]]
            and conn[by_key[end]] == conn[by_key[start]]
            and dist2[by_key[end]] - dist2[by_key[end - 1]] <= cfg.dist_eps
        ):
            end += 1
        group = by_key[start:end]
        folded0 = [level0[k] % cfg.vocab_size for k in group]
        for k, f in zip(group, folded0):
            if folded0.count(f) > 1:
                ambiguous.add(k)
        candidates.extend(sorted(group, key=lambda k: level0[k] % cfg.vocab_size))
        start = end
    usable = [k for k in candidates if k not in ambiguous]
    if len(usable) < 2:
        return codes

    ref1 = usable[0]
    y = _unit(vec[ref1])
    ref2 = None
    for k in usable[1:]:
        cos = abs(float(_unit(vec[k]) @ y))
        if cos < 1.0 - cfg.stereo_cos_tol:
            ref2 = k
            break
    if ref2 is None:
        return codes
    z = _unit(np.cross(y, vec[ref2]))
    x = np.cross(y, z)

    tol = cfg.stereo_cos_tol
    for k in members:
        if k in (ref1, ref2) or k in ambiguous:
            continue
        v = _unit(vec[k])
        px, py, pz = float(v @ x), float(v @ y), float(v @ z)
        if min(abs(px), abs(py), abs(pz)) < tol:
            continue
        quadrant = _QUADRANT[(1 if px > 0 else -1, 1 if py > 0 else -1)]
        codes[k] = quadrant if pz > 0 else -quadrant
    return codes


def stereo_code(
    c: Conformer,
    members: Sequence[int],
    k: int,
    i: int,
    prev_ids: Sequence[int],
    cfg: E3fpConfig,
    level0: Sequence[int] | None = None,
) -> int:
    """Stereo code of member ``k`` in the shell of ``i`` (see shell_stereo_codes)."""
    if level0 is None:
        level0 = [initial_identifier(c, n) for n in range(c.n_atoms)]
    conn = {m: connectivity(c, m, i) for m in members}
    return shell_stereo_codes(c.coords, i, members, prev_ids, conn, level0, cfg)[k]


# --------------------------------------------------------------------------
# shells


def shell_members(coords: np.ndarray, i: int, radius: float, dist_eps: float) -> list[int]:
    d = coords - coords[i]
    d2 = (d * d).sum(axis=1)
    limit = radius * radius + dist_eps
    return [k for k in range(len(coords)) if k != i and d2[k] <= limit]


class _Geometry:
    """Pairwise squared distances and bond codes, computed once per conformer."""

    def __init__(self, c: Conformer):
        diff = c.coords[:, None, :] - c.coords[None, :, :]
        self.coords = c.coords
        self.d2 = (diff * diff).sum(axis=-1)
        n = c.n_atoms
        self.conn = [[0] * n for _ in range(n)]
        for b in c.bonds:
            self.conn[b.a][b.b] = self.conn[b.b][b.a] = int(b.order)
        self.level0 = [initial_identifier(c, i) for i in range(n)]

    def shell(self, prev_ids, i: int, level: int, radius: float, cfg: E3fpConfig) -> ShellDescriptor:
        limit = radius * radius + cfg.dist_eps
        row = self.d2[i]
        members = [k for k in range(len(row)) if k != i and row[k] <= limit]
        conn = {k: self.conn[i][k] for k in members}
        sigma = shell_stereo_codes(self.coords, i, members, prev_ids, conn, self.level0, cfg)
        rows = sorted((ShellMember(conn[k], int(prev_ids[k]), sigma[k]), k) for k in members)
        return ShellDescriptor(
            center=i,
            level=level,
            center_prev_id=int(prev_ids[i]),
            members=tuple(m for m, _ in rows),
            member_atoms=tuple(k for _, k in rows),
        )


def gather_shell(
    c: Conformer,
    prev_ids: Sequence[int],
    i: int,
    radius: float,
    cfg: E3fpConfig,
    level: int = 1,
) -> ShellDescriptor:
    """Collect the neighbors of atom ``i`` within ``radius``, sorted canonically.

    Membership uses squared distance ``<= radius**2 + cfg.dist_eps``.
    """
    if len(prev_ids) != c.n_atoms:
        raise SchemaError("prev_ids needs one identifier per heavy atom")
    return _Geometry(c).shell(prev_ids, i, level, radius, cfg)


def shell_bytes(sd: ShellDescriptor) -> bytes:
    """``[level, center prev id]`` then each member's (c, prev id, stereo) as LE words."""
    parts = [struct.pack("<II", sd.level, sd.center_prev_id)]
    for m in sorted(sd.members):
        parts.append(struct.pack("<IIi", m.connectivity, m.prev_id, m.stereo))
    return b"".join(parts)


def hash_shell(sd: ShellDescriptor, cfg: E3fpConfig | None = None) -> int:
    return murmur3_32(shell_bytes(sd), 0)


def fingerprint(c: Conformer, cfg: E3fpConfig | None = None) -> FingerprintTable:
    cfg = cfg or E3fpConfig()
    geo = _Geometry(c)
    raw = np.zeros((c.n_atoms, cfg.k + 1), dtype=np.uint32)
    raw[:, 0] = geo.level0
    prev = geo.level0
    for j in range(1, cfg.k + 1):
        radius = cfg.r * j
        prev = [hash_shell(geo.shell(prev, i, j, radius, cfg)) for i in range(c.n_atoms)]
        raw[:, j] = prev
    folded = raw.astype(np.int64) % cfg.vocab_size
    return FingerprintTable(raw, folded, cfg.vocab_size)
