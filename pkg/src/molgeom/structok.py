"""Structural token sequences: SELFIES embeddings fused with 3D codes."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from molgeom.e3fp import FingerprintTable
from molgeom.errors import LengthError, SchemaError, ShapeError, UnknownTokenError
from molgeom.molgraph import StructuralTokens
from molgeom.numerics import NEG_INF, seeded_params

SEQUENCE_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4I")


def default_selfies_vocab() -> list[str]:
    """Every symbol the parser supports for common organic chemistry."""
    bonds = ("", "=", "#")
    atoms = []
    for b, elem in product(bonds, ("C", "N", "O", "S", "P", "B")):
        atoms.append(f"[{b}{elem}]")
    atoms += ["[F]", "[Cl]", "[Br]", "[I]"]
    for b, elem, q in product(bonds, ("C", "N", "O", "S", "P", "B"), ("+1", "-1")):
        atoms.append(f"[{b}{elem}{q}]")
    for b, chir, h in product(("", "="), ("@", "@@"), ("", "H1")):
        atoms.append(f"[{b}C{chir}{h}]")
    control = [f"[{b}{kind}1]" for kind in ("Branch", "Ring") for b in bonds]
    return sorted(set(atoms)) + control


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    rows: int
    dim: int
    seed: int
    name: str = "embedding"
    vocab: tuple[str, ...] | None = None
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.rows < 1 or self.dim < 1:
            raise ShapeError("embedding table needs rows >= 1 and dim >= 1")
        if self.vocab is not None and len(self.vocab) != self.rows:
            raise ShapeError("vocabulary length must equal row count")
        # every row shares the 1/sqrt(dim) bound
        w = seeded_params((self.rows, self.dim), self.seed, self.name, scale=self.dim**-0.5)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if self.vocab is not None:
            object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.vocab)})

    @classmethod
    def for_vocab(cls, vocab, dim: int, seed: int, name: str = "e1d") -> EmbeddingTable:
        vocab = tuple(vocab)
        return cls(len(vocab), dim, seed, name, vocab)

    @classmethod
    def from_weights(cls, weights, vocab=None, name: str = "embedding") -> EmbeddingTable:
        """Wrap an explicit (rows, dim) matrix, e.g. trained or hand-built weights."""
        w = np.array(weights, dtype=np.float32)
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise ShapeError("weights must be a finite (rows, dim) matrix")
        table = cls(w.shape[0], w.shape[1], 0, name, None if vocab is None else tuple(vocab))
        w.flags.writeable = False
        object.__setattr__(table, "weights", w)
        return table

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except (AttributeError, KeyError):
            raise UnknownTokenError(f"token {token!r} is not in the vocabulary") from None

    def lookup(self, token: str) -> np.ndarray:
        return self.weights[self.index(token)]

    def __getitem__(self, row: int) -> np.ndarray:
        return self.weights[row]


def load_vocab(path) -> list[str]:
    """Newline-delimited tokens; the id of a token is its line number."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    tokens = [line for line in lines if line != ""]
    if len(set(tokens)) != len(tokens):
        raise SchemaError(f"{path}: duplicate tokens in vocabulary")
    return tokens


@dataclass(frozen=True, eq=False)
class StructuralSequence:
    s: np.ndarray  # (l_max, d_s) float32
    mask: np.ndarray  # (l_max,) float32, 0 or NEG_INF
    true_len: int

    @property
    def l_max(self) -> int:
        return self.s.shape[0]

    @property
    def dim(self) -> int:
        return self.s.shape[1]

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(self.l_max, self.dim, self.true_len, SEQUENCE_FORMAT_VERSION)
        return header + self.s.astype("<f4").tobytes()

    def mask_json(self) -> str:
        doc = {
            "l_max": self.l_max,
            "true_len": self.true_len,
            "mask": [float(v) for v in self.mask],
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_bytes(cls, blob: bytes) -> StructuralSequence:
        if len(blob) < _HEADER.size:
            raise SchemaError("truncated structural sequence header")
        l_max, dim, true_len, version = _HEADER.unpack_from(blob)
        if version != SEQUENCE_FORMAT_VERSION:
            raise SchemaError(f"unsupported sequence format version {version}")
        if true_len > l_max:
            raise SchemaError("true length exceeds padded length")
        body = blob[_HEADER.size :]
        if len(body) != 4 * l_max * dim:
            raise SchemaError("structural sequence body has the wrong size")
        s = np.frombuffer(body, dtype="<f4").reshape(l_max, dim).astype(np.float32)
        return cls(s, padding_mask(true_len, l_max), true_len)


def padding_mask(true_len: int, l_max: int) -> np.ndarray:
    mask = np.full(l_max, NEG_INF, dtype=np.float32)
    mask[:true_len] = 0.0
    return mask


def embed_1d(st: StructuralTokens, table: EmbeddingTable) -> np.ndarray:
    return np.stack([table.lookup(t) for t in st.tokens]).astype(np.float32)


def embed_3d(ft: FingerprintTable, i: int, table: EmbeddingTable) -> np.ndarray:
    """Mean of the 3D-code embeddings of atom ``i`` over all K+1 levels."""
    if table.rows != ft.vocab_size:
        raise ShapeError(f"3D table has {table.rows} rows, vocabulary is {ft.vocab_size}")
    rows = table.weights[ft.folded[i]].astype(np.float64)
    return rows.mean(axis=0).astype(np.float32)


def _assemble(e1d: np.ndarray, e3d: dict[int, np.ndarray], l_max: int) -> StructuralSequence:
    length, dim = e1d.shape
    if length > l_max:
        raise LengthError(f"sequence length {length} exceeds l_max {l_max}")
    s = np.zeros((l_max, dim), dtype=np.float32)
    s[:length] = e1d
    for t, v in e3d.items():
        s[t] = ((e1d[t].astype(np.float64) + v.astype(np.float64)) / 2.0).astype(np.float32)
    return StructuralSequence(s, padding_mask(length, l_max), length)


def fuse_sequence(
    st: StructuralTokens,
    ft: FingerprintTable,
    table_1d: EmbeddingTable,
    table_3d: EmbeddingTable,
    l_max: int,
) -> StructuralSequence:
    """Average each atom position's SELFIES embedding with its 3D embedding.

    Control-token positions keep their SELFIES embedding unchanged; rows past
    the true length are zero and masked.
    """
    if st.length > l_max:
        raise LengthError(f"sequence length {st.length} exceeds l_max {l_max}")
    if ft.n_atoms != len(st.phi):
        raise ShapeError(f"{ft.n_atoms} fingerprint rows for {len(st.phi)} atom positions")
    e1d = embed_1d(st, table_1d)
    e3d = {t: embed_3d(ft, i, table_3d) for i, t in enumerate(st.phi)}
    return _assemble(e1d, e3d, l_max)


def no3d_sequence(st: StructuralTokens, table_1d: EmbeddingTable, l_max: int) -> StructuralSequence:
    if st.length > l_max:
        raise LengthError(f"sequence length {st.length} exceeds l_max {l_max}")
    return _assemble(embed_1d(st, table_1d), {}, l_max)
