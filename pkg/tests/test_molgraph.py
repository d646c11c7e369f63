import json
import re

import numpy as np
import pytest
import selfies as sf
from hypothesis import given, settings
from hypothesis import strategies as st

from molgeom.errors import (
    BondIndexError,
    GeometryError,
    GrammarError,
    MismatchError,
    SchemaError,
    UnsupportedTokenError,
)
from molgeom.molgraph import (
    Atom,
    BondOrder,
    Conformer,
    align_phi,
    conformer_to_dict,
    parse_conformer,
    parse_selfies,
    split_selfies,
)
from molgeom.structok import default_selfies_vocab

from conftest import FIXTURES, load_fixture

SMILES_ATOM = re.compile(r"\[[^\]]*\]|Br|Cl|[BCNOSPFI]")
ELEMENT = re.compile(r"\[?\d*([A-Z][a-z]?)")


def methane_doc(**overrides):
    doc = {
        "atoms": [{"z": 6, "charge": 0, "h": 4, "ring": False}],
        "bonds": [],
        "coords": [[0.0, 0.0, 0.0]],
    }
    doc.update(overrides)
    return doc


def reference_atoms(s: str):
    """(token position, element symbol) per heavy atom, from the selfies package."""
    smiles, attribution = sf.decoder(s, attribute=True)
    out = []
    for entry in attribution:
        if not SMILES_ATOM.fullmatch(entry.token):
            continue
        sources = [a for a in entry.attribution if "Branch" not in a.token and "Ring" not in a.token]
        out.append((sources[-1].index, ELEMENT.match(entry.token).group(1)))
    return out


# -------------------------------------------------------------------- conformers


def test_single_carbon_document():
    c = parse_conformer(json.dumps(methane_doc()))
    assert c.n_atoms == 1 and c.bonds == ()
    assert c.atoms[0] == Atom(6, 0, 4, False)


def test_bond_index_out_of_range_is_index_error():
    doc = methane_doc(bonds=[{"a": 0, "b": 1, "order": 1, "wedge": "none"}])
    with pytest.raises(IndexError):
        parse_conformer(json.dumps(doc))
    with pytest.raises(BondIndexError):
        parse_conformer(json.dumps(doc))


def test_coincident_atoms_rejected():
    with pytest.raises(GeometryError):
        parse_conformer((FIXTURES / "errors" / "coincident_atoms.json").read_bytes())


@pytest.mark.parametrize(
    "name, error",
    [
        ("malformed", SchemaError),
        ("missing_coords", SchemaError),
        ("bond_out_of_range", BondIndexError),
        ("coincident_atoms", GeometryError),
    ],
)
def test_error_fixtures(name, error):
    with pytest.raises(error):
        parse_conformer((FIXTURES / "errors" / f"{name}.json").read_bytes())


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(coords=[[0.0, 0.0]]),
        lambda d: d.update(coords=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        lambda d: d["atoms"][0].update(z=0),
        lambda d: d["atoms"][0].update(h=-1),
        lambda d: d["atoms"][0].update(ring="no"),
        lambda d: d.update(selfies=5),
        lambda d: d.update(atoms={}),
    ],
)
def test_schema_violations(mutate):
    doc = methane_doc()
    mutate(doc)
    with pytest.raises(SchemaError):
        parse_conformer(json.dumps(doc))


def test_non_finite_coordinates():
    with pytest.raises(GeometryError):
        parse_conformer(json.dumps(methane_doc(coords=[[float("nan"), 0, 0]])))


def test_duplicate_bond_rejected():
    doc = json.loads((FIXTURES / "molecules" / "ethanol.json").read_text())
    doc["bonds"].append({"a": 1, "b": 0, "order": 2, "wedge": "none"})
    with pytest.raises(SchemaError):
        parse_conformer(json.dumps(doc))


def test_aromatic_order_and_round_trip():
    c = load_fixture("benzene")
    assert {b.order for b in c.bonds} == {BondOrder.AROMATIC}
    assert parse_conformer(json.dumps(conformer_to_dict(c))) == c


def test_parse_is_pure():
    blob = (FIXTURES / "molecules" / "chfclbr.json").read_bytes()
    assert parse_conformer(blob) == parse_conformer(blob)


def test_conformer_is_immutable():
    c = load_fixture("ethanol")
    with pytest.raises(ValueError):
        c.coords[0, 0] = 1.0


# -------------------------------------------------------------------- SELFIES


def test_all_atomic_chain():
    tokens, graph = parse_selfies("[C][C][O]")
    assert tokens.length == 3
    assert tokens.atom_positions == (0, 1, 2)
    assert [a.element for a in graph.atoms] == [6, 6, 8]
    assert [(b.a, b.b) for b in graph.bonds] == [(0, 1), (1, 2)]


def test_branch_operand_is_not_an_atom():
    # oracle: the selfies package decodes this to "CO"; the [C] after
    # [Branch1] is the length operand, so only two atoms exist
    assert sf.decoder("[C][Branch1][C][O]") == "CO"
    tokens, graph = parse_selfies("[C][Branch1][C][O]")
    assert tokens.length == 4
    assert tokens.atom_positions == (0, 3)
    assert graph.n_atoms == 2


def test_branch_three_atoms():
    assert sf.decoder("[C][Branch1][C][O][N]") == "C(O)N"
    tokens, graph = parse_selfies("[C][Branch1][C][O][N]")
    assert tokens.atom_positions == (0, 3, 4)
    assert sorted((b.a, b.b) for b in graph.bonds) == [(0, 1), (0, 2)]


def test_ring_closure():
    _, graph = parse_selfies("[C][=C][C][=C][C][=C][Ring1][=Branch1]")
    assert graph.n_atoms == 6
    assert len(graph.bonds) == 6
    assert all(a.in_ring for a in graph.atoms)


def test_implicit_hydrogens():
    _, graph = parse_selfies("[C][C][O]")
    assert [a.h_count for a in graph.atoms] == [3, 2, 1]


@pytest.mark.parametrize("bad", ["[C][C", "C[C]", "[C]]", "[C][Xx]", "[C][[O]"])
def test_grammar_errors(bad):
    with pytest.raises(GrammarError):
        parse_selfies(bad)


@pytest.mark.parametrize("bad", ["[C][Branch2][C][C][O]", "[C][H]", "[C].[O]", "[13C]", "[C][nop]"])
def test_unsupported_symbols(bad):
    with pytest.raises(UnsupportedTokenError):
        parse_selfies(bad)


def test_unsupported_is_a_grammar_error():
    assert issubclass(UnsupportedTokenError, GrammarError)


def test_split_round_trip_examples():
    s = "[C][=C][Branch1][C][Cl][N+1]"
    assert "".join(split_selfies(s)) == s


def _corpus(n=300, seed=7):
    rng = np.random.default_rng(seed)
    alphabet = default_selfies_vocab()
    atoms = [t for t in alphabet if "Branch" not in t and "Ring" not in t]
    out = []
    while len(out) < n:
        length = int(rng.integers(1, 14))
        toks = [str(rng.choice(atoms))]
        for _ in range(length - 1):
            pick = rng.random()
            toks.append(str(rng.choice(alphabet if pick < 0.35 else atoms)))
        out.append("".join(toks))
    return out


CORPUS = _corpus()


def test_corpus_size():
    assert len(set(CORPUS)) >= 200


@pytest.mark.parametrize("chunk", range(6))
def test_atom_positions_match_reference_decoder(chunk):
    for s in CORPUS[chunk::6]:
        tokens, graph = parse_selfies(s)
        ref = reference_atoms(s)
        assert list(tokens.atom_positions) == [p for p, _ in ref], s
        assert [a.symbol for a in graph.atoms] == [e for _, e in ref], s
        assert graph.n_atoms == len(tokens.atom_positions)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from(default_selfies_vocab()), min_size=1, max_size=15))
def test_tokens_round_trip_and_phi_increasing(toks):
    s = "".join(toks)
    tokens, graph = parse_selfies(s)
    assert split_selfies(tokens.to_string()) == list(tokens.tokens)
    assert tokens.to_string() == s
    assert list(tokens.phi) == sorted(set(tokens.phi))
    assert graph.n_atoms == len(tokens.phi)
    for t in tokens.phi:
        assert "Branch" not in tokens.tokens[t] and "Ring" not in tokens.tokens[t]


# -------------------------------------------------------------------- align_phi


def _chain(symbols_z):
    n = len(symbols_z)
    atoms = tuple(Atom(z, 0, 0, False) for z in symbols_z)
    return Conformer(atoms, (), np.arange(n * 3, dtype=float).reshape(n, 3) * 1.5)


def test_align_identity():
    tokens, _ = parse_selfies("[C][C][O]")
    assert align_phi(tokens, _chain([6, 6, 8])) == (0, 1, 2)


def test_align_branch():
    tokens, _ = parse_selfies("[C][Branch1][C][O][N]")
    assert align_phi(tokens, _chain([6, 8, 7])) == (0, 3, 4)


def test_align_count_mismatch():
    tokens, _ = parse_selfies("[C][C][O]")
    with pytest.raises(MismatchError):
        align_phi(tokens, _chain([6, 6]))


def test_align_element_mismatch():
    c = parse_conformer((FIXTURES / "errors" / "element_mismatch.json").read_bytes())
    tokens, graph = parse_selfies(c.selfies)
    with pytest.raises(MismatchError):
        align_phi(tokens, c, graph)


@pytest.mark.parametrize("name", ["ethanol", "chfclbr", "haloethene_planar", "benzene", "methane"])
def test_fixtures_align(name):
    c = load_fixture(name)
    tokens, graph = parse_selfies(c.selfies)
    assert len(align_phi(tokens, c, graph)) == c.n_atoms
