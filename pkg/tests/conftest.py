import json
from pathlib import Path

import numpy as np
import pytest

from molgeom.e3fp import E3fpConfig
from molgeom.molgraph import Atom, Bond, BondOrder, Conformer, parse_conformer

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name: str) -> Conformer:
    return parse_conformer((FIXTURES / "molecules" / f"{name}.json").read_bytes())


def boundary_margin(coords: np.ndarray, cfg: E3fpConfig) -> float:
    """Smallest gap between any squared interatomic distance and a shell radius²."""
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = (diff**2).sum(-1)[np.triu_indices(len(coords), 1)]
    radii2 = np.array([(cfg.r * j) ** 2 for j in range(1, cfg.k + 1)])
    if d2.size == 0:
        return np.inf
    return float(np.abs(d2[:, None] - radii2[None, :]).min())


def random_conformer(rng: np.random.Generator, n_atoms: int) -> Conformer:
    """Branched tree of C/N/O atoms placed by a self-avoiding random walk."""
    elements = rng.choice([6, 6, 6, 7, 8], size=n_atoms)
    coords = [np.zeros(3)]
    bonds = []
    while len(coords) < n_atoms:
        parent = int(rng.integers(len(coords)))
        step = rng.normal(size=3)
        pos = coords[parent] + 1.5 * step / np.linalg.norm(step)
        if min(np.linalg.norm(pos - c) for c in coords) < 1.2:
            continue
        bonds.append(Bond(parent, len(coords), BondOrder.SINGLE))
        coords.append(pos)
    degree = np.zeros(n_atoms, dtype=int)
    for b in bonds:
        degree[b.a] += 1
        degree[b.b] += 1
    valence = {6: 4, 7: 3, 8: 2}
    atoms = tuple(
        Atom(int(z), 0, max(0, valence[int(z)] - int(d)), False)
        for z, d in zip(elements, degree)
    )
    return Conformer(atoms, tuple(bonds), np.array(coords))


def fixed_conformers(count: int = 20, seed: int = 2024, cfg: E3fpConfig | None = None):
    """Deterministic corpus with every distance well away from shell boundaries."""
    cfg = cfg or E3fpConfig()
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        c = random_conformer(rng, int(rng.integers(3, 11)))
        if boundary_margin(c.coords, cfg) > 1e-3:
            out.append(c)
    return out


def random_rigid_motion(rng: np.random.Generator):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return rot, rng.uniform(-20, 20, size=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_dir():
    return FIXTURES


def read_json(path):
    return json.loads(Path(path).read_text())


# documented CLI exit code for each file under fixtures/errors
ERROR_EXIT = {
    "bad_selfies": 5,
    "bond_out_of_range": 2,
    "coincident_atoms": 3,
    "element_mismatch": 5,
    "long_chain": 4,
    "malformed": 2,
    "missing_coords": 2,
}
CONFIG_EXIT = {"desk_seed7": 0, "unknown_key": 2, "bad_dims": 6}


# acceptance criterion number -> (status, summary); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, summary = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {summary}")
