import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crystalscreen.crystal_core import (
    Composition,
    Crystal,
    composition_of,
    crystal_from_record,
    crystal_rep,
    crystal_to_record,
    enumerate_subsystems,
    flatten_sym,
    lattice_decompose,
    lattice_parameters,
    lattice_from_parameters,
    min_image_distances,
    read_cif,
    read_jsonl,
    split_rep,
    unflatten_sym,
    write_cif,
    write_jsonl,
)
from crystalscreen.errors import CifError, DegenerateLattice, InvalidCrystal, SpeciesOutOfRange

from conftest import crystals_from_seed


def random_lattice(seed):
    r = np.random.default_rng(seed)
    while True:
        m = r.normal(size=(3, 3)) + 2 * np.eye(3)
        if np.linalg.det(m) > 0.1:
            return m


def test_identity_lattice_code():
    code = lattice_decompose(np.eye(3))
    assert np.allclose(code.rotation, np.eye(3))
    assert np.allclose(code.sym, np.eye(3))
    assert np.allclose(code.code6, [1, 0, 0, 1, 0, 1])


def test_diagonal_lattice_code():
    code = lattice_decompose(np.diag([2.0, 3.0, 4.0]))
    assert np.allclose(code.rotation, np.eye(3))
    assert np.allclose(code.code6, [2, 0, 0, 3, 0, 4])


@pytest.mark.parametrize("seed", range(10))
def test_decompose_against_gram_eigendecomposition(seed):
    lat = random_lattice(seed)
    code = lattice_decompose(lat)
    assert np.abs(code.recompose() - lat).max() < 1e-9
    # independent construction: sym = (L L^T)^(1/2) for row-vector lattices
    w, v = np.linalg.eigh(lat @ lat.T)
    sym = (v * np.sqrt(w)) @ v.T
    assert np.abs(code.sym - sym).max() < 1e-9
    assert abs(np.linalg.det(code.rotation) - 1) < 1e-12


def test_recompose_identity_on_many_lattices():
    worst = 0.0
    for seed in range(1000):
        lat = random_lattice(seed)
        worst = max(worst, np.abs(lattice_decompose(lat).recompose() - lat).max())
    assert worst < 1e-9


@pytest.mark.parametrize("lat", [np.diag([1.0, 1.0, -1.0]), np.zeros((3, 3)), np.diag([1.0, 1.0, 1e-12])])
def test_degenerate_lattice(lat):
    with pytest.raises(DegenerateLattice):
        lattice_decompose(lat)


@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_code6_roundtrip(vals):
    s = unflatten_sym(np.array(vals))
    assert np.allclose(s, s.T)
    assert np.allclose(flatten_sym(s), vals)


def test_rep_single_hydrogen():
    c = Crystal(np.zeros((1, 3)), (1,), np.eye(3))
    row = crystal_rep(c)[0]
    expected = np.zeros(109)
    expected[3] = 1.0
    expected[103:] = [1, 0, 0, 1, 0, 1]
    assert row.shape == (109,)
    assert np.array_equal(row, expected)


def test_rep_shares_lattice_block(nacl):
    rep = crystal_rep(nacl)
    assert np.array_equal(rep[0, -6:], rep[1, -6:])


def test_rep_roundtrip(nacl):
    coords, onehot, _ = split_rep(crystal_rep(nacl))
    assert np.array_equal(coords, nacl.frac_coords)
    assert tuple(np.argmax(onehot, axis=1) + 1) == nacl.species


@given(st.integers(0, 10_000))
def test_rep_permutation_equivariant(seed):
    c = crystals_from_seed(seed, 1)[0]
    perm = np.random.default_rng(seed).permutation(c.num_atoms)
    p = c.replace(frac_coords=c.frac_coords[perm], species=tuple(np.array(c.species)[perm]))
    assert np.array_equal(crystal_rep(p), crystal_rep(c)[perm])


def test_species_out_of_range():
    with pytest.raises(SpeciesOutOfRange):
        Crystal(np.zeros((1, 3)), (101,), np.eye(3))


def test_wrapping_on_ingest():
    c = Crystal(np.array([[1.25, -0.25, 2.0]]), (1,), np.eye(3))
    assert np.allclose(c.frac_coords, [[0.25, 0.75, 0.0]])


@pytest.mark.parametrize(
    "species,expected",
    [((8, 8, 11), {8: 2 / 3, 11: 1 / 3}), ((3,), {3: 1.0}), ((1, 2, 3, 1), {1: 0.5, 2: 0.25, 3: 0.25})],
)
def test_composition_counts(species, expected):
    c = Crystal(np.random.default_rng(0).random((len(species), 3)), species, 4 * np.eye(3))
    comp = composition_of(c)
    assert comp.fractions == pytest.approx(expected)
    assert abs(sum(comp.fractions.values()) - 1) < 1e-12


def test_subsystems_small():
    assert enumerate_subsystems([5]) == [(5,)]
    assert enumerate_subsystems([1, 2]) == [(1,), (2,), (1, 2)]


@given(st.sets(st.integers(1, 100), min_size=1, max_size=5))
def test_subsystems_powerset(elset):
    subs = enumerate_subsystems(sorted(elset))
    assert len(subs) == 2 ** len(elset) - 1
    as_sets = {frozenset(s) for s in subs}
    for s in as_sets:
        for k in range(1, len(s)):
            for sub in itertools.combinations(sorted(s), k):
                assert frozenset(sub) in as_sets
    assert [len(s) for s in subs] == sorted(len(s) for s in subs)


def test_min_image_distance_cubic():
    c = Crystal(np.array([[0.0, 0, 0], [0.9, 0, 0]]), (1, 1), 10 * np.eye(3))
    d = min_image_distances(c)
    assert d[0, 1] == pytest.approx(1.0)


def test_lattice_parameters_roundtrip():
    lat = lattice_from_parameters(3.0, 4.0, 5.0, 80.0, 95.0, 110.0)
    lengths, angles = lattice_parameters(lat)
    assert np.allclose(lengths, [3, 4, 5])
    assert np.allclose(angles, [80, 95, 110])


def test_jsonl_roundtrip(tmp_path, nacl):
    c = nacl.replace(energy_per_atom=-1.5)
    path = tmp_path / "c.jsonl"
    write_jsonl([c], path, meta={"kind": "test"})
    (back,) = read_jsonl(path)
    assert back.species == c.species
    assert np.array_equal(back.lattice, c.lattice)
    assert back.energy_per_atom == -1.5
    assert crystal_from_record(json.loads(json.dumps(crystal_to_record(c)))).id == "nacl"


def test_jsonl_rejects_bad_record():
    with pytest.raises(InvalidCrystal):
        crystal_from_record({"lattice": [1, 0, 0, 0, 1, 0, 0, 0, 1], "species": [1, 1], "frac_coords": [[0, 0, 0]]})


def test_cif_roundtrip(nacl):
    back = read_cif(write_cif(nacl))
    assert back.species == nacl.species
    assert np.allclose(min_image_distances(back), min_image_distances(nacl))
    assert back.volume == pytest.approx(nacl.volume)


def test_cif_rejects_symmetry_ops():
    text = write_cif(Crystal(np.zeros((1, 3)), (1,), np.eye(3))).replace("P 1", "F m -3 m")
    with pytest.raises(CifError):
        read_cif(text)


def test_composition_from_fractions_normalizes():
    comp = Composition.from_fractions({1: 2.0, 2: 2.0})
    assert comp.fractions == {1: 0.5, 2: 0.5}
