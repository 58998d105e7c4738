"""Seeded synthetic crystal benchmark labelled by the analytic oracle.

Prototype structures over a six-element alphabet are relaxed (cell scale
only) on the oracle, then perturbed by random strain and atomic
displacements. Low-perturbation variants form the "training" pool; a few
prototype/composition pairs are withheld as a "held-out novel" pool; strongly
perturbed variants widen the energy range for representation learning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import elements
from .crystal_core import Crystal
from .oracle import MorseOracle, default_oracle

ALPHABET = ("Na", "K", "Mg", "Cl", "O", "F")

_FCC_PRIM = 0.5 * np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
_CUBIC = np.eye(3)
_HEX = np.array([[1.0, 0.0, 0.0], [-0.5, np.sqrt(3) / 2, 0.0], [0.0, 0.0, 1.63]])

# name -> (unit lattice, fractional sites, site labels)
PROTOTYPES = {
    "bcc": (_CUBIC, [[0, 0, 0], [0.5, 0.5, 0.5]], "AA"),
    "fcc": (_CUBIC, [[0, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5], [0, 0.5, 0.5]], "AAAA"),
    "cscl": (_CUBIC, [[0, 0, 0], [0.5, 0.5, 0.5]], "AB"),
    "rocksalt": (_FCC_PRIM, [[0, 0, 0], [0.5, 0.5, 0.5]], "AB"),
    "zincblende": (_FCC_PRIM, [[0, 0, 0], [0.25, 0.25, 0.25]], "AB"),
    "wurtzite": (_HEX, [[1 / 3, 2 / 3, 0], [2 / 3, 1 / 3, 0.5], [1 / 3, 2 / 3, 0.375], [2 / 3, 1 / 3, 0.875]], "AABB"),
    "fluorite": (_FCC_PRIM, [[0, 0, 0], [0.25, 0.25, 0.25], [0.75, 0.75, 0.75]], "ABB"),
    "cdi2": (_HEX, [[0, 0, 0], [1 / 3, 2 / 3, 0.25], [2 / 3, 1 / 3, 0.75]], "ABB"),
    "perovskite": (_CUBIC, [[0, 0, 0], [0.5, 0.5, 0.5], [0.5, 0.5, 0], [0.5, 0, 0.5], [0, 0.5, 0.5]], "BACCC"),
}

# (composition label -> {site label: symbol}, prototypes)
FAMILIES = [
    *[({"A": s}, ("bcc", "fcc")) for s in ALPHABET],
    *[({"A": a, "B": b}, ("cscl", "rocksalt", "zincblende", "wurtzite")) for a, b in (("Na", "Cl"), ("Na", "F"), ("K", "Cl"), ("K", "F"), ("Mg", "O"))],
    *[({"A": "Mg", "B": x}, ("fluorite", "cdi2")) for x in ("F", "Cl")],
    *[({"A": "O", "B": m}, ("fluorite", "cdi2")) for m in ("Na", "K")],
    *[({"A": "Mg", "B": a, "C": x}, ("perovskite",)) for a in ("Na", "K") for x in ("F", "Cl")],
]

# withheld from training: (prototype, formula-defining symbols)
HELD_OUT = {("zincblende", ("K", "F")), ("cdi2", ("Mg", "Cl")), ("wurtzite", ("Na", "F"))}


@dataclass
class Benchmark:
    training: list
    held_out: list
    jepa_corpus: list
    elemental_refs: dict
    base: list


def _build(proto, mapping, scale):
    lat, sites, labels = PROTOTYPES[proto]
    species = tuple(elements.atomic_number(mapping[l]) for l in labels)
    return Crystal(np.array(sites, dtype=float), species, np.asarray(lat) * scale)


def relax_scale(proto, mapping, oracle: MorseOracle):
    res = minimize_scalar(
        lambda a: oracle.energy_per_atom(_build(proto, mapping, a)),
        bounds=(1.5, 9.0),
        method="bounded",
        options={"xatol": 1e-6},
    )
    return float(res.x)


def perturb(c: Crystal, rng, strain, disp):
    """Random symmetric strain (max |component| ~ strain) and Gaussian Cartesian displacements (sigma disp Å)."""
    e = rng.normal(scale=strain / 2, size=(3, 3))
    e = 0.5 * (e + e.T)
    lattice = c.lattice @ (np.eye(3) + e)
    cart = c.frac_coords @ lattice + rng.normal(scale=disp, size=(c.num_atoms, 3))
    return c.replace(lattice=lattice, frac_coords=cart @ np.linalg.inv(lattice))


def label(c: Crystal, oracle, refs):
    e = oracle.energy_per_atom(c)
    n = c.num_atoms
    ref = sum(refs[z] for z in c.species) / n
    return c.replace(energy_per_atom=e, e_form_per_atom=e - ref)


def make_benchmark(seed=0, n_train_variants=4, jepa_size=512, oracle=None, jepa_strain=0.05, jepa_disp=0.15) -> Benchmark:
    oracle = oracle or default_oracle()
    rng = np.random.default_rng(seed)
    base = []
    for mapping, protos in FAMILIES:
        for proto in protos:
            a = relax_scale(proto, mapping, oracle)
            c = _build(proto, mapping, a)
            syms = tuple(sorted({mapping[l] for l in PROTOTYPES[proto][2]}))
            formula_key = tuple(mapping[k] for k in sorted(mapping))
            base.append((proto, formula_key, syms, c))
    refs = {}
    for proto, _, syms, c in base:
        if len(syms) == 1:
            z = c.species[0]
            refs[z] = min(refs.get(z, np.inf), oracle.energy_per_atom(c))

    training, held_out, jepa = [], [], []
    for k, (proto, fkey, syms, c) in enumerate(base):
        withheld = (proto, fkey) in HELD_OUT
        pool = held_out if withheld else training
        for v in range(n_train_variants):
            strain, disp = (0.0, 0.0) if v == 0 else (0.01, 0.03)
            cc = perturb(c, rng, strain, disp) if v else c
            cc = label(cc.replace(id=f"{'held' if withheld else 'train'}-{proto}-{''.join(fkey)}-{v}"), oracle, refs)
            pool.append(cc)
    jepa.extend(training)
    n = 0
    while len(jepa) < jepa_size:
        proto, fkey, syms, c = base[n % len(base)]
        strain = rng.uniform(0.0, jepa_strain)
        disp = rng.uniform(0.0, jepa_disp)
        cc = label(perturb(c, rng, strain, disp).replace(id=f"var-{proto}-{''.join(fkey)}-{n}"), oracle, refs)
        jepa.append(cc)
        n += 1
    return Benchmark(training=training, held_out=held_out, jepa_corpus=jepa[:jepa_size], elemental_refs=refs, base=[b[3] for b in base])


# ---------------------------------------------------------------------------
# random instances for property checks


def random_crystal(rng, n_atoms=None, species=None, min_dist=0.8, max_tries=200, id=""):
    """Random cell (lengths 3-7 Å, angles 60-120°) with atoms kept min_dist apart under minimum image."""
    from .crystal_core import lattice_from_parameters, min_image_distances

    n = int(rng.integers(1, 7)) if n_atoms is None else int(n_atoms)
    pool = [elements.atomic_number(s) for s in ALPHABET] if species is None else list(species)
    for _ in range(max_tries):
        a, b, c = rng.uniform(3.0, 7.0, 3)
        al, be, ga = rng.uniform(60.0, 120.0, 3)
        try:
            lat = lattice_from_parameters(a, b, c, al, be, ga)
        except Exception:
            continue
        if not np.isfinite(lat).all() or np.linalg.det(lat) < 5.0:
            continue
        x = rng.random((n, 3))
        sp = tuple(int(rng.choice(pool)) for _ in range(n))
        cr = Crystal(x, sp, lat, id=id)
        d = min_image_distances(cr)
        if n == 1 or d[np.triu_indices(n, 1)].min() > min_dist:
            return cr
    raise RuntimeError("could not place atoms; lower min_dist")


def random_hull_system(rng, k=3, n_entries=12, elements_pool=None):
    """Hull entries over k random elements: all elementals plus random compounds near the linear reference."""
    from .crystal_core import Composition
    from .phase_diagram import HullEntry

    pool = list(range(1, 101)) if elements_pool is None else list(elements_pool)
    zs = sorted(int(z) for z in rng.choice(pool, size=k, replace=False))
    mu = dict(zip(zs, rng.uniform(-6.0, -1.0, size=k)))
    entries = [HullEntry(Composition.from_species([z]), float(mu[z]), f"el-{z}") for z in zs]
    while len(entries) < max(n_entries, k):
        m = int(rng.integers(1, k + 1))
        sub = sorted(int(z) for z in rng.choice(zs, size=m, replace=False))
        species = [z for z in sub for _ in range(int(rng.integers(1, 5)))]
        comp = Composition.from_species(species)
        ref = sum(comp.fractions[z] * mu[z] for z in comp.element_set)
        entries.append(HullEntry(comp, float(ref + rng.uniform(-1.0, 0.4)), f"e{len(entries)}"))
    return zs, entries
