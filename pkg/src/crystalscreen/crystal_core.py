"""Periodic crystal data model, lattice reparameterization, composition algebra and file I/O.

Lattices are stored as 3x3 matrices whose *rows* are the Cartesian lattice
vectors, so Cartesian positions are ``frac_coords @ lattice``.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import elements
from .errors import CifError, DegenerateLattice, InvalidCrystal, SpeciesOutOfRange

MAX_ATOMS = 20
NUM_SPECIES = elements.MAX_Z
REP_WIDTH = 3 + NUM_SPECIES + 6
_TRIU = np.triu_indices(3)

_SHIFTS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


def wrap_frac(x):
    """Map fractional coordinates into [0, 1) via x - floor(x)."""
    x = np.asarray(x, dtype=float)
    w = x - np.floor(x)
    # x - floor(x) rounds to exactly 1.0 for tiny negative x
    w[w >= 1.0] = 0.0
    return w


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Crystal:
    frac_coords: np.ndarray
    species: tuple
    lattice: np.ndarray
    id: str = ""
    energy_per_atom: float | None = None
    e_form_per_atom: float | None = None
    meta: dict = field(default_factory=dict, compare=False)
    max_atoms: int = field(default=MAX_ATOMS, compare=False, repr=False)

    def __post_init__(self):
        coords = np.asarray(self.frac_coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise InvalidCrystal(f"frac_coords must be N x 3, got {coords.shape}")
        species = tuple(int(s) for s in self.species)
        if len(species) != coords.shape[0]:
            raise InvalidCrystal("species and frac_coords lengths differ")
        n = len(species)
        if not 1 <= n <= self.max_atoms:
            raise InvalidCrystal(f"atom count {n} outside 1..{self.max_atoms}")
        bad = [s for s in species if not 1 <= s <= NUM_SPECIES]
        if bad:
            raise SpeciesOutOfRange(f"atomic numbers outside 1..{NUM_SPECIES}: {bad}")
        lattice = np.asarray(self.lattice, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(lattice)) or not np.all(np.isfinite(coords)):
            raise InvalidCrystal("non-finite lattice or coordinates")
        if np.linalg.det(lattice) <= 0:
            raise DegenerateLattice("lattice determinant must be strictly positive")
        object.__setattr__(self, "frac_coords", _readonly(wrap_frac(coords)))
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "lattice", _readonly(lattice))

    @property
    def num_atoms(self):
        return len(self.species)

    @property
    def volume(self):
        return float(abs(np.linalg.det(self.lattice)))

    @property
    def cart_coords(self):
        return self.frac_coords @ self.lattice

    def replace(self, **changes):
        kw = dict(
            frac_coords=self.frac_coords,
            species=self.species,
            lattice=self.lattice,
            id=self.id,
            energy_per_atom=self.energy_per_atom,
            e_form_per_atom=self.e_form_per_atom,
            meta=dict(self.meta),
            max_atoms=self.max_atoms,
        )
        kw.update(changes)
        return Crystal(**kw)

    def formula(self):
        comp = composition_of(self)
        parts = []
        for z in comp.element_set:
            n = comp.counts[z]
            parts.append(elements.symbol(z) + (str(n) if n > 1 else ""))
        return "".join(parts)


# ---------------------------------------------------------------------------
# lattice reparameterization


@dataclass(frozen=True)
class LatticeCode:
    """Polar factors of a lattice: ``lattice = sym @ rotation`` (row-vector form).

    Equivalently ``lattice.T = rotation.T @ sym`` is the SVD rotation/symmetric
    split written for the column-vector matrix; only the symmetric factor
    carries geometry, the rotation is a rigid reorientation of Cartesian space.
    """

    rotation: np.ndarray
    sym: np.ndarray
    code6: np.ndarray

    def recompose(self):
        return self.sym @ self.rotation


def lattice_decompose(lattice) -> LatticeCode:
    lattice = np.asarray(lattice, dtype=float).reshape(3, 3)
    w, s, vt = np.linalg.svd(lattice)
    if s.min() < 1e-10 or np.linalg.det(lattice) <= 0:
        raise DegenerateLattice(f"singular values {s} / det {np.linalg.det(lattice):.3g}")
    if np.linalg.det(w) < 0:
        # det(L) > 0 means det(W) and det(V) share a sign; flip both
        w[:, -1] *= -1
        vt[-1, :] *= -1
    rotation = w @ vt
    sym = (w * s) @ w.T
    sym = 0.5 * (sym + sym.T)
    return LatticeCode(_readonly(rotation), _readonly(sym), _readonly(flatten_sym(sym)))


def flatten_sym(sym):
    """Row-major upper triangle: (s11, s12, s13, s22, s23, s33)."""
    return np.asarray(sym, dtype=float)[_TRIU]


def unflatten_sym(code6):
    code6 = np.asarray(code6, dtype=float)
    m = np.zeros((3, 3))
    m[_TRIU] = code6
    return m + np.triu(m, 1).T


def lattice_from_parameters(a, b, c, alpha, beta, gamma):
    """Row-vector lattice from cell lengths (Å) and angles (degrees)."""
    al, be, ga = (math.radians(x) for x in (alpha, beta, gamma))
    va = [a, 0.0, 0.0]
    vb = [b * math.cos(ga), b * math.sin(ga), 0.0]
    cx = c * math.cos(be)
    cy = c * (math.cos(al) - math.cos(be) * math.cos(ga)) / math.sin(ga)
    cz2 = c * c - cx * cx - cy * cy
    if cz2 <= 0:
        raise DegenerateLattice("cell angles do not form a valid cell")
    return np.array([va, vb, [cx, cy, math.sqrt(cz2)]])


def lattice_parameters(lattice):
    lattice = np.asarray(lattice, dtype=float)
    lengths = np.linalg.norm(lattice, axis=1)
    angles = []
    for i, j in ((1, 2), (0, 2), (0, 1)):
        cosang = lattice[i] @ lattice[j] / (lengths[i] * lengths[j])
        angles.append(math.degrees(math.acos(float(np.clip(cosang, -1.0, 1.0)))))
    return lengths, np.array(angles)


# ---------------------------------------------------------------------------
# representation


def one_hot_species(species):
    species = np.asarray(species, dtype=int)
    if np.any((species < 1) | (species > NUM_SPECIES)):
        raise SpeciesOutOfRange(f"atomic numbers outside 1..{NUM_SPECIES}")
    out = np.zeros((len(species), NUM_SPECIES))
    out[np.arange(len(species)), species - 1] = 1.0
    return out


def lattice_block(c: Crystal, mode="code6"):
    """Per-crystal lattice features: the 6-vector code, or the raw 9 entries of the stored lattice."""
    if mode == "code6":
        return lattice_decompose(c.lattice).code6
    if mode == "raw9":
        return np.asarray(c.lattice, dtype=float).reshape(9)
    raise ValueError(f"unknown lattice mode {mode!r}")


def rep_width(mode="code6"):
    return 3 + NUM_SPECIES + (6 if mode == "code6" else 9)


def crystal_rep(c: Crystal, lattice_mode="code6"):
    """Stack per-atom vectors [frac(3) | one-hot(100) | lattice block] into an N x width matrix."""
    lat = lattice_block(c, lattice_mode)
    n = c.num_atoms
    return np.hstack([c.frac_coords, one_hot_species(c.species), np.tile(lat, (n, 1))])


def split_rep(rep, lattice_mode="code6"):
    rep = np.asarray(rep, dtype=float)
    return rep[:, :3], rep[:, 3 : 3 + NUM_SPECIES], rep[:, 3 + NUM_SPECIES :]


# ---------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class Composition:
    counts: dict
    fractions: dict
    element_set: tuple

    @classmethod
    def from_species(cls, species: Iterable[int]):
        counts = {}
        for s in species:
            counts[int(s)] = counts.get(int(s), 0) + 1
        if not counts:
            raise InvalidCrystal("empty composition")
        total = sum(counts.values())
        keys = tuple(sorted(counts))
        return cls(
            counts={k: counts[k] for k in keys},
            fractions={k: counts[k] / total for k in keys},
            element_set=keys,
        )

    @classmethod
    def from_fractions(cls, fractions: dict):
        keys = tuple(sorted(int(k) for k in fractions))
        total = float(sum(fractions.values()))
        fr = {k: float(fractions[k]) / total for k in keys}
        if any(v <= 0 for v in fr.values()):
            raise InvalidCrystal("composition fractions must be positive")
        return cls(counts={}, fractions=fr, element_set=keys)

    def vector(self, system: Sequence[int]):
        """Fractions laid out over an ordered chemical system (zeros for absent species)."""
        return np.array([self.fractions.get(z, 0.0) for z in system])

    def reduced_key(self):
        """Hashable key identifying the composition up to scaling of counts."""
        if not self.counts:
            return tuple((k, round(v, 12)) for k, v in self.fractions.items())
        g = 0
        for v in self.counts.values():
            g = math.gcd(g, v)
        return tuple((k, v // g) for k, v in self.counts.items())


def composition_of(c: Crystal) -> Composition:
    return Composition.from_species(c.species)


def enumerate_subsystems(element_set: Sequence[int], max_arity=None):
    """All non-empty subsets, ordered by size then lexicographically."""
    els = tuple(sorted(set(int(e) for e in element_set)))
    if not els:
        raise ValueError("element_set must be non-empty")
    if max_arity is not None and len(els) > max_arity:
        raise ValueError(f"chemical system of arity {len(els)} exceeds max {max_arity}")
    out = []
    for k in range(1, len(els) + 1):
        out.extend(itertools.combinations(els, k))
    return out


# ---------------------------------------------------------------------------
# periodic geometry


def min_image_displacements(c: Crystal):
    """N x N x 3 Cartesian minimum-image displacement vectors (j minus i)."""
    x = c.frac_coords
    d = x[None, :, :] - x[:, None, :]
    d = d - np.round(d)
    cand = (d[:, :, None, :] + _SHIFTS[None, None, :, :]) @ c.lattice
    norms = np.einsum("ijkl,ijkl->ijk", cand, cand)
    best = np.argmin(norms, axis=2)
    n = c.num_atoms
    return cand[np.arange(n)[:, None], np.arange(n)[None, :], best]


def min_image_distances(c: Crystal):
    """Symmetric N x N matrix of minimum-image distances (zero diagonal)."""
    disp = min_image_displacements(c)
    dist = np.sqrt(np.einsum("ijk,ijk->ij", disp, disp))
    np.fill_diagonal(dist, 0.0)
    return 0.5 * (dist + dist.T)


def pair_distances(c: Crystal):
    """Sorted minimum-image distances over unordered atom pairs."""
    n = c.num_atoms
    if n < 2:
        return np.zeros(0)
    iu = np.triu_indices(n, 1)
    return np.sort(min_image_distances(c)[iu])


# ---------------------------------------------------------------------------
# file I/O


def _species_from_record(values):
    out = []
    for v in values:
        if isinstance(v, str):
            out.append(elements.atomic_number(v))
        else:
            out.append(int(v))
    return out


def crystal_from_record(rec: dict, max_atoms=MAX_ATOMS) -> Crystal:
    try:
        lattice = np.asarray(rec["lattice"], dtype=float).reshape(3, 3)
        coords = np.asarray(rec["frac_coords"], dtype=float).reshape(-1, 3)
        species = _species_from_record(rec["species"])
    except (KeyError, ValueError) as exc:
        raise InvalidCrystal(f"malformed crystal record: {exc}") from exc
    known = {"id", "lattice", "species", "frac_coords", "energy_per_atom", "e_form_per_atom"}
    meta = {k: v for k, v in rec.items() if k not in known}
    return Crystal(
        frac_coords=coords,
        species=tuple(species),
        lattice=lattice,
        id=str(rec.get("id", "")),
        energy_per_atom=rec.get("energy_per_atom"),
        e_form_per_atom=rec.get("e_form_per_atom"),
        meta=meta,
        max_atoms=max_atoms,
    )


def crystal_to_record(c: Crystal) -> dict:
    rec = {
        "id": c.id,
        "lattice": [float(v) for v in c.lattice.reshape(9)],
        "species": list(c.species),
        "frac_coords": [[float(v) for v in row] for row in c.frac_coords],
    }
    if c.energy_per_atom is not None:
        rec["energy_per_atom"] = float(c.energy_per_atom)
    if c.e_form_per_atom is not None:
        rec["e_form_per_atom"] = float(c.e_form_per_atom)
    rec.update(c.meta)
    return rec


def read_jsonl(path, max_atoms=MAX_ATOMS):
    """Read a crystal corpus; lines carrying a ``_meta`` key are header records and skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_meta" in rec:
                continue
            c = crystal_from_record(rec, max_atoms=max_atoms)
            if not c.id:
                c = c.replace(id=f"{Path(path).stem}-{lineno}")
            out.append(c)
    return out


def write_jsonl(crystals, path, meta=None):
    with open(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for c in crystals:
            fh.write(json.dumps(crystal_to_record(c)) + "\n")


# minimal CIF subset: cell parameters, P1 only, fractional sites with element symbols

_CELL_TAGS = (
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
)
_INFO_TAGS = re.compile(
    r"^_(chemical_formula_\w+|chemical_name_\w+|cell_volume|cell_formula_units_Z|audit_\w+"
    r"|symmetry_space_group_name_H-M|space_group_name_H-M_alt|symmetry_Int_Tables_number"
    r"|space_group_IT_number)$"
)
_SITE_COLS = {
    "_atom_site_type_symbol",
    "_atom_site_label",
    "_atom_site_fract_x",
    "_atom_site_fract_y",
    "_atom_site_fract_z",
    "_atom_site_occupancy",
    "_atom_site_symmetry_multiplicity",
}
_SYMOP_COLS = {
    "_symmetry_equiv_pos_as_xyz",
    "_space_group_symop_operation_xyz",
    "_symmetry_equiv_pos_site_id",
    "_space_group_symop_id",
}


def _cif_number(tok):
    return float(re.sub(r"\(\d+\)$", "", tok))


def _cif_tokens(line):
    return re.findall(r"'[^']*'|\"[^\"]*\"|\S+", line)


def read_cif(path_or_text, id=None) -> Crystal:
    """Parse the supported CIF subset; anything outside it raises CifError."""
    text = str(path_or_text)
    if "\n" not in text and Path(text).exists():
        if id is None:
            id = Path(text).stem
        text = Path(text).read_text()
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    cell = {}
    sites = None
    i = 0
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("data_"):
            i += 1
            continue
        if ln == "loop_":
            cols = []
            i += 1
            while i < len(lines) and lines[i].startswith("_"):
                cols.append(lines[i].split()[0])
                i += 1
            rows = []
            while i < len(lines) and not lines[i].startswith("_") and lines[i] != "loop_" and not lines[i].startswith("data_"):
                rows.append(_cif_tokens(lines[i]))
                i += 1
            if set(cols) <= _SYMOP_COLS:
                ops = [r[-1].strip("'\"").replace(" ", "").lower() for r in rows]
                if ops != ["x,y,z"]:
                    raise CifError(f"only the identity symmetry operation is supported, got {ops}")
                continue
            if any(c.startswith("_atom_site_") for c in cols):
                extra = set(cols) - _SITE_COLS
                if extra:
                    raise CifError(f"unsupported atom_site columns {sorted(extra)}")
                sites = (cols, rows)
                continue
            raise CifError(f"unsupported loop with columns {cols}")
        if ln.startswith("_"):
            toks = _cif_tokens(ln)
            tag = toks[0]
            if len(toks) < 2:
                if i + 1 >= len(lines):
                    raise CifError(f"missing value for {tag}")
                toks.append(lines[i + 1])
                i += 1
            value = toks[1].strip("'\"")
            if tag in _CELL_TAGS:
                cell[tag] = _cif_number(value)
            elif tag in ("_symmetry_space_group_name_H-M", "_space_group_name_H-M_alt"):
                if value.replace(" ", "").upper() != "P1":
                    raise CifError(f"only P1 structures are supported, got {value!r}")
            elif tag in ("_symmetry_Int_Tables_number", "_space_group_IT_number"):
                if int(value) != 1:
                    raise CifError(f"only space group 1 is supported, got {value}")
            elif not _INFO_TAGS.match(tag):
                raise CifError(f"unsupported CIF tag {tag}")
            i += 1
            continue
        raise CifError(f"unparseable CIF line: {ln!r}")
    missing = [t for t in _CELL_TAGS if t not in cell]
    if missing:
        raise CifError(f"missing cell parameters {missing}")
    if sites is None or not sites[1]:
        raise CifError("no atom sites")
    cols, rows = sites
    col = {name: k for k, name in enumerate(cols)}
    for need in ("_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"):
        if need not in col:
            raise CifError(f"missing column {need}")
    species, coords = [], []
    for r in rows:
        if len(r) != len(cols):
            raise CifError(f"atom_site row has {len(r)} fields, expected {len(cols)}")
        if "_atom_site_occupancy" in col and abs(_cif_number(r[col["_atom_site_occupancy"]]) - 1.0) > 1e-6:
            raise CifError("partial occupancies are not supported")
        if "_atom_site_symmetry_multiplicity" in col and int(r[col["_atom_site_symmetry_multiplicity"]]) != 1:
            raise CifError("site multiplicities other than 1 are not supported")
        if "_atom_site_type_symbol" in col:
            sym = re.match(r"[A-Z][a-z]?", r[col["_atom_site_type_symbol"]])
        elif "_atom_site_label" in col:
            sym = re.match(r"[A-Z][a-z]?", r[col["_atom_site_label"]])
        else:
            raise CifError("atom sites need a type symbol or label")
        if sym is None:
            raise CifError(f"cannot read element from row {r}")
        try:
            species.append(elements.atomic_number(sym.group(0)))
        except KeyError as exc:
            raise CifError(str(exc)) from exc
        coords.append([_cif_number(r[col[k]]) for k in ("_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z")])
    lattice = lattice_from_parameters(*(cell[t] for t in _CELL_TAGS))
    return Crystal(np.array(coords), tuple(species), lattice, id=id or "")


def write_cif(c: Crystal) -> str:
    lengths, angles = lattice_parameters(c.lattice)
    out = [f"data_{c.id or 'crystal'}", "_symmetry_space_group_name_H-M 'P 1'"]
    for tag, v in zip(_CELL_TAGS, list(lengths) + list(angles)):
        out.append(f"{tag} {v:.10f}")
    out += ["loop_", "_atom_site_type_symbol", "_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"]
    for z, x in zip(c.species, c.frac_coords):
        out.append(f"{elements.symbol(z)} {x[0]:.12f} {x[1]:.12f} {x[2]:.12f}")
    return "\n".join(out) + "\n"
