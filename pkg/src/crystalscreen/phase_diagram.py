"""Convex hull in composition-energy space, energy above hull and the stability predicate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .crystal_core import Composition, Crystal, composition_of, enumerate_subsystems
from .errors import InfeasibleComposition, MissingElementalReference
from .simplex import solve_equality_lp

DEFAULT_EPSILON = 0.1
SPACES = ("formation", "total")


@dataclass(frozen=True)
class HullEntry:
    composition: Composition
    e_total_per_atom: float
    id: str = ""

    def __post_init__(self):
        if not math.isfinite(self.e_total_per_atom):
            raise ValueError(f"entry {self.id!r} has non-finite energy")

    @classmethod
    def from_crystal(cls, c: Crystal, energy=None):
        e = c.energy_per_atom if energy is None else energy
        if e is None:
            raise ValueError(f"crystal {c.id!r} has no energy_per_atom")
        return cls(composition_of(c), float(e), c.id)

    @property
    def element_set(self):
        return self.composition.element_set


@dataclass
class HullResult:
    delta_e: float
    hull_energy_formation: float | None
    hull_energy_total: float
    support: list


class PhaseDiagram:
    """Reference entries over a chemical system. Immutable after construction.

    Query entries are never inserted; evaluating a reference entry against the
    diagram therefore includes it in its own hull, while a generated crystal
    is judged against the references only.
    """

    def __init__(self, entries, chemical_system=None):
        entries = list(entries)
        if chemical_system is None:
            chemical_system = sorted({z for e in entries for z in e.element_set})
        self.chemical_system = tuple(sorted(int(z) for z in chemical_system))
        allowed = set(self.chemical_system)
        self.entries = tuple(e for e in entries if set(e.element_set) <= allowed)
        self._by_elset = {}
        for k, e in enumerate(self.entries):
            self._by_elset.setdefault(tuple(e.element_set), []).append(k)
        refs = {}
        for e in self.entries:
            if len(e.element_set) == 1:
                z = e.element_set[0]
                refs[z] = min(refs.get(z, math.inf), e.e_total_per_atom)
        self.elemental_refs = refs

    @classmethod
    def from_crystals(cls, crystals, chemical_system=None):
        return cls([HullEntry.from_crystal(c) for c in crystals], chemical_system)

    def __len__(self):
        return len(self.entries)

    def subsystem_entries(self, element_set):
        idx = []
        for sub in enumerate_subsystems(element_set):
            idx.extend(self._by_elset.get(tuple(sub), ()))
        return [self.entries[k] for k in sorted(idx)]

    def reference_energy(self, composition: Composition):
        """Composition-weighted elemental reference energy sum_i f_i mu_i."""
        missing = [z for z in composition.element_set if z not in self.elemental_refs]
        if missing:
            raise MissingElementalReference(f"no single-species entry for elements {missing}")
        return sum(f * self.elemental_refs[z] for z, f in composition.fractions.items())


def _check_space(space):
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}, got {space!r}")


def formation_energy(entry: HullEntry, pd: PhaseDiagram):
    return entry.e_total_per_atom - pd.reference_energy(entry.composition)


def hull_energy(f: Composition, pd: PhaseDiagram, space="total"):
    """Lower convex envelope at composition f; returns (energy, support [(id, weight)])."""
    _check_space(space)
    if not set(f.element_set) <= set(pd.chemical_system):
        raise InfeasibleComposition(f"composition {f.element_set} outside system {pd.chemical_system}")
    cands = pd.subsystem_entries(f.element_set)
    if not cands:
        raise InfeasibleComposition(f"no reference entries within {f.element_set}")
    system = f.element_set
    A = np.vstack([np.array([e.composition.vector(system) for e in cands]).T, np.ones(len(cands))])
    b = np.append(f.vector(system), 1.0)
    if space == "total":
        costs = np.array([e.e_total_per_atom for e in cands])
    else:
        costs = np.array([formation_energy(e, pd) for e in cands])
    res = solve_equality_lp(costs, A, b)
    support = [(cands[j].id, float(res.x[j])) for j in res.basis if res.x[j] > 1e-12]
    support.sort(key=lambda s: s[0])
    return res.objective, support


def energy_above_hull(entry: HullEntry, pd: PhaseDiagram, space="total") -> HullResult:
    _check_space(space)
    f = entry.composition
    if space == "total":
        e_hull, support = hull_energy(f, pd, "total")
        e_hull_form = None
        if all(z in pd.elemental_refs for z in f.element_set):
            e_hull_form = e_hull - pd.reference_energy(f)
        return HullResult(entry.e_total_per_atom - e_hull, e_hull_form, e_hull, support)
    e_form = formation_energy(entry, pd)
    e_hull_form, support = hull_energy(f, pd, "formation")
    e_hull_total = e_hull_form + pd.reference_energy(f)
    return HullResult(e_form - e_hull_form, e_hull_form, e_hull_total, support)


def is_stable(entry: HullEntry, pd: PhaseDiagram, epsilon=DEFAULT_EPSILON, space="total"):
    return energy_above_hull(entry, pd, space).delta_e < epsilon
