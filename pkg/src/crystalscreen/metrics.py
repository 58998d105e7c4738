"""Validity, stability, uniqueness and novelty verdicts plus the composite rates."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import elements
from .crystal_core import Composition, Crystal, composition_of, pair_distances
from .errors import CrystalScreenError
from .phase_diagram import HullEntry, PhaseDiagram, energy_above_hull

MIN_VOLUME = 0.1
MIN_DISTANCE = 0.5
MATCH_DIST_TOL = 0.1
MATCH_VOLUME_TOL = 0.05
DEFAULT_EPSILON = 0.1


# ---------------------------------------------------------------------------
# validity


@dataclass(frozen=True)
class ValidityVerdict:
    valid: bool
    structural: bool
    compositional: bool
    reasons: tuple = ()


def charge_neutral(species) -> bool:
    """True when one oxidation state per element makes the cell neutral.

    Single-element cells count as neutral (metals and elemental solids).
    """
    counts = Composition.from_species(species).counts
    if len(counts) == 1:
        return True
    choices = [elements.oxidation_states(z) for z in counts]
    if any(len(c) == 0 for c in choices):
        return False
    n = [counts[z] for z in counts]
    for states in itertools.product(*choices):
        if sum(q * k for q, k in zip(states, n)) == 0:
            return True
    return False


def min_distance(c: Crystal) -> float:
    """Smallest minimum-image distance between distinct atoms; inf for a one-atom cell."""
    d = pair_distances(c)
    return float(d[0]) if len(d) else float("inf")


def validity(c: Crystal, en_threshold=0.0) -> ValidityVerdict:
    """Structural (volume, closest pair) and compositional (charge, electronegativity) checks."""
    struct = []
    if c.volume <= MIN_VOLUME:
        struct.append("volume_too_small")
    if min_distance(c) <= MIN_DISTANCE:
        struct.append("atoms_too_close")
    comp = []
    if not charge_neutral(c.species):
        comp.append("not_charge_neutral")
    if en_threshold > 0:
        en = [elements.electronegativity(z) for z in set(c.species)]
        if any(v is None for v in en):
            comp.append("electronegativity_unknown")
        elif max(en) - min(en) < en_threshold:
            comp.append("electronegativity_difference")
    return ValidityVerdict(not struct and not comp, not struct, not comp, tuple(struct + comp))


# ---------------------------------------------------------------------------
# structure matching


@dataclass(frozen=True)
class Signature:
    composition: tuple
    n: int
    distances: np.ndarray = field(compare=False)
    volume: float


def signature(c: Crystal) -> Signature:
    comp = tuple(sorted(composition_of(c).counts.items()))
    return Signature(comp, c.num_atoms, pair_distances(c), c.volume)


def signatures_match(a: Signature, b: Signature, dist_tol=MATCH_DIST_TOL, volume_tol=MATCH_VOLUME_TOL) -> bool:
    if a.composition != b.composition or a.n != b.n:
        return False
    if abs(a.volume - b.volume) > volume_tol * max(a.volume, b.volume):
        return False
    return len(a.distances) == 0 or float(np.max(np.abs(a.distances - b.distances))) <= dist_tol


def structures_match(a: Crystal, b: Crystal, **tol) -> bool:
    return signatures_match(signature(a), signature(b), **tol)


def uniqueness(corpus) -> np.ndarray:
    """First member of each match class is unique; later members matching a kept representative are not."""
    sigs = [signature(c) for c in corpus]
    reps: dict = {}
    mask = np.zeros(len(sigs), dtype=bool)
    for i, s in enumerate(sigs):
        bucket = reps.setdefault((s.composition, s.n), [])
        if not any(signatures_match(s, r) for r in bucket):
            bucket.append(s)
            mask[i] = True
    return mask


class NoveltyIndex:
    """Reference signatures bucketed by composition for repeated novelty queries."""

    def __init__(self, ref):
        self.buckets: dict = {}
        for c in ref:
            s = signature(c)
            self.buckets.setdefault((s.composition, s.n), []).append(s)

    def is_novel(self, c: Crystal) -> bool:
        s = signature(c)
        return not any(signatures_match(s, r) for r in self.buckets.get((s.composition, s.n), ()))


def novelty(gen, ref) -> np.ndarray:
    idx = NoveltyIndex(ref)
    return np.array([idx.is_novel(c) for c in gen], dtype=bool)


# ---------------------------------------------------------------------------
# stability and composites


@dataclass
class VerdictRow:
    id: str
    v: bool
    s: bool
    u: bool
    n: bool
    delta_e: float | None = None
    reasons: tuple = ()

    def __post_init__(self):
        if self.s and self.delta_e is None:
            raise ValueError("a stable verdict needs delta_e")


def stability(crystals, pd: PhaseDiagram, energy_fn, epsilon=DEFAULT_EPSILON):
    """(stable flags, delta_e or None) per crystal; hull failures are unstable with delta_e None."""
    flags, des = [], []
    for c in crystals:
        try:
            e = energy_fn(c)
            de = energy_above_hull(HullEntry(composition_of(c), e, c.id), pd).delta_e
        except CrystalScreenError:
            flags.append(False)
            des.append(None)
            continue
        des.append(float(de))
        flags.append(bool(de < epsilon))
    return flags, des


def evaluate(gen, ref, pd: PhaseDiagram, energy_fn, epsilon=DEFAULT_EPSILON, en_threshold=0.0):
    """Verdict rows for a generated corpus against a reference corpus and phase diagram."""
    gen = list(gen)
    val = [validity(c, en_threshold) for c in gen]
    s, de = stability(gen, pd, energy_fn, epsilon)
    u = uniqueness(gen) if gen else np.zeros(0, dtype=bool)
    n = novelty(gen, ref) if gen else np.zeros(0, dtype=bool)
    return [
        VerdictRow(c.id, val[i].valid, s[i], bool(u[i]), bool(n[i]), de[i], val[i].reasons) for i, c in enumerate(gen)
    ]


def composite(rows) -> dict:
    rows = list(rows)
    if not rows:
        raise ValueError("no verdict rows")
    v = np.array([r.v for r in rows], dtype=float)
    s = np.array([r.s for r in rows], dtype=float)
    u = np.array([r.u for r in rows], dtype=float)
    n = np.array([r.n for r in rows], dtype=float)
    return {
        "S_rate": float(s.mean()),
        "N_rate": float(n.mean()),
        "V_rate": float(v.mean()),
        "U_rate": float(u.mean()),
        "SUN": float((s * u * n).mean()),
        "VSUN": float((v * s * u * n).mean()),
        "count": len(rows),
    }
