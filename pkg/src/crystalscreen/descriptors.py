"""Structural and compositional fingerprints, the fingerprint distance to a
reference corpus, and cumulative metric curves along that distance.

The fingerprints are small stand-ins for coordination-environment and
element-property descriptors; any externally computed vectors can be loaded
from CSV and fed to the same distance code.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import elements
from .crystal_core import Composition, Crystal, lattice_parameters
from .errors import EmptyCorpus

RADII = (1.5, 2.5, 3.5, 5.0)
PROPERTIES = ("electronegativity", "Z", "row", "group")
STR_WIDTH = 4 * len(RADII) + 6
COM_WIDTH = 5 * len(PROPERTIES)


@dataclass(frozen=True)
class Fingerprint:
    fp_str: np.ndarray
    fp_com: np.ndarray
    id: str = ""


def _image_shifts(lattice, cutoff):
    inv = np.linalg.inv(lattice)
    reach = np.ceil(cutoff * np.linalg.norm(inv, axis=0)).astype(int) + 1
    axes = [np.arange(-k, k + 1) for k in reach]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3).astype(float)


def neighbor_counts(c: Crystal, radii=RADII):
    """(N, len(radii)) counts of periodic neighbors with 0 < r <= radius, every image included."""
    rmax = max(radii)
    x = c.frac_coords
    d = x[None, :, :] - x[:, None, :]
    d = d - np.round(d)
    cart = (d[:, :, None, :] + _image_shifts(c.lattice, rmax)[None, None]) @ c.lattice
    r = np.sqrt(np.einsum("ijkl,ijkl->ijk", cart, cart)).reshape(c.num_atoms, -1)
    r = np.where(r > 1e-8, r, np.inf)
    # tolerance keeps shells sitting exactly on a radius stable under rotation round-off
    return np.stack([(r <= rc + 1e-9).sum(axis=1) for rc in radii], axis=1).astype(float)


def structural_fingerprint(c: Crystal, radii=RADII):
    counts = neighbor_counts(c, radii)
    stats = np.concatenate([counts.mean(axis=0), counts.std(axis=0), counts.min(axis=0), counts.max(axis=0)])
    lengths, angles = lattice_parameters(c.lattice)
    shape = np.concatenate([np.asarray(lengths) / c.volume ** (1.0 / 3.0), np.asarray(angles) / 180.0])
    return np.concatenate([stats, shape])


def _property(z, name):
    if name == "Z":
        return float(z)
    v = getattr(elements, name)(z)
    return None if v is None else float(v)


def compositional_fingerprint(species):
    """Fraction-weighted (mean, std, min, max, range) of each property, scaled to [0, 1] by the table range.

    A missing electronegativity (noble gases) takes the bottom of the range.
    """
    comp = Composition.from_species(species.species if isinstance(species, Crystal) else species)
    zs = list(comp.element_set)
    w = np.array([comp.fractions[z] for z in zs])
    out = []
    for name in PROPERTIES:
        lo, hi = elements.property_range(name)
        raw = [_property(z, name) for z in zs]
        vals = np.array([((lo if v is None else v) - lo) / (hi - lo) for v in raw])
        mean = float(w @ vals)
        std = math.sqrt(float(w @ (vals - mean) ** 2))
        out.extend([mean, std, vals.min(), vals.max(), vals.max() - vals.min()])
    return np.array(out)


def fingerprint(c: Crystal) -> Fingerprint:
    return Fingerprint(structural_fingerprint(c), compositional_fingerprint(c), c.id)


# ---------------------------------------------------------------------------
# distance to a reference corpus


@dataclass
class DistanceReport:
    d: np.ndarray
    d_str: np.ndarray
    d_com: np.ndarray
    alpha: float
    beta: float
    ids: list


def _stack(items):
    fps = [x if isinstance(x, Fingerprint) else fingerprint(x) for x in items]
    return np.stack([f.fp_str for f in fps]), np.stack([f.fp_com for f in fps]), [f.id for f in fps]


def distance_to_set(gen, gt) -> DistanceReport:
    """Per generated crystal: min squared fingerprint distance to gt in each space, each divided by its max over gen, summed.

    Inputs may be crystals or precomputed Fingerprint objects. A component whose
    maximum is zero contributes zero.
    """
    gen, gt = list(gen), list(gt)
    if not gen or not gt:
        raise EmptyCorpus("distance_to_set needs non-empty generated and reference corpora")
    gs, gc, ids = _stack(gen)
    rs, rc, _ = _stack(gt)
    d_str = _exact_min(gs, rs)
    d_com = _exact_min(gc, rc)
    alpha = float(d_str.max())
    beta = float(d_com.max())
    d = (d_str / alpha if alpha > 0 else np.zeros_like(d_str)) + (d_com / beta if beta > 0 else np.zeros_like(d_com))
    return DistanceReport(d, d_str, d_com, alpha, beta, ids)


def _exact_min(a, b):
    # the argmin of the expanded form may miss near-ties, so take the exact min over all pairs in chunks
    out = np.empty(len(a))
    for s in range(0, len(a), 256):
        x = a[s : s + 256]
        out[s : s + 256] = ((x[:, None, :] - b[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    return out


# ---------------------------------------------------------------------------
# percentile curves


def tradeoff_curves(rows, distances, bins=20):
    """Cumulative S, N and S*U*N fractions after sorting by distance ascending.

    rows carry boolean attributes s, u, n (VerdictRow or similar). Returns a list
    of dicts with keys percentile, cum_S, cum_N, cum_SUN; the crystals counted at
    percentile p are the first ceil(p/100 * len) in sorted order.
    """
    rows = list(rows)
    d = np.asarray(distances, dtype=float)
    if len(rows) != len(d):
        raise ValueError("one distance per verdict row is required")
    if not rows:
        return []
    order = np.argsort(d, kind="stable")
    s = np.array([rows[i].s for i in order], dtype=float)
    n = np.array([rows[i].n for i in order], dtype=float)
    sun = np.array([rows[i].s and rows[i].u and rows[i].n for i in order], dtype=float)
    cs, cn, csun = np.cumsum(s), np.cumsum(n), np.cumsum(sun)
    out = []
    for k in range(1, bins + 1):
        p = 100.0 * k / bins
        m = max(1, math.ceil(p / 100.0 * len(rows) - 1e-9))
        out.append({"percentile": p, "cum_S": cs[m - 1] / m, "cum_N": cn[m - 1] / m, "cum_SUN": csun[m - 1] / m})
    return out


# ---------------------------------------------------------------------------
# CSV exchange


def write_fingerprint_csv(fps, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for f in fps:
            w.writerow([f.id] + [repr(float(v)) for v in f.fp_str] + [repr(float(v)) for v in f.fp_com])


def read_fingerprint_csv(path, str_width=STR_WIDTH):
    """Rows of: id, then str_width structural columns, then compositional columns.

    Every row must have the same width.
    """
    out = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            vals = np.array([float(v) for v in row[1:]])
            if width is None:
                width = len(vals)
            if len(vals) != width or width <= str_width:
                raise ValueError(f"{path}:{lineno}: expected {width} values with more than {str_width} structural columns")
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{path}:{lineno}: non-finite fingerprint value")
            out.append(Fingerprint(vals[:str_width], vals[str_width:], row[0]))
    return out
