"""Analytic energy oracle standing in for DFT / force-field energies.

Energy per atom is a species-parameterized Morse pair potential summed over
all periodic images within the cutoff and divided by N. For cells wider than
twice the cutoff this is the minimum-image pair sum. It depends only on
interatomic distances, so translation, rotation and atom permutation leave it
unchanged, and it is intensive (a supercell has the same energy per atom).
"""

from __future__ import annotations

import math
from typing import Protocol

import numpy as np
from scipy.optimize import minimize

from . import elements
from .crystal_core import Crystal, wrap_frac


class EnergyOracle(Protocol):
    def energy_per_atom(self, c: Crystal) -> float: ...


class MorseOracle:
    """Morse pairs with a cosine taper between r_on and r_cut.

    Per-species radius and well depth come from a seeded table; unlike pairs
    bind more strongly in proportion to their electronegativity difference so
    that mixed compounds have negative formation energies.
    """

    def __init__(self, seed=0, stiffness=3.0, r_on=3.5, r_cut=4.5, ionic_boost=1.5, depth_range=(0.05, 0.25)):
        rng = np.random.default_rng(seed)
        n = elements.MAX_Z
        self.seed = seed
        self.radius = rng.uniform(0.85, 1.45, size=n + 1)
        self.depth = rng.uniform(*depth_range, size=n + 1)
        self.en = np.array([0.0] + [elements.electronegativity(z) or 0.0 for z in range(1, n + 1)])
        self.stiffness = stiffness
        self.r_on = r_on
        self.r_cut = r_cut
        self.ionic_boost = ionic_boost

    def pair_params(self, a, b):
        """(well depth eV, equilibrium distance Å) for a species pair."""
        d = math.sqrt(self.depth[a] * self.depth[b])
        if a != b:
            d *= 1.0 + self.ionic_boost * abs(self.en[a] - self.en[b])
        return d, self.radius[a] + self.radius[b]

    def _pair_tables(self, species):
        s = np.asarray(species)
        depth = np.sqrt(np.outer(self.depth[s], self.depth[s]))
        ionic = 1.0 + self.ionic_boost * np.abs(self.en[s][:, None] - self.en[s][None, :])
        ionic[s[:, None] == s[None, :]] = 1.0
        r0 = self.radius[s][:, None] + self.radius[s][None, :]
        return depth * ionic, r0

    def pair_energy(self, r, depth, r0):
        """phi(r) and dphi/dr, vectorized."""
        r = np.asarray(r, dtype=float)
        e = np.exp(-self.stiffness * (r - r0))
        phi = depth * (e * e - 2.0 * e)
        dphi = depth * (-2.0 * self.stiffness * e * e + 2.0 * self.stiffness * e)
        span = self.r_cut - self.r_on
        x = np.clip((r - self.r_on) / span, 0.0, 1.0)
        taper = np.where(r >= self.r_cut, 0.0, np.where(r < self.r_on, 1.0, 0.5 * (1.0 + np.cos(math.pi * x))))
        dtaper = np.where((r >= self.r_on) & (r < self.r_cut), -0.5 * math.pi * np.sin(math.pi * x) / span, 0.0)
        return phi * taper, dphi * taper + phi * dtaper

    def image_shifts(self, lattice):
        """Integer lattice shifts covering every image within r_cut of a wrapped displacement."""
        inv = np.linalg.inv(lattice)
        reach = np.ceil(self.r_cut * np.linalg.norm(inv, axis=0)).astype(int) + 1
        axes = [np.arange(-k, k + 1) for k in reach]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3).astype(float)

    def energy_and_forces(self, c: Crystal):
        """Energy per atom and d(E_total)/d(cartesian positions), shape (N, 3).

        E_total = 1/2 sum_i sum_j sum_images phi(r), excluding each atom's zero-shift self term.
        """
        n = c.num_atoms
        x = c.frac_coords
        d = x[None, :, :] - x[:, None, :]
        d = d - np.round(d)
        shifts = self.image_shifts(c.lattice)
        cart = (d[:, :, None, :] + shifts[None, None, :, :]) @ c.lattice
        r = np.sqrt(np.einsum("ijkl,ijkl->ijk", cart, cart))
        inside = (r < self.r_cut) & (r > 1e-12)
        ii, jj, kk = np.nonzero(inside)
        if len(ii) == 0:
            return 0.0, np.zeros((n, 3))
        depth, r0 = self._pair_tables(c.species)
        rr = r[ii, jj, kk]
        phi, dphi = self.pair_energy(rr, depth[ii, jj], r0[ii, jj])
        total = 0.5 * float(np.sum(phi))
        # ordered (i, j, image) terms: dr/dx_j = unit, dr/dx_i = -unit; the 1/2 undoes the double count
        contrib = 0.5 * dphi[:, None] * cart[ii, jj, kk] / rr[:, None]
        grad = np.zeros((n, 3))
        np.add.at(grad, jj, contrib)
        np.add.at(grad, ii, -contrib)
        return total / n, grad

    def energy_and_gradients(self, c: Crystal):
        """Energy per atom, dE_total/d(fractional coords) (N, 3) and dE_total/d(lattice) (3, 3).

        Pair vectors are (x_j - x_i + shift) @ lattice, so both gradients follow
        from the same per-term dE/d(cart) by the chain rule.
        """
        n = c.num_atoms
        x = c.frac_coords
        d = x[None, :, :] - x[:, None, :]
        d = d - np.round(d)
        shifts = self.image_shifts(c.lattice)
        frac = d[:, :, None, :] + shifts[None, None, :, :]
        cart = frac @ c.lattice
        r = np.sqrt(np.einsum("ijkl,ijkl->ijk", cart, cart))
        ii, jj, kk = np.nonzero((r < self.r_cut) & (r > 1e-12))
        if len(ii) == 0:
            return 0.0, np.zeros((n, 3)), np.zeros((3, 3))
        depth, r0 = self._pair_tables(c.species)
        rr = r[ii, jj, kk]
        phi, dphi = self.pair_energy(rr, depth[ii, jj], r0[ii, jj])
        g_cart = 0.5 * dphi[:, None] * cart[ii, jj, kk] / rr[:, None]
        g_x = np.zeros((n, 3))
        np.add.at(g_x, jj, g_cart)
        np.add.at(g_x, ii, -g_cart)
        g_lat = frac[ii, jj, kk].T @ g_cart
        return 0.5 * float(np.sum(phi)) / n, g_x @ c.lattice.T, g_lat

    def energy_per_atom(self, c: Crystal) -> float:
        return self.energy_and_forces(c)[0]

    def __call__(self, c: Crystal) -> float:
        return self.energy_per_atom(c)


_DEFAULT = {}


def default_oracle(seed=0) -> MorseOracle:
    if seed not in _DEFAULT:
        _DEFAULT[seed] = MorseOracle(seed)
    return _DEFAULT[seed]


def oracle_energy(c: Crystal, oracle=None) -> float:
    return (oracle or default_oracle()).energy_per_atom(c)


class IdentityRelaxer:
    def __call__(self, c: Crystal) -> Crystal:
        return c


class GradientRelaxer:
    """Coordinates-only steepest descent on the oracle; the largest per-atom move per step is step_size Å."""

    def __init__(self, oracle=None, steps=50, step_size=1e-2):
        self.oracle = oracle or default_oracle()
        self.steps = steps
        self.step_size = step_size

    def __call__(self, c: Crystal) -> Crystal:
        inv = np.linalg.inv(c.lattice)
        cur = c
        for _ in range(self.steps):
            _, g = self.oracle.energy_and_forces(cur)
            gmax = np.linalg.norm(g, axis=1).max()
            if gmax < 1e-10:
                break
            cart = cur.cart_coords - self.step_size * g / gmax
            cur = cur.replace(frac_coords=wrap_frac(cart @ inv))
        return cur


class FullRelaxer:
    """L-BFGS on fractional coordinates and lattice together, minimizing energy per atom.

    Cells whose determinant would fall below min_volume_per_atom * N stop the
    relaxation and the last admissible iterate is returned.
    """

    def __init__(self, oracle=None, max_iter=200, gtol=1e-6, min_volume_per_atom=1.0):
        self.oracle = oracle or default_oracle()
        self.max_iter = max_iter
        self.gtol = gtol
        self.min_volume_per_atom = min_volume_per_atom

    def _unpack(self, c, v):
        n = c.num_atoms
        return c.replace(frac_coords=v[: 3 * n].reshape(n, 3), lattice=v[3 * n :].reshape(3, 3))

    def __call__(self, c: Crystal) -> Crystal:
        n = c.num_atoms
        floor = self.min_volume_per_atom * n

        def fun(v):
            lat = v[3 * n :].reshape(3, 3)
            if np.linalg.det(lat) < floor:
                # outside the admissible region: a steep wall pushes the line search back
                return 1e6, np.zeros_like(v)
            e, gx, gl = self.oracle.energy_and_gradients(self._unpack(c, v))
            return e, np.concatenate([gx.ravel(), gl.ravel()]) / n

        v0 = np.concatenate([c.frac_coords.ravel(), c.lattice.ravel()])
        res = minimize(fun, v0, jac=True, method="L-BFGS-B", options={"maxiter": self.max_iter, "gtol": self.gtol})
        v = res.x if np.isfinite(res.fun) and res.fun <= fun(v0)[0] else v0
        out = self._unpack(c, v)
        return out.replace(frac_coords=wrap_frac(out.frac_coords))
