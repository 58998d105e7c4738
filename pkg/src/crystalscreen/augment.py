"""Energy-preserving context construction: wrapped translation and Haar-uniform lattice rotation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .crystal_core import Crystal, lattice_decompose, wrap_frac
from .errors import NotARotation


@dataclass(frozen=True)
class AugmentParams:
    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3)
        r = np.asarray(self.r, dtype=float).reshape(3)
        if np.any(t < 0) or np.any(t >= 1):
            raise ValueError(f"translation must lie in [0,1)^3, got {t}")
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError(f"rotation parameters must lie in [0,1]^3, got {r}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    @classmethod
    def identity(cls):
        # half-turn about z cancels the reflection through the xy-plane: U = I
        return cls(np.zeros(3), np.array([0.5, 0.0, 0.0]))

    @classmethod
    def sample(cls, rng: np.random.Generator):
        t = rng.random(3)
        r = rng.random(3)
        return cls(t, r)

    def vector(self):
        """Conditioning vector [t || r] of length 6."""
        return np.concatenate([self.t, self.r])


def translate(c: Crystal, t) -> Crystal:
    t = np.asarray(t, dtype=float).reshape(1, 3)
    return c.replace(frac_coords=wrap_frac(c.frac_coords + t))


def rotation_from_params(r) -> np.ndarray:
    """Fast random rotation: z-rotation by 2*pi*r1 composed with a Householder reflection.

    Uniform r on the unit cube maps to the Haar measure on SO(3).
    """
    r1, r2, r3 = (float(v) for v in np.asarray(r, dtype=float).reshape(3))
    theta = 2.0 * math.pi * r1
    phi = 2.0 * math.pi * r2
    ct, st = math.cos(theta), math.sin(theta)
    rz = np.array([[ct, st, 0.0], [-st, ct, 0.0], [0.0, 0.0, 1.0]])
    sz = math.sqrt(r3)
    v = np.array([math.cos(phi) * sz, math.sin(phi) * sz, math.sqrt(1.0 - r3)])
    house = np.eye(3) - 2.0 * np.outer(v, v)
    return -house @ rz


def check_rotation(u, tol=1e-6):
    u = np.asarray(u, dtype=float)
    if u.shape != (3, 3):
        raise NotARotation(f"expected a 3x3 matrix, got shape {u.shape}")
    dev = np.abs(u.T @ u - np.eye(3)).max()
    if dev > tol or np.linalg.det(u) <= 0:
        raise NotARotation(f"matrix deviates from SO(3) (orthogonality error {dev:.3g})")
    return u


def rotate(c: Crystal, u) -> Crystal:
    """Replace the lattice by sym @ u, where sym is the symmetric polar factor of c.lattice."""
    u = check_rotation(u)
    sym = lattice_decompose(c.lattice).sym
    return c.replace(lattice=sym @ u)


def make_context(c: Crystal, params: AugmentParams) -> Crystal:
    return rotate(translate(c, params.t), rotation_from_params(params.r))
