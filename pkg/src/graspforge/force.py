"""Friction-cone basis and local/global contact forces.

Forces are dimensionless multiples of the object's weight (|G| = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidParameter


@dataclass(frozen=True)
class FrictionConeBasis:
    mu: float
    n_v: int
    vectors: np.ndarray  # (n_v, 3), row j-1 holds v_j


def cone_basis(mu=1.0, n_v=12) -> FrictionConeBasis:
    """Pyramid approximation of the friction cone, v_j = (mu sin a_j, mu cos a_j, 1), a_j = 2 pi j / n_v."""
    if not mu > 0:
        raise InvalidParameter("friction coefficient must be positive")
    if int(n_v) != n_v or n_v < 3:
        raise InvalidParameter("need at least 3 cone basis vectors")
    n_v = int(n_v)
    a = 2.0 * np.pi * np.arange(1, n_v + 1) / n_v
    v = np.stack([mu * np.sin(a), mu * np.cos(a), np.ones(n_v)], axis=1)
    v.setflags(write=False)
    return FrictionConeBasis(float(mu), n_v, v)


@dataclass
class ForceCoefficients:
    w: np.ndarray  # (K, n_v), rows on the simplex
    s: np.ndarray  # (K,), nonnegative

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        if self.w.ndim != 2 or self.s.shape != (self.w.shape[0],):
            raise DimensionMismatch(f"w {self.w.shape} and s {self.s.shape} do not match")
        if np.any(self.w < -1e-12) or not np.allclose(self.w.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidParameter("rows of w must lie on the simplex")
        if np.any(self.s < 0):
            raise InvalidParameter("magnitudes s must be nonnegative")

    def to_dict(self):
        return {"w": self.w.tolist(), "s": self.s.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["w"], dtype=float), np.array(d["s"], dtype=float))


def local_forces(c: ForceCoefficients, b: FrictionConeBasis):
    """F'_k = s_k * sum_j w_kj v_j in each anchor's local frame."""
    if c.w.shape[1] != b.n_v:
        raise DimensionMismatch(f"coefficients have {c.w.shape[1]} cone weights, basis has {b.n_v}")
    return c.s[:, None] * (c.w @ b.vectors)


@dataclass
class GlobalForceField:
    positions: np.ndarray  # (K, 3) anchor positions O_k
    forces: np.ndarray     # (K, 3) camera-frame forces F_k

    @property
    def total(self):
        return self.forces.sum(axis=0)

    def to_dict(self):
        return {"positions": self.positions.tolist(), "forces": self.forces.tolist()}


def global_forces(local, positions, frames) -> GlobalForceField:
    """F_k = R_k F'_k with R_k the anchor's local-to-global frame."""
    local = np.asarray(local, dtype=float)
    positions = np.asarray(positions, dtype=float)
    frames = np.asarray(frames, dtype=float)
    if not (local.shape[0] == positions.shape[0] == frames.shape[0]):
        raise DimensionMismatch("forces, positions and frames must have the same count")
    return GlobalForceField(positions, np.einsum("kij,kj->ki", frames, local))


@dataclass(frozen=True)
class Gravity:
    """Gravity acting on the object, magnitude fixed to 1.

    The default direction is the camera +y axis (image "down").
    """

    direction: tuple = (0.0, 1.0, 0.0)
    magnitude: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if d.shape != (3,) or not n > 0:
            raise InvalidParameter("gravity direction must be a nonzero 3-vector")
        object.__setattr__(self, "direction", tuple(float(x) for x in d / n))

    @property
    def vector(self):
        return self.magnitude * np.asarray(self.direction)
