"""Equilibrium and contact residuals, the Omega contact weighting and physics scores.

Sign convention: ``G`` is the gravity force acting on the object (pointing
down, |G| = 1), so a grasp in static equilibrium satisfies ``sum F_k + G = 0``
and ``L_force = ||sum F_k + G||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter
from .force import GlobalForceField, Gravity

OMEGA_STEEPNESS = 16.0
OMEGA_LOW = -1.0
OMEGA_HIGH = 0.75
CONTACT2_EPS = 1e-5


@dataclass(frozen=True)
class OmegaConfig:
    """How signed distances are fed to Omega.

    ``unit_scale`` converts meters to the function's argument (100: centimeters,
    1: raw meters). ``mode="printed"`` evaluates
    ``1 / ((1 + exp(-16 (x + 1))) (1 + exp(-16 (x - 0.75))))`` verbatim, which is
    near 1 only for x > 0.75. ``mode="contact"`` flips the sign of the second
    exponent so the weight is near 1 on the band -1 < x < 0.75 (touching or
    slightly penetrating) and near 0 for distant anchors.
    """

    mode: str = "contact"
    unit_scale: float = 100.0

    def __post_init__(self):
        if self.mode not in ("printed", "contact"):
            raise InvalidParameter(f"unknown omega mode {self.mode!r}")
        if not self.unit_scale > 0:
            raise InvalidParameter("unit_scale must be positive")

    def to_dict(self):
        return {"mode": self.mode, "unit_scale": self.unit_scale}


def log_omega(x, mode="printed"):
    """log Omega(x) computed with logaddexp, finite for every finite x."""
    x = np.asarray(x, dtype=float)
    second = -OMEGA_STEEPNESS * (x - OMEGA_HIGH)
    if mode == "contact":
        second = -second
    elif mode != "printed":
        raise InvalidParameter(f"unknown omega mode {mode!r}")
    return -np.logaddexp(0.0, -OMEGA_STEEPNESS * (x - OMEGA_LOW)) - np.logaddexp(0.0, second)


def omega(x, mode="printed"):
    """Omega evaluated at ``x`` given directly in the formula's units."""
    return np.exp(log_omega(x, mode))


def omega_of_distance(d_m, cfg: OmegaConfig = OmegaConfig()):
    """Omega of signed distances given in meters."""
    return omega(cfg.unit_scale * np.asarray(d_m, dtype=float), cfg.mode)


def log_omega_of_distance(d_m, cfg: OmegaConfig = OmegaConfig()):
    return log_omega(cfg.unit_scale * np.asarray(d_m, dtype=float), cfg.mode)


@dataclass
class ContactState:
    d: np.ndarray   # (K,) signed anchor-to-surface distances in meters
    c: np.ndarray   # (3,) torque origin, the object's center of mass

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float)
        self.c = np.asarray(self.c, dtype=float)


@dataclass(frozen=True)
class PhysicsResiduals:
    L_force: float
    L_torque: float
    L_contact: float
    L_contact2: float

    def to_dict(self):
        return {"L_force": self.L_force, "L_torque": self.L_torque,
                "L_contact": self.L_contact, "L_contact2": self.L_contact2}


def _gvec(g):
    return g.vector if isinstance(g, Gravity) else np.asarray(g, dtype=float)


def force_residual(field: GlobalForceField, g=Gravity()) -> float:
    e = field.forces.sum(axis=0) + _gvec(g)
    return float(e @ e)


def torque_residual(field: GlobalForceField, c) -> float:
    r = field.positions - np.asarray(c, dtype=float)
    tau = np.cross(field.forces, r).sum(axis=0)
    return float(tau @ tau)


def contact_residual(field: GlobalForceField, contact) -> float:
    d = contact.d if isinstance(contact, ContactState) else np.asarray(contact, dtype=float)
    return float(np.sum(np.linalg.norm(field.forces, axis=1) * np.abs(d)))


def contact2_residual(s, d, cfg: OmegaConfig = OmegaConfig(), mask=None, eps=CONTACT2_EPS) -> float:
    """sum_k log^2( Omega_k ||s|| / (s_k ||Omega|| + eps) ).

    ``d`` are distances in meters. With ``mask`` the sum and both norms run over
    the selected anchors only.
    """
    s = np.asarray(s, dtype=float)
    logw = log_omega_of_distance(d, cfg)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        s, logw = s[mask], logw[mask]
    if s.size == 0:
        return 0.0
    norm_s = np.linalg.norm(s)
    norm_w = np.exp(0.5 * np.logaddexp.reduce(2.0 * logw))
    q = logw + np.log(norm_s) - np.log(s * norm_w + eps)
    return float(q @ q)


def residuals(field: GlobalForceField, contact: ContactState, g=Gravity(), s=None,
              cfg: OmegaConfig = OmegaConfig(), mask=None) -> PhysicsResiduals:
    lc2 = contact2_residual(s, contact.d, cfg, mask) if s is not None else 0.0
    return PhysicsResiduals(force_residual(field, g), torque_residual(field, contact.c),
                            contact_residual(field, contact), lc2)


def hand_phys_score(res: PhysicsResiduals) -> float:
    return -res.L_force * res.L_contact


def object_phys_score(res: PhysicsResiduals) -> float:
    return -res.L_torque * res.L_contact
