"""Two-phase pseudo-force solver with a from-scratch Adam optimizer.

Variables per anchor: cone weights ``w = softmax(w_tilde)`` and magnitude
``s = |s_tilde|``. Anchors whose contact weight Omega is below the freeze
threshold keep ``s_tilde = 0`` throughout.

Phase 1 updates only ``w_tilde`` against ``L_force``; phase 2 updates both
against ``L_force + 30 L_torque + 0.1 L_contact2``. Gradients are analytic and
the core routines are batched over a leading candidate axis so physics-based
aggregation can run many small solves at once.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AllAnchorsFrozen, InvalidParameter, NonFiniteGradient
from .force import ForceCoefficients, GlobalForceField, Gravity, cone_basis
from .hand import HandPose, HandShape, posed_anchor_states
from .mesh import TriMesh, signed_distance
from .physics import (CONTACT2_EPS, ContactState, OmegaConfig, PhysicsResiduals, log_omega_of_distance,
                      omega_of_distance, residuals)

SOLVE_REPORT_SCHEMA = "graspforge.solve-report.v1"


@dataclass(frozen=True)
class SolverConfig:
    lr: float = 1e-3
    phase1_steps: int = 300
    phase2_steps: int = 2700
    w_force: float = 1.0
    w_torque: float = 30.0
    w_contact2: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    mu: float = 1.0
    n_v: int = 12
    s_init: float = 0.05
    freeze_threshold: float = 0.1
    omega: OmegaConfig = field(default_factory=OmegaConfig)
    contact2_eps: float = CONTACT2_EPS
    log_every: int = 50
    convergence_window: int = 50
    convergence_tol: float = 1e-6
    equilibrium_tol: float = 1e-2

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidParameter("learning rate must be positive")
        if self.phase1_steps < 0 or self.phase2_steps < 0 or self.phase1_steps + self.phase2_steps == 0:
            raise InvalidParameter("step counts must be nonnegative and not both zero")

    def to_dict(self):
        d = asdict(self)
        d["omega"] = self.omega.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "omega" in d:
            d["omega"] = OmegaConfig(**d["omega"])
        return cls(**d)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x, dtype=float), np.zeros_like(x, dtype=float), 0)


def adam_step(x, grad, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One bias-corrected Adam update (decoupled weight decay as in AdamW). Returns the new x."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains nan or inf")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    x = np.asarray(x, dtype=float)
    if weight_decay:
        x = x - lr * weight_decay * x
    return x - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- problem definition

@dataclass
class SolveGeometry:
    """Frozen geometry of one (or a batch of) solve(s); leading batch axis optional."""

    positions: np.ndarray  # (..., K, 3)
    frames: np.ndarray     # (..., K, 3, 3)
    distances: np.ndarray  # (..., K) meters
    centroid: np.ndarray   # (..., 3)
    gravity: np.ndarray    # (3,)


@dataclass
class ReparamVars:
    w_tilde: np.ndarray  # (..., K, n_v)
    s_tilde: np.ndarray  # (..., K)
    frozen: np.ndarray   # (..., K) bool

    def copy(self):
        return ReparamVars(self.w_tilde.copy(), self.s_tilde.copy(), self.frozen.copy())

    def coefficients(self) -> ForceCoefficients:
        return ForceCoefficients(_softmax(self.w_tilde), np.abs(self.s_tilde))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def frozen_mask(distances, cfg: SolverConfig = SolverConfig()):
    return omega_of_distance(distances, cfg.omega) < cfg.freeze_threshold


def init_coefficients(contact, cfg: SolverConfig = SolverConfig()) -> ReparamVars:
    """Freeze anchors with Omega < threshold, s_tilde = s_init elsewhere, uniform w_tilde."""
    d = contact.d if isinstance(contact, ContactState) else np.asarray(contact, dtype=float)
    frozen = frozen_mask(d, cfg)
    s = np.where(frozen, 0.0, cfg.s_init)
    w = np.full(d.shape + (cfg.n_v,), 1.0 / cfg.n_v)
    return ReparamVars(w, s, frozen)


def objective_and_grad(w_tilde, s_tilde, active, geom: SolveGeometry, basis_vectors,
                       weights=(1.0, 30.0, 0.1), omega_cfg=OmegaConfig(), eps=CONTACT2_EPS,
                       need_grad=True):
    """Weighted objective, its parts and analytic gradients, batched over leading axes.

    ``weights`` = (force, torque, contact2). Inactive anchors contribute no force
    and are excluded from the contact2 sum and norms. Returns
    ``(total, (Lf, Lt, Lc2), grad_w_tilde, grad_s_tilde)``; totals have the batch shape.
    """
    wf, wt, wc = weights
    w = _softmax(w_tilde)
    s = np.where(active, np.abs(s_tilde), 0.0)
    u = w @ basis_vectors                                       # (..., K, 3) local unit-s force
    F = np.einsum("...kij,...kj->...ki", geom.frames, s[..., None] * u)
    e = F.sum(axis=-2) + geom.gravity
    Lf = np.einsum("...i,...i->...", e, e)
    r = geom.positions - geom.centroid[..., None, :]
    tau = np.cross(F, r).sum(axis=-2)
    Lt = np.einsum("...i,...i->...", tau, tau)

    Lc2 = np.zeros_like(Lf)
    if wc:
        logw = np.where(active, log_omega_of_distance(geom.distances, omega_cfg), -np.inf)
        norm_s = np.sqrt(np.sum(s * s, axis=-1))
        norm_w = np.exp(0.5 * np.logaddexp.reduce(2.0 * logw, axis=-1))
        denom = s * norm_w[..., None] + eps
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(active, logw + np.log(norm_s)[..., None] - np.log(denom), 0.0)
        Lc2 = np.sum(q * q, axis=-1)
    total = wf * Lf + wt * Lt + wc * Lc2
    if not need_grad:
        return total, (Lf, Lt, Lc2), None, None

    gF = 2.0 * wf * e[..., None, :] + 2.0 * wt * np.cross(r, tau[..., None, :])
    b = np.einsum("...kji,...kj->...ki", geom.frames, gF)      # R_k^T gF_k
    g_s = np.einsum("...ki,...ki->...k", b, u)
    g_w = s[..., None] * (b @ basis_vectors.T)                  # dL/dw
    if wc:
        sum_q = q.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            g_c = 2.0 * sum_q * s / (norm_s[..., None] ** 2) - 2.0 * q * norm_w[..., None] / denom
        g_s = g_s + wc * np.where(active, g_c, 0.0)
    g_wt = w * (g_w - np.sum(w * g_w, axis=-1, keepdims=True))
    g_st = np.where(active, g_s * np.sign(s_tilde), 0.0)
    return total, (Lf, Lt, Lc2), g_wt, g_st


# ---------------------------------------------------------------- report

@dataclass
class SolveReport:
    coefficients: ForceCoefficients
    frozen: np.ndarray
    trace: list              # dicts: phase, step, L_force, L_torque, L_contact2
    converged: bool
    steps: dict              # {"phase1": n, "phase2": n}
    field: GlobalForceField
    residuals: PhysicsResiduals
    min_stability: float     # min over all steps of L_force + 30 L_torque
    config: SolverConfig
    seed: int | None = None

    def to_json(self):
        cfg = self.config.to_dict()
        return {
            "schema": SOLVE_REPORT_SCHEMA,
            "seed": self.seed,
            "config": cfg,
            "config_hash": config_hash(cfg),
            "converged": bool(self.converged),
            "steps": dict(self.steps),
            "frozen": [bool(x) for x in self.frozen],
            "coefficients": self.coefficients.to_dict(),
            "field": self.field.to_dict(),
            "residuals": self.residuals.to_dict(),
            "min_stability": self.min_stability,
            "trace": self.trace,
        }


def config_hash(cfg_dict):
    blob = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- phases

def _trace_rows(phase, step, parts, idx=()):
    Lf, Lt, Lc2 = (float(p[idx]) for p in parts)
    return {"phase": phase, "step": step, "L_force": Lf, "L_torque": Lt, "L_contact2": Lc2}


def _check_active(vars: ReparamVars):
    if np.any(np.all(vars.frozen, axis=-1)):
        raise AllAnchorsFrozen("every anchor is beyond contact range")


def solve_phase1(vars: ReparamVars, geom: SolveGeometry, cfg: SolverConfig = SolverConfig(), trace=None):
    """Fit the cone weights to oppose gravity with magnitudes held fixed (batched).

    Returns the updated variables and the per-step history of
    (L_force, L_force + 30 L_torque) with shape (steps + 1, 2, ...).
    """
    _check_active(vars)
    vars = vars.copy()
    basis = cone_basis(cfg.mu, cfg.n_v).vectors
    active = ~vars.frozen
    state = AdamState.zeros_like(vars.w_tilde)
    history = []
    for step in range(cfg.phase1_steps):
        _, parts, gw, _ = objective_and_grad(vars.w_tilde, vars.s_tilde, active, geom, basis,
                                             (1.0, 0.0, 0.0), cfg.omega, cfg.contact2_eps)
        history.append((parts[0], parts[0] + 30.0 * parts[1]))
        if trace is not None and step % cfg.log_every == 0:
            trace.append(_trace_rows("phase1", step, parts))
        vars.w_tilde = adam_step(vars.w_tilde, gw, state, cfg.lr, cfg.beta1, cfg.beta2,
                                 cfg.adam_eps, cfg.weight_decay)
    _, parts, _, _ = objective_and_grad(vars.w_tilde, vars.s_tilde, active, geom, basis,
                                        (1.0, 0.0, 0.0), cfg.omega, need_grad=False)
    history.append((parts[0], parts[0] + 30.0 * parts[1]))
    if trace is not None:
        trace.append(_trace_rows("phase1", cfg.phase1_steps, parts))
    return vars, np.array(history)


def solve_phase2(vars: ReparamVars, geom: SolveGeometry, cfg: SolverConfig = SolverConfig(), trace=None):
    """Joint update of cone weights and unfrozen magnitudes (batched).

    Returns the updated variables and the per-step history of (objective,
    L_force + 30 L_torque) with shape (steps + 1, 2, ...).
    """
    _check_active(vars)
    vars = vars.copy()
    basis = cone_basis(cfg.mu, cfg.n_v).vectors
    active = ~vars.frozen
    weights = (cfg.w_force, cfg.w_torque, cfg.w_contact2)
    sw = AdamState.zeros_like(vars.w_tilde)
    ss = AdamState.zeros_like(vars.s_tilde)
    history = []
    for step in range(cfg.phase2_steps):
        total, parts, gw, gs = objective_and_grad(vars.w_tilde, vars.s_tilde, active, geom, basis,
                                                  weights, cfg.omega, cfg.contact2_eps)
        history.append((total, parts[0] + 30.0 * parts[1]))
        if trace is not None and step % cfg.log_every == 0:
            trace.append(_trace_rows("phase2", step, parts))
        vars.w_tilde = adam_step(vars.w_tilde, gw, sw, cfg.lr, cfg.beta1, cfg.beta2,
                                 cfg.adam_eps, cfg.weight_decay)
        vars.s_tilde = adam_step(vars.s_tilde, gs, ss, cfg.lr, cfg.beta1, cfg.beta2,
                                 cfg.adam_eps, cfg.weight_decay)
        vars.s_tilde = np.where(vars.frozen, 0.0, vars.s_tilde)
    total, parts, _, _ = objective_and_grad(vars.w_tilde, vars.s_tilde, active, geom, basis,
                                            weights, cfg.omega, cfg.contact2_eps, need_grad=False)
    history.append((total, parts[0] + 30.0 * parts[1]))
    if trace is not None:
        trace.append(_trace_rows("phase2", cfg.phase2_steps, parts))
    return vars, np.array(history)


def plateaued(objective_history, window=50, tol=1e-6):
    """Smoothed objective decrease over the final window is below ``tol``."""
    h = np.asarray(objective_history, dtype=float)
    if len(h) < 2 * window:
        return False
    return bool(h[-2 * window:-window].mean() - h[-window:].mean() < tol)


# ---------------------------------------------------------------- full pipeline

def scene_geometry(pose: HandPose, shape: HandShape, object_mesh: TriMesh, gravity=Gravity(),
                   centroid=None) -> SolveGeometry:
    """Anchor states and signed distances for a hand against a camera-frame object mesh."""
    pos, frames = posed_anchor_states(pose.theta, pose.trans, shape)
    d = signed_distance(object_mesh, pos).distance
    c = object_mesh.centroid if centroid is None else np.asarray(centroid, dtype=float)
    g = gravity.vector if isinstance(gravity, Gravity) else np.asarray(gravity, dtype=float)
    return SolveGeometry(pos, frames, d, np.asarray(c, dtype=float), g)


def solve_geometry(geom: SolveGeometry, cfg: SolverConfig = SolverConfig(), seed=None) -> SolveReport:
    vars0 = init_coefficients(geom.distances, cfg)
    _check_active(vars0)
    trace = []
    vars1, h1 = solve_phase1(vars0, geom, cfg, trace)
    if cfg.phase2_steps:
        vars2, h2 = solve_phase2(vars1, geom, cfg, trace)
        converged = plateaued(h2[:, 0], cfg.convergence_window, cfg.convergence_tol)
    else:
        vars2, h2 = vars1, np.zeros((0, 2))
        converged = plateaued(h1[:, 0], cfg.convergence_window, cfg.convergence_tol)
    coeffs = vars2.coefficients()
    basis = cone_basis(cfg.mu, cfg.n_v)
    local = coeffs.s[:, None] * (coeffs.w @ basis.vectors)
    fld = GlobalForceField(geom.positions.copy(), np.einsum("kij,kj->ki", geom.frames, local))
    res = residuals(fld, ContactState(geom.distances, geom.centroid), geom.gravity, coeffs.s,
                    cfg.omega, mask=~vars2.frozen)
    stab = np.concatenate([h1[:, 1], h2[:, 1]])
    # a run that stops while still creeping down counts as converged once both
    # equilibrium residuals are inside the tolerance
    converged = converged or (res.L_force <= cfg.equilibrium_tol and res.L_torque <= cfg.equilibrium_tol)
    return SolveReport(coeffs, vars2.frozen.copy(), trace, converged,
                       {"phase1": cfg.phase1_steps, "phase2": cfg.phase2_steps}, fld, res,
                       float(stab.min()), cfg, seed)


def solve_pseudo_forces(pose: HandPose, shape: HandShape, object_mesh: TriMesh, gravity=Gravity(),
                        cfg: SolverConfig = SolverConfig(), centroid=None, seed=None) -> SolveReport:
    """anchors -> distances -> init -> phase 1 -> phase 2.

    ``object_mesh`` must already be posed in the camera frame. Raises
    AllAnchorsFrozen when no anchor is within contact range.
    """
    geom = scene_geometry(pose, shape, object_mesh, gravity, centroid)
    return solve_geometry(geom, cfg, seed)


def stack_geometries(geoms):
    """Batch several single-scene geometries along a new leading axis."""
    return SolveGeometry(np.stack([g.positions for g in geoms]), np.stack([g.frames for g in geoms]),
                         np.stack([g.distances for g in geoms]), np.stack([g.centroid for g in geoms]),
                         geoms[0].gravity)
