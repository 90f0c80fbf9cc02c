"""Candidate pose generation.

* VE-SDE noise schedule ``sigma(t) = sigma_min (sigma_max / sigma_min)^t``.
* Probability-flow ODE ``dx/dt = -sigma(t) sigma'(t) score(x, t)`` integrated
  backwards in time with an adaptive Dormand-Prince 5(4) scheme.
* Closed-form score fields (Gaussian, Gaussian mixture) standing in for a
  trained score network.
* A plain perturbation sampler around a reference pose.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidParameter, NonFiniteState, OutOfRange, StepSizeUnderflow
from .geom import aa_to_matrix, matrix_to_aa, matrix_to_rot6d, rot6d_to_matrix
from .schema_io import validate

CANDIDATES_SCHEMA = "graspforge.candidates.v1"
T_F_HAND = 0.55
T_F_OBJECT = 0.65


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    eps: float = 1e-5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise InvalidParameter("need 0 < sigma_min < sigma_max")

    @property
    def log_ratio(self):
        return np.log(self.sigma_max / self.sigma_min)

    def to_dict(self):
        return {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "eps": self.eps}


def sigma(t, s: NoiseSchedule = NoiseSchedule()):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or not np.all(np.isfinite(t_arr)):
        raise OutOfRange("t must lie in [0, 1]")
    out = s.sigma_min * np.exp(s.log_ratio * t_arr)
    return float(out) if out.ndim == 0 else out


def sigma_dot(t, s: NoiseSchedule = NoiseSchedule()):
    return sigma(t, s) * s.log_ratio


# ---------------------------------------------------------------- score fields

class GaussianScore:
    """Score of N(mu0, sigma0^2) convolved with N(0, sigma(t)^2), per coordinate.

    ``sigma0`` may be a scalar or a per-coordinate vector; ``sigma0 = 0`` is a
    delta prior.
    """

    def __init__(self, mu0, sigma0, schedule: NoiseSchedule = NoiseSchedule()):
        self.mu0 = np.asarray(mu0, dtype=float).reshape(-1)
        self.sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=float), self.mu0.shape).copy()
        self.schedule = schedule
        self.dim = self.mu0.size

    def __call__(self, x, t):
        var = self.sigma0**2 + sigma(t, self.schedule) ** 2
        return -(x - self.mu0) / var

    def provenance(self):
        return {"family": "gaussian", "mu0": self.mu0.tolist(), "sigma0": self.sigma0.tolist()}


class MixtureScore:
    """Score of an isotropic Gaussian mixture convolved with N(0, sigma(t)^2)."""

    def __init__(self, weights, means, sigmas, schedule: NoiseSchedule = NoiseSchedule()):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.sigmas = np.broadcast_to(np.asarray(sigmas, dtype=float), self.weights.shape).copy()
        if self.means.shape[0] != self.weights.size or np.any(self.weights <= 0):
            raise InvalidParameter("mixture needs one positive weight per mean")
        self.weights = self.weights / self.weights.sum()
        self.schedule = schedule
        self.dim = self.means.shape[1]

    def __call__(self, x, t):
        var = self.sigmas**2 + sigma(t, self.schedule) ** 2              # (K,)
        diff = x[None, :] - self.means                                     # (K, D)
        logp = np.log(self.weights) - 0.5 * self.dim * np.log(var) - 0.5 * np.sum(diff**2, axis=1) / var
        gamma = np.exp(logp - np.logaddexp.reduce(logp))
        return -np.sum(gamma[:, None] * diff / var[:, None], axis=0)

    def responsibilities(self, x):
        """Posterior component probabilities of clean samples (t = 0 limit without noise)."""
        x = np.atleast_2d(x)
        var = self.sigmas**2
        diff = x[:, None, :] - self.means[None]
        logp = np.log(self.weights) - 0.5 * self.dim * np.log(var) - 0.5 * np.sum(diff**2, axis=2) / var
        return np.exp(logp - np.logaddexp.reduce(logp, axis=1, keepdims=True))

    def provenance(self):
        return {"family": "mixture", "weights": self.weights.tolist(), "means": self.means.tolist(),
                "sigmas": self.sigmas.tolist()}


# ---------------------------------------------------------------- Dormand-Prince

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def pf_ode_solve(x_start, t_start, t_end, score, schedule: NoiseSchedule = NoiseSchedule(),
                 atol=1e-6, rtol=1e-6, max_steps=100_000, return_stats=False):
    """Integrate the probability-flow ODE from ``t_start`` down to ``t_end``.

    Step control follows the usual embedded-pair recipe: RMS error norm scaled by
    ``atol + rtol * max(|y_old|, |y_new|)``, safety 0.9, growth clipped to [0.2, 10].
    """
    if not t_start > t_end:
        raise InvalidParameter("t_start must exceed t_end")
    if t_end < schedule.eps or t_start > 1.0:
        raise OutOfRange(f"integration interval must lie in [{schedule.eps}, 1]")
    y = np.array(x_start, dtype=float)
    ln = schedule.log_ratio

    def f(t, x):
        s = schedule.sigma_min * np.exp(ln * t)
        return -(s * s * ln) * score(x, t)

    t = float(t_start)
    direction = -1.0
    k0 = f(t, y)
    # initial step from the local time scale of the linear part
    scale = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((k0 / scale) ** 2))
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h, t_start - t_end)
    steps = rejected = 0
    while t > t_end:
        if steps >= max_steps:
            raise StepSizeUnderflow("step budget exhausted before reaching t_end")
        h = min(h, t - t_end)
        if h < 1e-14 * max(1.0, abs(t)):
            raise StepSizeUnderflow(f"step size underflow at t={t:.6g}")
        k = [k0]
        for i in range(1, 7):
            yi = y + direction * h * sum(a * kj for a, kj in zip(_A[i], k))
            k.append(f(t + direction * _C[i] * h, yi))
        y_new = y + direction * h * sum(b * kj for b, kj in zip(_B5, k) if b)
        err = direction * h * sum(e * kj for e, kj in zip(_E, k))
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        en = np.sqrt(np.mean((err / sc) ** 2))
        if not np.all(np.isfinite(y_new)) or not np.isfinite(en):
            raise NonFiniteState(f"non-finite state at t={t:.6g}")
        steps += 1
        if en <= 1.0:
            t = t + direction * h
            if abs(t - t_end) < 1e-15:
                t = t_end
            y = y_new
            k0 = k[6]
            factor = 10.0 if en == 0 else min(10.0, max(0.2, 0.9 * en ** -0.2))
        else:
            rejected += 1
            factor = max(0.2, 0.9 * en ** -0.2)
        h *= factor
    if return_stats:
        return y, {"steps": steps, "rejected": rejected}
    return y


def delta_prior_closed_form(x_start, mu0, t_start, t_end, schedule: NoiseSchedule = NoiseSchedule()):
    return mu0 + (np.asarray(x_start) - mu0) * sigma(t_end, schedule) / sigma(t_start, schedule)


# ---------------------------------------------------------------- candidate sets

@dataclass
class CandidateSet:
    entity: str                    # "hand" or "object"
    rot6d: np.ndarray              # hand (N, 16, 6); object (N, 6)
    trans: np.ndarray | None = None  # object (N, 3)
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rot6d = np.asarray(self.rot6d, dtype=float)
        if self.entity == "hand":
            if self.rot6d.ndim != 3 or self.rot6d.shape[1:] != (16, 6):
                raise DimensionMismatch("hand candidates must have shape (N, 16, 6)")
        elif self.entity == "object":
            if self.rot6d.ndim != 2 or self.rot6d.shape[1] != 6 or self.trans is None:
                raise DimensionMismatch("object candidates need (N, 6) rotations and (N, 3) translations")
            self.trans = np.asarray(self.trans, dtype=float).reshape(-1, 3)
            if len(self.trans) != len(self.rot6d):
                raise DimensionMismatch("rotation and translation counts differ")
        else:
            raise InvalidParameter(f"unknown entity {self.entity!r}")
        if len(self.rot6d) < 1:
            raise InvalidParameter("candidate set is empty")
        if not np.all(np.isfinite(self.rot6d)) or (self.trans is not None and not np.all(np.isfinite(self.trans))):
            raise NonFiniteState("candidate entries must be finite")

    def __len__(self):
        return len(self.rot6d)

    def rotations(self):
        return rot6d_to_matrix(self.rot6d)

    def hand_theta(self):
        """(N, 16, 3) axis-angle joint parameters."""
        return matrix_to_aa(self.rotations())

    def to_json(self):
        d = {"schema": CANDIDATES_SCHEMA, "entity": self.entity, "seed": self.seed,
             "provenance": self.provenance, "rot6d": self.rot6d.tolist()}
        if self.trans is not None:
            d["trans"] = self.trans.tolist()
        return d

    @classmethod
    def from_json(cls, d):
        validate(d, "candidates.v1")
        return cls(d["entity"], np.array(d["rot6d"], dtype=float),
                   None if "trans" not in d else np.array(d["trans"], dtype=float),
                   d.get("seed"), d.get("provenance", {}))


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def sample_candidates(n, t_f, score, schedule: NoiseSchedule = NoiseSchedule(), seed=0, atol=1e-6,
                      rtol=1e-6, threads=1):
    """Draw ``n`` starts from N(0, sigma(t_f)^2 I) and integrate each down to eps.

    Candidate ``i`` uses the random substream ``default_rng([seed, i])`` so the
    result is independent of the thread count. Returns an (n, dim) array.
    """
    if n < 1:
        raise InvalidParameter("need at least one candidate")
    s_f = sigma(t_f, schedule)

    def one(i):
        rng = np.random.default_rng([int(seed), int(i)])
        x0 = rng.normal(0.0, s_f, score.dim)
        return pf_ode_solve(x0, t_f, schedule.eps, score, schedule, atol, rtol)

    return np.stack(_map(one, range(n), threads))


# ---------------------------------------------------------------- generators built on the PF-ODE

@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 100
    t_f_hand: float = T_F_HAND
    t_f_object: float = T_F_OBJECT
    rot6d_sigma: float = 0.05
    trans_sigma: float = 0.01
    atol: float = 1e-6
    rtol: float = 1e-6

    def to_dict(self):
        return dict(self.__dict__)


def generate_hand_candidates(theta_ref, cfg: GeneratorConfig = GeneratorConfig(),
                             schedule: NoiseSchedule = NoiseSchedule(), seed=0, t_f=None, threads=1):
    """PF-ODE hand candidates from a Gaussian score field centred on the reference 6D joint rotations."""
    mu0 = matrix_to_rot6d(aa_to_matrix(np.asarray(theta_ref, dtype=float))).reshape(-1)
    score = GaussianScore(mu0, cfg.rot6d_sigma, schedule)
    t_f = cfg.t_f_hand if t_f is None else t_f
    x = sample_candidates(cfg.n, t_f, score, schedule, seed, cfg.atol, cfg.rtol, threads)
    prov = {"generator": "pf-ode", "score": {"family": "gaussian", "sigma0": cfg.rot6d_sigma},
            "t_f": t_f, "schedule": schedule.to_dict()}
    return CandidateSet("hand", x.reshape(cfg.n, 16, 6), seed=seed, provenance=prov)


def generate_object_candidates(R_ref, T_ref, wrist, cfg: GeneratorConfig = GeneratorConfig(),
                               schedule: NoiseSchedule = NoiseSchedule(), seed=0, t_f=None, threads=1):
    """PF-ODE object candidates; the state is (6D rotation, translation relative to the known wrist)."""
    wrist = np.asarray(wrist, dtype=float)
    mu0 = np.concatenate([matrix_to_rot6d(np.asarray(R_ref, dtype=float)), np.asarray(T_ref) - wrist])
    sig = np.concatenate([np.full(6, cfg.rot6d_sigma), np.full(3, cfg.trans_sigma)])
    score = GaussianScore(mu0, sig, schedule)
    t_f = cfg.t_f_object if t_f is None else t_f
    x = sample_candidates(cfg.n, t_f, score, schedule, seed, cfg.atol, cfg.rtol, threads)
    prov = {"generator": "pf-ode", "score": {"family": "gaussian", "sigma0_rot6d": cfg.rot6d_sigma,
                                             "sigma0_trans": cfg.trans_sigma},
            "t_f": t_f, "schedule": schedule.to_dict(), "translation_origin": wrist.tolist()}
    return CandidateSet("object", x[:, :6], x[:, 6:] + wrist, seed=seed, provenance=prov)


# ---------------------------------------------------------------- perturbation sampler

@dataclass(frozen=True)
class NoiseSpec:
    rot_sigma: float = 0.1     # radians, per joint (or per object rotation)
    trans_sigma: float = 0.01  # meters, object translation only


def perturbation_sampler(reference, noise: NoiseSpec, n, seed=0, include_reference=True,
                         entity=None) -> CandidateSet:
    """Reference pose composed with independent Gaussian rotation perturbations.

    ``reference`` is a (16, 3) axis-angle hand pose or an ``(R, T)`` object pose.
    Rotations are perturbed on the left, ``exp(delta) R_ref`` with
    ``delta ~ N(0, rot_sigma^2 I)``; object translations get additive noise.
    """
    if n < 1:
        raise InvalidParameter("need at least one candidate")
    rng = np.random.default_rng([int(seed), 0x9E27])
    if entity is None:
        entity = "object" if isinstance(reference, tuple) else "hand"
    prov = {"generator": "perturbation", "rot_sigma": noise.rot_sigma, "trans_sigma": noise.trans_sigma,
            "include_reference": bool(include_reference)}
    if entity == "hand":
        R_ref = aa_to_matrix(np.asarray(reference, dtype=float).reshape(16, 3))
        delta = rng.normal(0.0, noise.rot_sigma, (n, 16, 3))
        if include_reference:
            delta[0] = 0.0
        R = aa_to_matrix(delta) @ R_ref
        return CandidateSet("hand", matrix_to_rot6d(R), seed=seed, provenance=prov)
    R_ref, T_ref = (np.asarray(a, dtype=float) for a in reference)
    delta = rng.normal(0.0, noise.rot_sigma, (n, 3))
    dT = rng.normal(0.0, noise.trans_sigma, (n, 3))
    if include_reference:
        delta[0] = 0.0
        dT[0] = 0.0
    R = aa_to_matrix(delta) @ R_ref
    return CandidateSet("object", matrix_to_rot6d(R), T_ref + dT, seed=seed, provenance=prov)
