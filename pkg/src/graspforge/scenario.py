"""Deterministic synthetic grasp scenarios.

Each template is authored in the hand frame (wrist at the origin, identity
wrist rotation): finger articulation, an object primitive placed against the
contact pads and the gravity direction under which the grasp is in
equilibrium. ``build_canonical`` then rotates the whole scene so gravity
points along the camera +y axis, applies a seeded yaw about gravity and places
it in front of the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParameter, UnknownTemplate
from .force import Gravity
from .geom import CameraIntrinsics, aa_to_matrix, matrix_to_aa
from .hand import N_BETAS, HandPose, HandShape, flexion_pose, forward_kinematics
from .mesh import TriMesh, make_primitive
from .schema_io import read_json, validate, write_json

SCENARIO_SCHEMA = "graspforge.scenario.v1"
TEMPLATES = ("pinch-sphere", "tripod-sphere", "wrap-cylinder", "palm-box", "hover-no-contact")
GRASP_TEMPLATES = TEMPLATES[:4]

DEFAULT_INTRINSICS = CameraIntrinsics(600.0, 600.0, 128.0, 128.0, 256, 256)
DEFAULT_DEPTH = 0.6
BASE_YAW = np.pi / 4
YAW_JITTER = 0.25

# camera axes expressed in a z-up world whose origin sits under the camera
WORLD_FROM_CAMERA_R = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


@dataclass
class Scenario:
    name: str
    template: str
    seed: int
    primitive: dict              # {"kind", "dimensions", "level"}
    R: np.ndarray                # object-to-camera rotation
    T: np.ndarray                # object origin in the camera frame
    betas: np.ndarray
    pose: HandPose
    gravity: np.ndarray          # unit vector, camera frame
    intrinsics: CameraIntrinsics
    world_from_camera: dict = field(default_factory=lambda: {"R": WORLD_FROM_CAMERA_R.tolist(),
                                                              "t": [0.0, 0.0, 0.0]})

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.to_json() == other.to_json()

    @property
    def shape(self) -> HandShape:
        return HandShape.from_betas(self.betas)

    @property
    def gravity_force(self) -> Gravity:
        return Gravity(tuple(self.gravity))

    def object_mesh(self) -> TriMesh:
        """Object mesh in its own frame."""
        p = self.primitive
        return make_primitive(p["kind"], p["dimensions"], p["level"])

    def object_mesh_camera(self) -> TriMesh:
        return self.object_mesh().transformed(self.R, self.T)

    def hand_keypoints(self):
        return forward_kinematics(self.pose, self.shape)

    def to_json(self):
        return {
            "schema": SCENARIO_SCHEMA,
            "name": self.name,
            "template": self.template,
            "seed": int(self.seed),
            "object": {"primitive": {"kind": self.primitive["kind"],
                                     "dimensions": [float(x) for x in self.primitive["dimensions"]],
                                     "level": int(self.primitive["level"])},
                       "R": np.asarray(self.R).tolist(), "T": np.asarray(self.T).tolist()},
            "hand": {"betas": np.asarray(self.betas).tolist(), "theta": self.pose.theta.tolist(),
                     "trans": self.pose.trans.tolist()},
            "gravity": np.asarray(self.gravity).tolist(),
            "camera": {"intrinsics": self.intrinsics.to_dict(),
                       "world_from_camera": {"R": np.asarray(self.world_from_camera["R"]).tolist(),
                                             "t": np.asarray(self.world_from_camera["t"]).tolist()}},
        }

    @classmethod
    def from_json(cls, d):
        validate(d, "scenario.v1")
        o, h, c = d["object"], d["hand"], d["camera"]
        return cls(
            name=d["name"], template=d["template"], seed=d["seed"],
            primitive=dict(o["primitive"]), R=np.array(o["R"], dtype=float), T=np.array(o["T"], dtype=float),
            betas=np.array(h["betas"], dtype=float),
            pose=HandPose(np.array(h["theta"], dtype=float), np.array(h["trans"], dtype=float)),
            gravity=np.array(d["gravity"], dtype=float),
            intrinsics=CameraIntrinsics.from_dict(c["intrinsics"]),
            world_from_camera={"R": c["world_from_camera"]["R"], "t": c["world_from_camera"]["t"]},
        )

    def save(self, path):
        return write_json(self.to_json(), path)

    @classmethod
    def load(cls, path):
        return cls.from_json(read_json(path))


@dataclass(frozen=True)
class GraspTemplate:
    id: str
    overrides: dict = field(default_factory=dict)


# ---------------------------------------------------------------- hand-frame authoring

def _pose(angles, thumb_cmc=None, spread=None):
    shape = HandShape.from_betas()
    p = flexion_pose(angles, shape, spread=spread)
    if thumb_cmc is not None:
        p.theta[13] = thumb_cmc
    return p


def _pinch():
    ang = np.zeros((5, 3))
    ang[0] = [0.6387, 0.495, 0.3054]
    ang[1:4] = [0.15, 0.15, 0.1]
    ang[4, 1:] = [0.1045, -0.0621]
    pose = _pose(ang, thumb_cmc=[0.3291, -1.8224, 1.0378])
    obj = {"kind": "sphere", "dimensions": [0.02], "level": 3}
    return pose, obj, np.eye(3), np.array([-0.02554, 0.10817, -0.06875]), np.array([1.0, 0.0, 0.0])


def _tripod():
    ang = np.zeros((5, 3))
    ang[0] = [0.37095, 0.45542, 0.39402]
    ang[1] = [0.35425, 0.59142, 0.52271]
    ang[2] = ang[3] = [0.3, 0.3, 0.2]
    ang[4, 1:] = [-0.04693, -0.2]
    spread = np.array([0.33189, -0.4, 0.0, 0.0, 0.0])
    pose = _pose(ang, thumb_cmc=[0.07495, -0.25584, -0.45342], spread=spread)
    obj = {"kind": "sphere", "dimensions": [0.025], "level": 3}
    g = np.array([-0.36590011, 0.58203683, 0.72618884])
    return pose, obj, np.eye(3), np.array([-0.0154, 0.1195, -0.06293]), g


def _wrap():
    ang = np.zeros((5, 3))
    ang[0] = [1.20747, 0.8693, 0.24078]
    ang[1] = [1.27812, 0.99738, 0.24412]
    ang[2] = [0.86009, 0.75009, 0.28997]
    ang[3] = [1.14732, 0.99001, 0.27198]
    ang[4, 1:] = [-0.13703, -0.17127]
    pose = _pose(ang, thumb_cmc=[-0.37989, 0.03445, 0.39962])
    obj = {"kind": "cylinder", "dimensions": [0.025, 0.14], "level": 3}
    # cylinder axis along the hand x axis, shifted 2 cm off the hand centre
    R = aa_to_matrix(np.array([0.0, np.pi / 2, 0.0]))
    return pose, obj, R, np.array([0.022, 0.06607, -0.03864]), np.array([0.0, 1.0, 0.0])


def _palm_box():
    ang = np.zeros((5, 3))
    ang[:4] = [0.1, 0.1, 0.05]
    pose = _pose(ang)
    obj = {"kind": "box", "dimensions": [0.05, 0.05, 0.04], "level": 0}
    # resting on the palmar face (z = -0.013) with a 1 mm gap, palm tilted 30 degrees
    g = np.array([0.0, 0.5, np.sqrt(3.0) / 2.0])
    return pose, obj, np.eye(3), np.array([0.002, 0.04, -0.034]), g


def _hover():
    ang = np.zeros((5, 3))
    ang[:4] = [0.2, 0.2, 0.1]
    pose = _pose(ang)
    obj = {"kind": "sphere", "dimensions": [0.03], "level": 3}
    return pose, obj, np.eye(3), np.array([0.002, 0.04, -0.2]), np.array([0.0, 1.0, 0.0])


_AUTHORS = {"pinch-sphere": _pinch, "tripod-sphere": _tripod, "wrap-cylinder": _wrap,
            "palm-box": _palm_box, "hover-no-contact": _hover}
_OVERRIDES = {"yaw", "depth", "intrinsics"}


def _align(g_h, f_h):
    """Rotation taking g_h to camera +y and the palm-facing direction f_h to camera -z."""
    a1 = g_h / np.linalg.norm(g_h)
    a2 = f_h - (f_h @ a1) * a1
    a2 /= np.linalg.norm(a2)
    A = np.stack([a1, a2, np.cross(a1, a2)], axis=1)
    b1, b2 = np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, -1.0])
    B = np.stack([b1, b2, np.cross(b1, b2)], axis=1)
    return B @ A.T


def build_canonical(template, seed=0) -> Scenario:
    """Build a canonical scenario from a template id or a GraspTemplate."""
    if isinstance(template, str):
        template = GraspTemplate(template)
    if template.id not in _AUTHORS:
        raise UnknownTemplate(f"unknown template {template.id!r}; known: {', '.join(TEMPLATES)}")
    bad = set(template.overrides) - _OVERRIDES
    if bad:
        raise InvalidParameter(f"unsupported overrides: {sorted(bad)}")
    ov = template.overrides
    pose_h, prim, R_oh, T_oh, g_h = _AUTHORS[template.id]()

    rng = np.random.default_rng([int(seed), 0x5CE7])
    yaw = float(ov.get("yaw", BASE_YAW + rng.uniform(-YAW_JITTER, YAW_JITTER)))
    depth = float(ov.get("depth", DEFAULT_DEPTH))
    intr = CameraIntrinsics.from_dict(ov["intrinsics"]) if "intrinsics" in ov else DEFAULT_INTRINSICS

    palm_normal = np.array([0.0, 0.0, -1.0])
    R_hc = aa_to_matrix(np.array([0.0, yaw, 0.0])) @ _align(g_h, palm_normal)

    theta = pose_h.theta.copy()
    theta[0] = matrix_to_aa(R_hc @ aa_to_matrix(theta[0]))
    shape = HandShape.from_betas()
    kp = forward_kinematics(HandPose(theta, np.zeros(3)), shape)
    obj_c = R_hc @ T_oh
    pts = np.vstack([kp, obj_c])
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
    shift = np.array([0.0, 0.0, depth]) - center

    return Scenario(
        name=f"{template.id}-{int(seed)}", template=template.id, seed=int(seed), primitive=prim,
        R=R_hc @ R_oh, T=obj_c + shift, betas=np.zeros(N_BETAS),
        pose=HandPose(theta, shift), gravity=R_hc @ (g_h / np.linalg.norm(g_h)),
        intrinsics=intr,
    )


def export_meshes(scn: Scenario, directory):
    """Write object (object frame) and posed hand (camera frame) meshes as OBJ."""
    from .hand import skin_mesh
    from .mesh import save_obj

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_obj(scn.object_mesh(), d / "object.obj")
    save_obj(skin_mesh(scn.pose, scn.shape), d / "hand.obj")
    return d / "object.obj", d / "hand.obj"
