"""Procedural articulated body model with linear blend skinning.

The model mimics the interface of a whole-body statistical model: pose,
shape and expression parameters drive a template mesh through linear blend
skinning, and a convex joint regressor maps vertices back to keypoints.
Geometry is generated procedurally from a seed: every bone carries rings of
vertices, and the regressor row of joint ``j`` averages the ring centred on
``j``.  Since every ring vertex shares the same skinning weights, regressing
the skinned mesh reproduces the kinematic joints exactly; ``eps_model``
records the measured rest-pose discrepancy.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, ModelFileError, NumericInputError, ShapeError, VersionError
from .rotation import rodrigues, rodrigues_jacobian, skew

MODEL_FORMAT_VERSION = 1

BODY, LEFT_HAND, RIGHT_HAND, JAW = "body", "left_hand", "right_hand", "jaw"
JOINT_KINDS = (BODY, LEFT_HAND, RIGHT_HAND, JAW)

N_BODY_JOINTS = 22
MAX_BETA = 5.0
# axis-angle of a rotation reflected through the x = 0 plane
MIRROR_AXIS_ANGLE_SIGNS = np.array([1.0, -1.0, -1.0])

# name, parent, rest position (metres, y up, +x towards the body's left, +z forward)
_BODY_TEMPLATE = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("left_hip", 0, (0.09, -0.08, 0.0)),
    ("right_hip", 0, (-0.09, -0.08, 0.0)),
    ("spine1", 0, (0.0, 0.11, -0.01)),
    ("left_knee", 1, (0.10, -0.48, 0.01)),
    ("right_knee", 2, (-0.10, -0.48, 0.01)),
    ("spine2", 3, (0.0, 0.24, -0.01)),
    ("left_ankle", 4, (0.10, -0.88, -0.03)),
    ("right_ankle", 5, (-0.10, -0.88, -0.03)),
    ("spine3", 6, (0.0, 0.30, 0.0)),
    ("left_foot", 7, (0.11, -0.93, 0.10)),
    ("right_foot", 8, (-0.11, -0.93, 0.10)),
    ("neck", 9, (0.0, 0.50, -0.01)),
    ("left_collar", 9, (0.07, 0.42, 0.0)),
    ("right_collar", 9, (-0.07, 0.42, 0.0)),
    ("head", 12, (0.0, 0.62, 0.03)),
    ("left_shoulder", 13, (0.18, 0.44, -0.01)),
    ("right_shoulder", 14, (-0.18, 0.44, -0.01)),
    ("left_elbow", 16, (0.44, 0.44, -0.02)),
    ("right_elbow", 17, (-0.44, 0.44, -0.02)),
    ("left_wrist", 18, (0.69, 0.44, -0.01)),
    ("right_wrist", 19, (-0.69, 0.44, -0.01)),
]
_LEFT_WRIST, _RIGHT_WRIST, _HEAD = 20, 21, 15

# finger base offsets from the left wrist and per-segment direction
_FINGERS = [
    ("index", (0.090, 0.000, 0.030), (1.0, 0.0, 0.05)),
    ("middle", (0.095, 0.000, 0.010), (1.0, 0.0, 0.0)),
    ("pinky", (0.080, 0.000, -0.035), (1.0, 0.0, -0.12)),
    ("ring", (0.090, 0.000, -0.012), (1.0, 0.0, -0.05)),
    ("thumb", (0.030, -0.010, 0.035), (0.7, -0.1, 0.7)),
]
_SEGMENT_LENGTHS = (0.036, 0.025, 0.021)

# (min, max) per axis, radians; keyed by name fragment
_BODY_LIMITS = {
    "pelvis": [(-2 * math.pi, 2 * math.pi)] * 3,
    "hip": [(-1.2, 0.6), (-0.5, 0.5), (-0.6, 0.6)],
    "spine": [(-0.5, 0.5)] * 3,
    "knee": [(-0.05, 2.0), (-0.1, 0.1), (-0.1, 0.1)],
    "ankle": [(-0.6, 0.6), (-0.3, 0.3), (-0.3, 0.3)],
    "foot": [(-0.3, 0.3)] * 3,
    "neck": [(-0.5, 0.5)] * 3,
    "collar": [(-0.3, 0.3)] * 3,
    "head": [(-0.6, 0.6)] * 3,
    "shoulder": [(-1.2, 1.2)] * 3,
    "left_elbow": [(-0.8, 0.8), (-2.2, 0.05), (-0.2, 0.2)],
    "right_elbow": [(-0.8, 0.8), (-0.05, 2.2), (-0.2, 0.2)],
    "wrist": [(-0.8, 0.8), (-0.5, 0.5), (-0.8, 0.8)],
}


@dataclass(frozen=True)
class ToyModelConfig:
    n_body_joints: int = N_BODY_JOINTS
    n_hand_joints: int = 15
    n_jaw_joints: int = 1
    n_vertices: int = 1024
    ring_size: int = 8
    n_shape: int = 10
    n_expression: int = 10
    hand_pca_dim: int = 6

    @property
    def n_joints(self):
        return self.n_body_joints + 2 * self.n_hand_joints + self.n_jaw_joints

    def validate(self):
        if self.n_body_joints != N_BODY_JOINTS:
            raise InvalidConfigError(f"body group must have {N_BODY_JOINTS} joints, got {self.n_body_joints}")
        if self.n_hand_joints <= 0 or self.n_hand_joints % 5 or self.n_hand_joints > 15:
            raise InvalidConfigError(f"hand group needs 5, 10 or 15 joints, got {self.n_hand_joints}")
        if self.n_jaw_joints != 1:
            raise InvalidConfigError(f"jaw group needs exactly 1 joint, got {self.n_jaw_joints}")
        if self.ring_size < 3:
            raise InvalidConfigError("ring_size must be at least 3")
        min_vertices = 2 * self.ring_size * self.n_joints
        if self.n_vertices < min_vertices or self.n_vertices % self.ring_size:
            raise InvalidConfigError(
                f"n_vertices must be a multiple of {self.ring_size} and >= {min_vertices} "
                f"(two rings per bone), got {self.n_vertices}")
        if self.n_shape < 1 or self.n_expression < 1:
            raise InvalidConfigError("shape and expression bases need at least one mode")
        if not 1 <= self.hand_pca_dim <= 3 * self.n_hand_joints:
            raise InvalidConfigError("hand_pca_dim out of range")


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype, order="C")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class JointTree:
    parents: np.ndarray
    kinds: tuple
    rest_offsets: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "parents", _readonly(self.parents, int))
        object.__setattr__(self, "rest_offsets", _readonly(self.rest_offsets))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "names", tuple(self.names))
        self.validate()

    def __len__(self):
        return len(self.parents)

    def validate(self):
        p, k = self.parents, len(self.parents)
        if self.rest_offsets.shape != (k, 3) or len(self.kinds) != k:
            raise ShapeError("joint tree arrays disagree in length")
        if k == 0 or p[0] != -1 or np.any(p[1:] < 0):
            raise InvalidConfigError("joint tree needs exactly one root at index 0")
        if np.any(p[1:] >= np.arange(1, k)):
            raise InvalidConfigError("parents must precede their children")
        for kind in set(self.kinds):
            if kind not in JOINT_KINDS:
                raise InvalidConfigError(f"unknown joint kind {kind!r}")
            idx = self.indices(kind)
            if np.any(np.diff(idx) != 1):
                raise InvalidConfigError(f"joint group {kind!r} is not contiguous")
            # group plus its attachment joint(s) outside the group must hang off one joint
            outside = {int(p[i]) for i in idx if p[i] not in idx}
            if kind != BODY and len(outside) != 1:
                raise InvalidConfigError(f"joint group {kind!r} is not connected")

    def indices(self, kind):
        return np.array([i for i, k in enumerate(self.kinds) if k == kind], dtype=int)

    @cached_property
    def rest_joints(self):
        out = np.zeros((len(self), 3))
        for i, par in enumerate(self.parents):
            out[i] = self.rest_offsets[i] if par < 0 else out[par] + self.rest_offsets[i]
        out.setflags(write=False)
        return out

    @cached_property
    def levels(self):
        """Non-root joints grouped by depth, parents always in an earlier group."""
        depth = np.zeros(len(self), dtype=int)
        for i, par in enumerate(self.parents):
            if par >= 0:
                depth[i] = depth[par] + 1
        return tuple(np.nonzero(depth == d)[0] for d in range(1, depth.max() + 1))

    @cached_property
    def ancestors(self):
        """(K, K) mask, ``[k, j]`` true when j is k or one of its ancestors."""
        out = np.zeros((len(self), len(self)), dtype=bool)
        for k in range(len(self)):
            j = k
            while j >= 0:
                out[k, j] = True
                j = self.parents[j]
        out.setflags(write=False)
        return out

    def to_dict(self):
        return {"parents": self.parents.tolist(), "kinds": list(self.kinds),
                "rest_offsets": self.rest_offsets.tolist(), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d):
        return cls(parents=d["parents"], kinds=d["kinds"], rest_offsets=d["rest_offsets"],
                   names=d.get("names", ()))


@dataclass(frozen=True, eq=False)
class BodyModel:
    joint_tree: JointTree
    template_vertices: np.ndarray
    shape_basis: np.ndarray
    expression_basis: np.ndarray
    skin_weights: np.ndarray
    joint_regressor: np.ndarray
    hand_pca_basis: np.ndarray
    angle_limits: np.ndarray
    seed: int = 0
    config: ToyModelConfig = field(default_factory=ToyModelConfig)

    def __post_init__(self):
        for name in ("template_vertices", "shape_basis", "expression_basis", "skin_weights",
                     "joint_regressor", "hand_pca_basis", "angle_limits"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        self.validate()

    def validate(self, tol=1e-9):
        k, n = self.n_joints, self.n_vertices
        shapes = {
            "template_vertices": (n, 3),
            "shape_basis": (self.shape_basis.shape[0], n, 3),
            "expression_basis": (self.expression_basis.shape[0], n, 3),
            "skin_weights": (n, k),
            "joint_regressor": (k, n),
            "angle_limits": (k, 3, 2),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        nh = len(self.joint_tree.indices(LEFT_HAND))
        if self.hand_pca_basis.ndim != 3 or self.hand_pca_basis.shape[0] != 2 \
                or self.hand_pca_basis.shape[2] != 3 * nh:
            raise ShapeError(f"hand_pca_basis has shape {self.hand_pca_basis.shape}")
        for name in ("skin_weights", "joint_regressor"):
            w = getattr(self, name)
            if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > tol:
                raise InvalidConfigError(f"{name} rows must be nonnegative and sum to 1")
        for side in range(2):
            b = self.hand_pca_basis[side]
            if np.max(np.abs(b @ b.T - np.eye(b.shape[0]))) > tol:
                raise InvalidConfigError("hand PCA basis rows must be orthonormal")
        if np.any(self.angle_limits[..., 0] > self.angle_limits[..., 1]):
            raise InvalidConfigError("angle limit minimum exceeds maximum")

    @property
    def n_joints(self):
        return len(self.joint_tree)

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[0]

    @property
    def n_expression(self):
        return self.expression_basis.shape[0]

    @property
    def n_hand_joints(self):
        return len(self.joint_tree.indices(LEFT_HAND))

    @property
    def hand_pca_dim(self):
        return self.hand_pca_basis.shape[1]

    @property
    def parents(self):
        return self.joint_tree.parents

    @cached_property
    def joint_shape_dirs(self):
        """Rest-joint displacement per unit shape coefficient, (S, K, 3)."""
        out = np.einsum("kn,snc->skc", self.joint_regressor, self.shape_basis)
        out.setflags(write=False)
        return out

    @cached_property
    def eps_model(self):
        """Largest rest-pose distance between regressed and kinematic joints."""
        reg = self.joint_regressor @ self.template_vertices
        return float(np.max(np.linalg.norm(reg - self.joint_tree.rest_joints, axis=1)))

    @cached_property
    def extent(self):
        """Largest side of the rest-pose joint bounding box, model units."""
        j = self.joint_tree.rest_joints
        return float(np.max(j.max(axis=0) - j.min(axis=0)))

    def part_indices(self, kind):
        return self.joint_tree.indices(kind)

    def __eq__(self, other):
        if not isinstance(other, BodyModel):
            return NotImplemented
        arrays = ("template_vertices", "shape_basis", "expression_basis", "skin_weights",
                  "joint_regressor", "hand_pca_basis", "angle_limits")
        return (self.seed == other.seed and self.config == other.config
                and self.joint_tree.kinds == other.joint_tree.kinds
                and np.array_equal(self.joint_tree.parents, other.joint_tree.parents)
                and np.array_equal(self.joint_tree.rest_offsets, other.joint_tree.rest_offsets)
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays))

    __hash__ = object.__hash__


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class FullParams:
    """Complete recovery target: pose, shape, expression and camera."""

    theta_global: np.ndarray
    theta_body: np.ndarray
    hand_left: np.ndarray
    hand_right: np.ndarray
    psi_face: np.ndarray
    beta: np.ndarray
    hand_repr: str = "pca"
    camera: object = None

    def __post_init__(self):
        self.theta_global = np.asarray(self.theta_global, dtype=float).reshape(3)
        self.theta_body = np.asarray(self.theta_body, dtype=float).reshape(-1, 3)
        shape = (-1,) if self.hand_repr == "pca" else (-1, 3)
        self.hand_left = np.asarray(self.hand_left, dtype=float).reshape(shape)
        self.hand_right = np.asarray(self.hand_right, dtype=float).reshape(shape)
        self.psi_face = np.asarray(self.psi_face, dtype=float).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)

    @classmethod
    def rest(cls, model, hand_repr="pca", camera=None):
        nh = model.n_hand_joints
        hand = np.zeros(model.hand_pca_dim) if hand_repr == "pca" else np.zeros((nh, 3))
        return cls(np.zeros(3), np.zeros((N_BODY_JOINTS - 1, 3)), hand, hand.copy(),
                   np.zeros(model.n_expression + 3), np.zeros(model.n_shape), hand_repr, camera)

    def validate(self, model=None):
        if self.hand_repr not in ("pca", "full"):
            raise NumericInputError(f"hand_repr must be 'pca' or 'full', got {self.hand_repr!r}")
        arrays = (self.theta_global, self.theta_body, self.hand_left, self.hand_right,
                  self.psi_face, self.beta)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise NumericInputError("parameters contain non-finite entries")
        if np.any(np.abs(self.beta) > MAX_BETA):
            raise NumericInputError(f"shape coefficients must satisfy |beta| <= {MAX_BETA}")
        if model is not None:
            if self.theta_body.shape != (N_BODY_JOINTS - 1, 3):
                raise ShapeError(f"theta_body has shape {self.theta_body.shape}")
            if self.beta.shape != (model.n_shape,) or self.psi_face.shape != (model.n_expression + 3,):
                raise ShapeError("beta or psi_face length does not match the model")
            want = (model.hand_pca_dim,) if self.hand_repr == "pca" else (model.n_hand_joints, 3)
            if self.hand_left.shape != want or self.hand_right.shape != want:
                raise ShapeError(f"hand parameters must have shape {want}")
        return self

    def hand_pose(self, model, side):
        """Expanded (n_hand, 3) axis-angle pose of one hand (0 = left)."""
        h = self.hand_left if side == 0 else self.hand_right
        if self.hand_repr == "full":
            return h
        return (h @ model.hand_pca_basis[side]).reshape(-1, 3)

    def full_pose(self, model):
        """Axis-angle pose of every joint, (K, 3)."""
        self.validate(model)
        pose = np.zeros((model.n_joints, 3))
        pose[0] = self.theta_global
        pose[1:N_BODY_JOINTS] = self.theta_body
        pose[model.part_indices(LEFT_HAND)] = self.hand_pose(model, 0)
        pose[model.part_indices(RIGHT_HAND)] = self.hand_pose(model, 1)
        pose[model.part_indices(JAW)] = self.psi_face[-3:]
        return pose

    @property
    def expression(self):
        return self.psi_face[:-3]

    def copy(self, **changes):
        d = dict(theta_global=self.theta_global.copy(), theta_body=self.theta_body.copy(),
                 hand_left=self.hand_left.copy(), hand_right=self.hand_right.copy(),
                 psi_face=self.psi_face.copy(), beta=self.beta.copy(),
                 hand_repr=self.hand_repr, camera=self.camera)
        d.update(changes)
        return FullParams(**d)

    def to_dict(self):
        out = {"theta_global": self.theta_global.tolist(), "theta_body": self.theta_body.tolist(),
               "hand_repr": self.hand_repr, "hand_left": self.hand_left.tolist(),
               "hand_right": self.hand_right.tolist(), "psi_face": self.psi_face.tolist(),
               "beta": self.beta.tolist()}
        if self.camera is not None:
            out["camera"] = self.camera.to_dict()
        return out

    @classmethod
    def from_dict(cls, d):
        from .projection import camera_from_dict

        cam = camera_from_dict(d["camera"]) if d.get("camera") is not None else None
        return cls(d["theta_global"], d["theta_body"], d["hand_left"], d["hand_right"],
                   d["psi_face"], d["beta"], d.get("hand_repr", "pca"), cam)

    def __eq__(self, other):
        if not isinstance(other, FullParams):
            return NotImplemented
        return self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _limits_for(name, kind):
    if kind == JAW:
        return [(-0.05, 0.45), (-0.1, 0.1), (-0.1, 0.1)]
    if kind in (LEFT_HAND, RIGHT_HAND):
        if "thumb" in name:
            return [(-0.6, 0.6)] * 3
        flex = (-1.4, 0.2) if kind == LEFT_HAND else (-0.2, 1.4)
        return [(-0.25, 0.25), (-0.25, 0.25), flex]
    if name in _BODY_LIMITS:
        return _BODY_LIMITS[name]
    for frag, lim in _BODY_LIMITS.items():
        if frag in name:
            return lim
    raise InvalidConfigError(f"no limits for joint {name!r}")


def _skeleton(cfg, rng):
    names, parents, kinds, pos = [], [], [], []
    for name, par, p in _BODY_TEMPLATE:
        names.append(name)
        parents.append(par)
        kinds.append(BODY)
        pos.append(np.array(p))
    segs = cfg.n_hand_joints // 5
    for side, kind, wrist in ((1.0, LEFT_HAND, _LEFT_WRIST), (-1.0, RIGHT_HAND, _RIGHT_WRIST)):
        mirror = np.array([side, 1.0, 1.0])
        for finger, base, direction in _FINGERS:
            direction = np.array(direction) / np.linalg.norm(direction)
            prev = wrist
            point = pos[wrist] + mirror * np.array(base)
            for s in range(segs):
                if s > 0:
                    point = point + mirror * direction * _SEGMENT_LENGTHS[s - 1]
                names.append(f"{kind}_{finger}{s + 1}")
                parents.append(prev)
                kinds.append(kind)
                pos.append(point)
                prev = len(pos) - 1
    names.append("jaw")
    parents.append(_HEAD)
    kinds.append(JAW)
    pos.append(pos[_HEAD] + np.array([0.0, -0.04, 0.04]))

    pos = np.array(pos)
    offsets = pos.copy()
    offsets[1:] = pos[1:] - pos[np.array(parents[1:])]
    offsets[1:] *= rng.uniform(0.97, 1.03, size=(len(pos) - 1, 1))
    return JointTree(parents, kinds, offsets, names)


def _perpendicular_frame(u):
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    a = np.cross(u, helper)
    a /= np.linalg.norm(a)
    return a, np.cross(u, a)


def build_toy_model(config=None, seed=0):
    """Generate a body model deterministically from ``(config, seed)``."""
    cfg = config or ToyModelConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    tree = _skeleton(cfg, rng)
    K, parents, kinds = len(tree), tree.parents, tree.kinds
    J0 = tree.rest_joints

    # bone of joint j runs from its parent (or a virtual point above the root) to j
    starts = np.array([J0[0] + np.array([0.0, 0.1, 0.0]) if p < 0 else J0[p] for p in parents])
    lengths = np.linalg.norm(J0 - starts, axis=1)
    rings = np.full(K, 2)
    order = sorted(range(K), key=lambda j: (-lengths[j], j))
    extra = cfg.n_vertices // cfg.ring_size - 2 * K
    for i in range(extra):
        rings[order[i % K]] += 1

    radius = np.where(np.array(kinds) == BODY, np.clip(0.22 * lengths, 0.02, 0.09), 0.008)
    radius[np.array(kinds) == JAW] = 0.025
    radius *= rng.uniform(0.9, 1.1, size=K)

    phases = 2 * np.pi * np.arange(cfg.ring_size) / cfg.ring_size
    verts, radial, ring_meta = [], [], []   # ring_meta: (joint, fraction)
    for j in range(K):
        u = (J0[j] - starts[j]) / lengths[j]
        a, b = _perpendicular_frame(u)
        for r in range(rings[j]):
            frac = (r + 1) / rings[j]
            centre = starts[j] + frac * (J0[j] - starts[j])
            dirs = np.cos(phases)[:, None] * a + np.sin(phases)[:, None] * b
            verts.append(centre + radius[j] * dirs)
            radial.append(radius[j] * dirs)
            ring_meta.append((j, frac))
    template = np.concatenate(verts)
    radial = np.concatenate(radial)
    n, m = len(template), cfg.ring_size

    weights = np.zeros((n, K))
    regressor = np.zeros((K, n))
    ring_of = np.repeat(np.arange(len(ring_meta)), m)
    for ri, (j, frac) in enumerate(ring_meta):
        sl = slice(ri * m, (ri + 1) * m)
        p = parents[j]
        if p < 0:
            weights[sl, j] = 1.0
        elif frac < 1.0:
            weights[sl, p] = 1.0
        else:
            weights[sl, p] = 0.5
            weights[sl, j] = 0.5
        if frac == 1.0:
            regressor[j, sl] = 1.0 / m

    # shape modes: per-bone length scaling and girth scaling
    groups = {
        "legs": [i for i, nm in enumerate(tree.names) if any(s in nm for s in ("hip", "knee", "ankle", "foot"))],
        "arms": [i for i, nm in enumerate(tree.names)
                 if any(s in nm for s in ("shoulder", "elbow", "wrist")) or kinds[i] in (LEFT_HAND, RIGHT_HAND)],
        "torso": [i for i, nm in enumerate(tree.names) if any(s in nm for s in ("spine", "neck", "collar", "head"))],
    }
    shape_basis = np.zeros((cfg.n_shape, n, 3))
    for s in range(cfg.n_shape):
        delta, gamma = np.zeros(K), np.zeros(K)
        if s == 0:
            delta[:] = 0.04
        elif s <= 3:
            delta[groups[("legs", "arms", "torso")[s - 1]]] = 0.05
        elif s == 4:
            gamma[:] = 0.1
        else:
            delta = rng.normal(0.0, 0.02, size=K)
            gamma = rng.normal(0.0, 0.05, size=K)
        delta *= rng.uniform(0.8, 1.2)
        dJ = np.zeros((K, 3))
        for j in range(K):
            p = parents[j]
            dJ[j] = (0.0 if p < 0 else dJ[p]) + tree.rest_offsets[j] * delta[j] * (p >= 0)
        for ri, (j, frac) in enumerate(ring_meta):
            p = parents[j]
            start = np.zeros(3) if p < 0 else dJ[p]
            sl = slice(ri * m, (ri + 1) * m)
            shape_basis[s, sl] = start + frac * (dJ[j] - start) + gamma[j] * radial[sl]

    # expression modes move jaw-bone ring vertices only, zero mean per ring
    jaw = tree.indices(JAW)[0]
    expr_basis = np.zeros((cfg.n_expression, n, 3))
    for ri, (j, _) in enumerate(ring_meta):
        if j != jaw:
            continue
        sl = slice(ri * m, (ri + 1) * m)
        d = rng.normal(0.0, 0.004, size=(cfg.n_expression, m, 3))
        expr_basis[:, sl] = d - d.mean(axis=1, keepdims=True)

    # orthonormal hand PCA rows, weighted towards the flexion axis; the right
    # basis mirrors the left one so a coefficient vector means the same gesture
    nh = cfg.n_hand_joints
    axis_scale = np.tile([0.4, 0.4, 1.0], nh)
    g = rng.normal(size=(3 * nh, cfg.hand_pca_dim)) * axis_scale[:, None]
    q, _ = np.linalg.qr(g)
    hand_basis = np.stack([q.T, q.T * MIRROR_AXIS_ANGLE_SIGNS[None].repeat(nh, 0).reshape(-1)])

    limits = np.zeros((K, 3, 2))
    for j in range(K):
        lim = np.array(_limits_for(tree.names[j], kinds[j]))
        if j > 0:
            lim = lim * rng.uniform(0.9, 1.1, size=(3, 1))
        limits[j] = lim

    model = BodyModel(tree, template, shape_basis, expr_basis, weights, regressor,
                      hand_basis, limits, seed=int(seed), config=cfg)
    return model


# ---------------------------------------------------------------------------
# kinematics and skinning
# ---------------------------------------------------------------------------

@dataclass
class Kinematics:
    """World transforms of every joint, optionally with derivatives.

    ``rot`` (..., K, 3, 3) and ``trans`` (..., K, 3) give the joint frames;
    ``trans`` are the posed joint positions.  When derivatives are requested,
    ``d_rot`` (..., K, 3K, 3, 3) and ``d_trans`` (..., K, 3K, 3) differentiate
    with respect to the flattened pose and ``d_trans_beta`` (..., K, S, 3)
    with respect to shape.
    """

    rot: np.ndarray
    trans: np.ndarray
    rest_joints: np.ndarray
    d_rot: np.ndarray = None
    d_trans: np.ndarray = None
    d_trans_beta: np.ndarray = None

    @property
    def joints(self):
        return self.trans

    def relative_transforms(self):
        """(..., K, 3, 4) transforms mapping rest-pose points to posed points."""
        t = self.trans - np.einsum("...kij,...kj->...ki", self.rot, self.rest_joints)
        return np.concatenate([self.rot, t[..., None]], axis=-1)

    def joint_jacobian(self):
        """dJ/dpose as (..., K, 3, 3K) and dJ/dbeta as (..., K, 3, S)."""
        return np.swapaxes(self.d_trans, -1, -2), np.swapaxes(self.d_trans_beta, -1, -2)


def shaped_rest_joints(model, beta):
    return model.joint_tree.rest_joints + np.einsum("...s,skc->...kc", beta, model.joint_shape_dirs)


def kinematics(model, pose, beta, derivatives=False, _rotations=None):
    """Forward kinematics for pose (..., K, 3) and beta (..., S)."""
    pose = np.asarray(pose, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if not (np.all(np.isfinite(pose)) and np.all(np.isfinite(beta))):
        raise NumericInputError("pose or shape contains non-finite entries")
    K, S = model.n_joints, model.n_shape
    if pose.shape[-2:] != (K, 3) or beta.shape[-1] != S:
        raise ShapeError(f"pose must be (..., {K}, 3) and beta (..., {S})")
    batch = np.broadcast_shapes(pose.shape[:-2], beta.shape[:-1])
    pose = np.broadcast_to(pose, batch + (K, 3))
    beta = np.broadcast_to(beta, batch + (S,))
    parents = model.parents

    Jr = shaped_rest_joints(model, beta)
    offsets = Jr.copy()
    offsets[..., 1:, :] = Jr[..., 1:, :] - Jr[..., parents[1:], :]
    if derivatives:
        R, dR = rodrigues_jacobian(pose)
    else:
        R = rodrigues(pose) if _rotations is None else _rotations

    rot = np.empty(batch + (K, 3, 3))
    trans = np.empty(batch + (K, 3))
    rot[..., 0, :, :] = R[..., 0, :, :]
    trans[..., 0, :] = offsets[..., 0, :]
    if derivatives:
        P = 3 * K
        jsd = model.joint_shape_dirs  # (S, K, 3)
        d_off = jsd.copy()
        d_off[:, 1:] = jsd[:, 1:] - jsd[:, parents[1:]]
        d_rot = np.zeros(batch + (K, P, 3, 3))
        d_trans = np.zeros(batch + (K, P, 3))
        d_trans_b = np.zeros(batch + (K, S, 3))
        d_rot[..., 0, 0:3, :, :] = np.moveaxis(dR[..., 0, :, :, :], -1, -3)
        d_trans_b[..., 0, :, :] = d_off[:, 0]
    for ks in model.joint_tree.levels:
        ps = parents[ks]
        rot_p = rot[..., ps, :, :]
        rot[..., ks, :, :] = rot_p @ R[..., ks, :, :]
        trans[..., ks, :] = np.einsum("...nij,...nj->...ni", rot_p, offsets[..., ks, :]) + trans[..., ps, :]
        if derivatives:
            d_rot[..., ks, :, :, :] = d_rot[..., ps, :, :, :] @ R[..., ks, None, :, :]
            cols = 3 * ks[:, None] + np.arange(3)
            d_rot[..., ks[:, None], cols, :, :] += rot_p[..., None, :, :] @ np.moveaxis(dR[..., ks, :, :, :], -1, -3)
            d_trans[..., ks, :, :] = (np.einsum("...npij,...nj->...npi", d_rot[..., ps, :, :, :], offsets[..., ks, :])
                                      + d_trans[..., ps, :, :])
            d_trans_b[..., ks, :, :] = (np.einsum("...nij,snj->...nsi", rot_p, d_off[:, ks])
                                        + d_trans_b[..., ps, :, :])
    if derivatives:
        return Kinematics(rot, trans, Jr, d_rot, d_trans, d_trans_b)
    return Kinematics(rot, trans, Jr)


def joint_jacobian(model, pose, beta):
    """Posed joints (K, 3) with dJ/dpose (K, 3, 3K) and dJ/dbeta (K, 3, S).

    Cheaper than propagating rotation derivatives: a change of joint j's
    local rotation turns every descendant about J_j, so each column is a
    cross product with ``J_k - J_j``.
    """
    R, dR = rodrigues_jacobian(np.asarray(pose, dtype=float))
    kin = kinematics(model, pose, beta, _rotations=R)
    J, K = kin.joints, model.n_joints
    parents = model.parents
    rot_p = np.empty((K, 3, 3))
    rot_p[0] = np.eye(3)
    rot_p[1:] = kin.rot[parents[1:]]
    spin = np.einsum("kija,klj->kail", dR, R)  # dR_a R^T, skew
    axes = np.stack([spin[..., 2, 1], spin[..., 0, 2], spin[..., 1, 0]], axis=-1)  # (K, 3a, 3)
    world = skew(np.einsum("kij,kaj->kai", rot_p, axes))  # (K, 3a, 3, 3)
    lever = J[:, None, :] - J[None, :, :]  # (k, j, 3)
    anc = model.joint_tree.ancestors
    d_pose = np.einsum("jaic,kjc->kija", world, lever * anc[:, :, None]).reshape(K, 3, 3 * K)
    jsd = model.joint_shape_dirs
    d_off = jsd.copy()
    d_off[:, 1:] = jsd[:, 1:] - jsd[:, parents[1:]]
    pushed = np.einsum("jcd,sjd->jcs", rot_p, d_off)
    d_beta = np.einsum("kj,jcs->kcs", anc.astype(float), pushed)
    return J, d_pose, d_beta


def forward_kinematics(model, params):
    """World joint frames and posed joints for ``params`` (a FullParams)."""
    return kinematics(model, params.full_pose(model), params.beta)


def shaped_vertices(model, beta, expression):
    return (model.template_vertices
            + np.einsum("...s,snc->...nc", beta, model.shape_basis)
            + np.einsum("...e,enc->...nc", expression, model.expression_basis))


def skin_pose(model, pose, beta, expression, kin=None):
    """Linear blend skinning from raw arrays; returns (..., N, 3)."""
    kin = kin if kin is not None else kinematics(model, pose, beta)
    G = kin.relative_transforms()  # (..., K, 3, 4)
    T = np.einsum("nk,...kij->...nij", model.skin_weights, G)
    v = shaped_vertices(model, beta, expression)
    return np.einsum("...nij,...nj->...ni", T[..., :3], v) + T[..., 3]


def skin(model, params):
    """Posed mesh vertices (N, 3) for ``params``."""
    return skin_pose(model, params.full_pose(model), params.beta, params.expression)


def regress_joints(model, vertices):
    """Keypoints as convex combinations of vertices, (..., K, 3)."""
    vertices = np.asarray(vertices, dtype=float)
    if vertices.shape[-2:] != (model.n_vertices, 3):
        raise ShapeError(f"expected (..., {model.n_vertices}, 3) vertices, got {vertices.shape}")
    return np.einsum("kn,...nc->...kc", model.joint_regressor, vertices)


def joints(model, params):
    """Keypoints of the posed mesh (K, 3).

    Uses the kinematic joints directly: the regressor averages rings whose
    vertices share skinning weights, so ``regress_joints(skin(...))``
    coincides with them up to rounding.
    """
    return forward_kinematics(model, params).joints


def vertex_jacobian(model, pose, beta, expression):
    """Skinned vertices and their derivatives for a single parameter set.

    Returns ``(v, dv_dpose, dv_dbeta, dv_dexpr)`` with shapes (N, 3),
    (N, 3, 3K), (N, 3, S) and (N, 3, E).
    """
    kin = kinematics(model, pose, beta, derivatives=True)
    v_rest = shaped_vertices(model, beta, expression)
    W = model.skin_weights
    N, K = W.shape
    dv_pose = np.zeros((N, 3, 3 * K))
    dv_beta = np.zeros((N, 3, model.n_shape))
    dv_expr = np.zeros((N, 3, model.n_expression))
    out = np.zeros((N, 3))
    jsd = model.joint_shape_dirs
    for k in range(K):
        idx = np.nonzero(W[:, k])[0]
        if idx.size == 0:
            continue
        w = W[idx, k]
        local = v_rest[idx] - kin.rest_joints[k]
        out[idx] += w[:, None] * (local @ kin.rot[k].T + kin.trans[k])
        dv_pose[idx] += w[:, None, None] * (np.einsum("pij,nj->nip", kin.d_rot[k], local)
                                            + kin.d_trans[k].T[None])
        d_local_b = np.moveaxis(model.shape_basis[:, idx], 0, -1) - jsd[:, k].T[None]  # (n, 3, S)
        dv_beta[idx] += w[:, None, None] * (np.einsum("ij,njs->nis", kin.rot[k], d_local_b)
                                            + kin.d_trans_beta[k].T[None])
        d_local_e = np.moveaxis(model.expression_basis[:, idx], 0, -1)
        dv_expr[idx] += w[:, None, None] * np.einsum("ij,nje->nie", kin.rot[k], d_local_e)
    return out, dv_pose, dv_beta, dv_expr


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def model_to_dict(model):
    return {
        "version": MODEL_FORMAT_VERSION,
        "seed": model.seed,
        "config": asdict(model.config),
        "joint_tree": model.joint_tree.to_dict(),
        "template_vertices": model.template_vertices.tolist(),
        "shape_basis": model.shape_basis.tolist(),
        "expression_basis": model.expression_basis.tolist(),
        "skin_weights": model.skin_weights.tolist(),
        "joint_regressor": model.joint_regressor.tolist(),
        "hand_pca_basis": model.hand_pca_basis.tolist(),
        "angle_limits": model.angle_limits.tolist(),
    }


def model_from_dict(d):
    if not isinstance(d, dict):
        raise ModelFileError("model document must be a JSON object")
    if d.get("version") != MODEL_FORMAT_VERSION:
        raise VersionError(f"unsupported model version {d.get('version')!r}")
    try:
        return BodyModel(
            joint_tree=JointTree.from_dict(d["joint_tree"]),
            template_vertices=d["template_vertices"],
            shape_basis=d["shape_basis"],
            expression_basis=d["expression_basis"],
            skin_weights=d["skin_weights"],
            joint_regressor=d["joint_regressor"],
            hand_pca_basis=d["hand_pca_basis"],
            angle_limits=d["angle_limits"],
            seed=int(d["seed"]),
            config=ToyModelConfig(**d["config"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed model document: {exc}") from exc


def save_model(model, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(model_to_dict(model)))
    tmp.replace(path)


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)
