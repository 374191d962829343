"""Camera models mapping body-centred 3D keypoints to pixels.

Three models are provided:

* perspective: ``u = f_x (x + t_x) / (d + z)``
* weak perspective: ``u = s x + t_u`` (depth ignored)
* depth-to-scale (D2S): the weak-perspective output rescaled per point by
  ``d / (d + z)``, which restores foreshortening with one extra scalar.

Points are expressed relative to the body centre, already rotated into the
camera axes; the principal point sits at the image origin.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, InvalidConfigError, ShapeError

EPS_DEPTH = 1e-6

PERSPECTIVE, WEAK, D2S_KIND = "perspective", "weak", "d2s"
CAMERA_KINDS = (PERSPECTIVE, WEAK, D2S_KIND)
PART_TAGS = ("body", "left_hand", "right_hand", "face")


@dataclass(frozen=True)
class Perspective:
    fx: float
    fy: float
    t_c: tuple  # (t_x, t_y, d)

    kind = PERSPECTIVE

    def __post_init__(self):
        object.__setattr__(self, "t_c", tuple(float(v) for v in self.t_c))
        if len(self.t_c) != 3:
            raise ShapeError("t_c must have three entries")
        if not self.d > 0:
            raise InvalidConfigError("perspective camera needs d > 0")

    @property
    def d(self):
        return self.t_c[2]

    def params(self):
        return np.array([self.fx, self.fy, *self.t_c])

    def to_dict(self):
        return {"kind": self.kind, "fx": self.fx, "fy": self.fy, "t_c": list(self.t_c)}


@dataclass(frozen=True)
class WeakPerspective:
    s: float
    t: tuple = (0.0, 0.0)

    kind = WEAK

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        if not self.s > 0:
            raise InvalidConfigError("weak-perspective camera needs s > 0")

    def params(self):
        return np.array([self.s, *self.t])

    def to_dict(self):
        return {"kind": self.kind, "s": self.s, "t": list(self.t)}


@dataclass(frozen=True)
class D2S:
    s: float
    t: tuple = (0.0, 0.0)
    d: float = 1.0

    kind = D2S_KIND

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        if not self.d > 0:
            raise InvalidConfigError("D2S camera needs d > 0")

    def params(self):
        return np.array([self.s, *self.t, self.d])

    def to_dict(self):
        return {"kind": self.kind, "s": self.s, "t": list(self.t), "d": self.d}


def camera_from_dict(d):
    kind = d.get("kind")
    if kind == PERSPECTIVE:
        return Perspective(d["fx"], d["fy"], d["t_c"])
    if kind == WEAK:
        return WeakPerspective(d["s"], d["t"])
    if kind == D2S_KIND:
        return D2S(d["s"], d["t"], d["d"])
    raise InvalidConfigError(f"unknown camera kind {kind!r}")


def camera_from_params(kind, p):
    """Inverse of ``camera.params()``."""
    p = [float(v) for v in p]
    if kind == PERSPECTIVE:
        return Perspective(p[0], p[1], p[2:5])
    if kind == WEAK:
        return WeakPerspective(p[0], p[1:3])
    if kind == D2S_KIND:
        return D2S(p[0], p[1:3], p[3])
    raise InvalidConfigError(f"unknown camera kind {kind!r}")


def d2s_equivalent(cam):
    """The D2S camera that reproduces an isotropic perspective camera exactly."""
    f = cam.fx
    d = cam.d
    return D2S(f / d, (f * cam.t_c[0] / d, f * cam.t_c[1] / d), d)


@dataclass
class Keypoints3D:
    coords: np.ndarray
    visible: np.ndarray = None
    parts: tuple = ()

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"3D keypoints must be (K, 3), got {self.coords.shape}")
        self.visible = _visibility(self.visible, len(self.coords))
        self.parts = tuple(self.parts)

    def to_dict(self):
        return {"coords": self.coords.tolist(), "visible": self.visible.tolist(), "parts": list(self.parts)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["coords"], d["visible"], d["parts"])


@dataclass
class Keypoints2D:
    coords: np.ndarray
    visible: np.ndarray = None
    parts: tuple = ()

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ShapeError(f"2D keypoints must be (K, 2), got {self.coords.shape}")
        self.visible = _visibility(self.visible, len(self.coords))
        self.parts = tuple(self.parts)

    def part_indices(self, part):
        return np.array([i for i, p in enumerate(self.parts) if p == part], dtype=int)

    def to_dict(self):
        # invisible points may carry NaN, which JSON cannot hold
        coords = np.where(np.isfinite(self.coords), self.coords, 0.0)
        return {"coords": coords.tolist(), "visible": self.visible.tolist(), "parts": list(self.parts)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["coords"], d["visible"], d["parts"])


def _visibility(visible, k):
    if visible is None:
        return np.ones(k, dtype=bool)
    visible = np.asarray(visible, dtype=bool)
    if visible.shape != (k,):
        raise ShapeError("visibility must hold one flag per keypoint")
    return visible


def _unwrap(J):
    if isinstance(J, Keypoints3D):
        return J.coords, J.visible, J
    pts = np.asarray(J, dtype=float)
    if pts.shape[-1] != 3:
        raise ShapeError(f"expected (..., 3) points, got {pts.shape}")
    return pts, None, None


def _wrap(uv, vis, src):
    if src is None:
        return uv
    return Keypoints2D(uv, src.visible.copy(), src.parts)


def _check_depth(depth, visible):
    bad = depth <= EPS_DEPTH
    if visible is not None:
        bad &= visible
    if np.any(bad):
        raise BehindCameraError(np.flatnonzero(bad.reshape(-1)) if bad.ndim > 1 else np.flatnonzero(bad))


def project_perspective(J, cam):
    """Perspective projection; ``J`` is (..., 3) array or Keypoints3D."""
    pts, vis, src = _unwrap(J)
    tx, ty, d = cam.t_c
    depth = d + pts[..., 2]
    _check_depth(depth, vis)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * (pts[..., 0] + tx) / depth
        v = cam.fy * (pts[..., 1] + ty) / depth
    uv = np.stack([u, v], axis=-1)
    if vis is not None:
        uv[~vis] = np.nan
    return _wrap(uv, vis, src)


def project_weak(J, cam):
    """Weak-perspective projection: scaled orthographic plus translation."""
    pts, vis, src = _unwrap(J)
    uv = cam.s * pts[..., :2] + np.asarray(cam.t)
    if vis is not None:
        uv[~vis] = np.nan
    return _wrap(uv, vis, src)


def d2s_scale(z, d):
    """Per-point projection scale ``d / (d + z)``."""
    z = np.asarray(z, dtype=float)
    depth = d + z
    _check_depth(np.atleast_1d(depth), None)
    return d / depth


def project_d2s(J, cam):
    """Weak-perspective output rescaled by each point's depth-to-scale factor."""
    pts, vis, src = _unwrap(J)
    depth = cam.d + pts[..., 2]
    _check_depth(depth, vis)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = cam.d / depth
    uv = scale[..., None] * (cam.s * pts[..., :2] + np.asarray(cam.t))
    if vis is not None:
        uv[~vis] = np.nan
    return _wrap(uv, vis, src)


def project(J, cam):
    if cam.kind == PERSPECTIVE:
        return project_perspective(J, cam)
    if cam.kind == WEAK:
        return project_weak(J, cam)
    return project_d2s(J, cam)


def approximation_gap(z, fx, tx, d):
    """Gap between the centre-plane factors and the exact per-point factors.

    Weak perspective uses ``s = fx/d`` and ``t_u = fx tx/d`` for every point,
    whereas perspective uses ``fx/(d+z)`` and ``fx tx/(d+z)``.  Returns
    ``(ds, dtu)`` with ``ds = fx/d - fx/(d+z) = (fx/d) z/(d+z)`` and the
    analogous translation gap, so ``(fx/d - ds) x + (fx tx/d - dtu)`` equals
    the perspective ``u``.
    """
    z = np.asarray(z, dtype=float)
    depth = d + z
    if d <= EPS_DEPTH:
        raise BehindCameraError([], "camera distance must be positive")
    _check_depth(np.atleast_1d(depth), None)
    ratio = z / depth
    ds = fx / d * ratio
    dtu = fx * tx / d * ratio
    direct = fx / d - fx / depth
    if not np.allclose(direct, ds, rtol=1e-9, atol=1e-9 * abs(fx / d)):
        raise ArithmeticError("scale gap factorisation disagrees with the direct difference")
    return ds, dtu


def camera_param_names(kind):
    return {PERSPECTIVE: ("fx", "fy", "tx", "ty", "d"),
            WEAK: ("s", "tu", "tv"),
            D2S_KIND: ("s", "tu", "tv", "d")}[kind]


def projection_jacobian(kind, J, cam):
    """Analytic derivatives of the projected coordinates.

    Returns ``(uv, d_points, d_cam)`` where ``d_points`` is (..., 2, 3)
    (each output coordinate w.r.t. its own point) and ``d_cam`` is
    (..., 2, P) w.r.t. ``cam.params()`` in the order of
    :func:`camera_param_names`.
    """
    pts, vis, _ = _unwrap(J)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    shape = pts.shape[:-1]
    dp = np.zeros(shape + (2, 3))
    if kind == WEAK:
        s, (tu, tv) = cam.s, cam.t
        uv = np.stack([s * x + tu, s * y + tv], axis=-1)
        dp[..., 0, 0] = s
        dp[..., 1, 1] = s
        dc = np.zeros(shape + (2, 3))
        dc[..., 0, 0], dc[..., 1, 0] = x, y
        dc[..., 0, 1] = 1.0
        dc[..., 1, 2] = 1.0
        return uv, dp, dc

    if kind == PERSPECTIVE:
        fx, fy = cam.fx, cam.fy
        tx, ty, d = cam.t_c
        depth = d + z
        _check_depth(depth, vis)
        inv = 1.0 / depth
        u, v = fx * (x + tx) * inv, fy * (y + ty) * inv
        dp[..., 0, 0] = fx * inv
        dp[..., 0, 2] = -u * inv
        dp[..., 1, 1] = fy * inv
        dp[..., 1, 2] = -v * inv
        dc = np.zeros(shape + (2, 5))
        dc[..., 0, 0] = (x + tx) * inv
        dc[..., 1, 1] = (y + ty) * inv
        dc[..., 0, 2] = fx * inv
        dc[..., 1, 3] = fy * inv
        dc[..., 0, 4] = -u * inv
        dc[..., 1, 4] = -v * inv
        return np.stack([u, v], axis=-1), dp, dc

    if kind == D2S_KIND:
        s, (tu, tv), d = cam.s, cam.t, cam.d
        depth = d + z
        _check_depth(depth, vis)
        inv = 1.0 / depth
        si = d * inv
        wu, wv = s * x + tu, s * y + tv
        dp[..., 0, 0] = si * s
        dp[..., 1, 1] = si * s
        dp[..., 0, 2] = -wu * d * inv * inv
        dp[..., 1, 2] = -wv * d * inv * inv
        dc = np.zeros(shape + (2, 4))
        dc[..., 0, 0], dc[..., 1, 0] = si * x, si * y
        dc[..., 0, 1] = si
        dc[..., 1, 2] = si
        dsi_dd = z * inv * inv
        dc[..., 0, 3] = wu * dsi_dd
        dc[..., 1, 3] = wv * dsi_dd
        return np.stack([si * wu, si * wv], axis=-1), dp, dc

    raise InvalidConfigError(f"unknown camera kind {kind!r}")
