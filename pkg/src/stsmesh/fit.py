"""Optimisation-based recovery of body parameters from 2D keypoints.

The objective is a weighted sum of

* ``L_2D``: mean absolute error over visible projected coordinates (pixels),
* ``L_3D``: mean squared error on 3D joints,
* ``L_pm``: mean squared errors on joint rotation matrices, expression and
  shape,
* ``L_r``: squared hinge on joint-angle limits plus ``lambda_beta |beta|^2``.

Fitting runs in two stages (camera and root orientation from several
starting azimuths, then everything jointly) using scaled first-order
descent with backtracking; only steps that lower the objective are kept.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bodymodel as bm
from .bodymodel import JAW, LEFT_HAND, RIGHT_HAND, FullParams
from .errors import BehindCameraError, ConfigurationError, InsufficientKeypointsError, InvalidConfigError
from .metrics import bucketed_report, mpjpe, pa_mpjpe, root_relative
from .projection import (D2S_KIND, PERSPECTIVE, WEAK, D2S as D2SCamera, Perspective, WeakPerspective,
                         camera_from_params, project, projection_jacobian)
from .rotation import rodrigues, rodrigues_jacobian

PAPER_WEIGHTS = {"w_pm": 20.0, "w_r": 0.5, "w_2d": 6.0, "w_3d": 60.0}
MIN_BODY_KEYPOINTS = 6


@dataclass
class FitConfig:
    camera_kind: str = D2S_KIND
    w_pm: float = PAPER_WEIGHTS["w_pm"]
    w_r: float = PAPER_WEIGHTS["w_r"]
    w_2d: float = PAPER_WEIGHTS["w_2d"]
    w_3d: float = PAPER_WEIGHTS["w_3d"]
    lambda_beta: float = 1.0
    stage1_iters: int = 30
    stage2_iters: int = 400
    n_starts: int = 8
    tol: float = 1e-5
    patience: int = 15
    step: float = 0.02
    step_growth: float = 1.3
    max_step: float = 0.1
    max_halvings: int = 20
    momentum: float = 0.95
    rms_decay: float = 0.99
    d_init_factors: tuple = (4.0,)
    n_probe: int = 1
    probe_iters: int = 60
    n_finish: int = 1
    hold_depth: bool = False
    init_jitter: float = 0.0
    seed: int = 0

    def validate(self):
        if self.camera_kind not in (PERSPECTIVE, WEAK, D2S_KIND):
            raise InvalidConfigError(f"unknown camera kind {self.camera_kind!r}")
        for name in ("w_pm", "w_r", "w_2d", "w_3d", "lambda_beta"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be nonnegative")
        if min(self.stage1_iters, self.stage2_iters, self.n_starts, self.n_probe, self.probe_iters,
               self.n_finish) < 1:
            raise InvalidConfigError("iteration counts must be at least 1")
        self.d_init_factors = tuple(float(v) for v in self.d_init_factors)
        if not self.d_init_factors or min(self.d_init_factors) <= 0:
            raise InvalidConfigError("d_init_factors must be positive")
        return self

    def weights(self):
        return {"w_pm": self.w_pm, "w_r": self.w_r, "w_2d": self.w_2d, "w_3d": self.w_3d}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown fit config fields: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class Targets:
    """Supervision for one frame; any subset may be present."""

    j2d: object = None          # Keypoints2D, pixels
    j3d: np.ndarray = None      # (K, 3) body-centred joints
    params: FullParams = None

    def empty(self):
        return self.j2d is None and self.j3d is None and self.params is None


@dataclass
class FitResult:
    params: FullParams
    losses: dict
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"params": self.params.to_dict(), "losses": self.losses, "iterations": self.iterations,
                "converged": self.converged, "trace": self.trace, "diagnostics": self.diagnostics}


# ---------------------------------------------------------------------------
# parameter vector
# ---------------------------------------------------------------------------

_CAMERA_SIZES = {WEAK: 3, D2S_KIND: 4, PERSPECTIVE: 4}


class Layout:
    """Flat parameter vector for one model and camera kind.

    Order: root (3), body (63), left hand PCA, right hand PCA, psi_face,
    beta, camera.  Perspective cameras use the single-focal simplification
    ``(f, t_x, t_y, d)``.
    """

    def __init__(self, model, kind):
        self.model, self.kind = model, kind
        pca, E, S = model.hand_pca_dim, model.n_expression, model.n_shape
        sizes = [("global", 3), ("body", 3 * (bm.N_BODY_JOINTS - 1)), ("hand_left", pca),
                 ("hand_right", pca), ("psi", E + 3), ("beta", S)]
        if kind is not None:
            sizes.append(("camera", _CAMERA_SIZES[kind]))
        self.slices, start = {}, 0
        for name, n in sizes:
            self.slices[name] = slice(start, start + n)
            start += n
        self.size = start
        self.n_pose_block = self.slices["psi"].stop
        self.pose_map = self._pose_map()

    def _pose_map(self):
        m, K = self.model, self.model.n_joints
        M = np.zeros((3 * K, self.n_pose_block))
        M[0:3, self.slices["global"]] = np.eye(3)
        M[3:3 * bm.N_BODY_JOINTS, self.slices["body"]] = np.eye(3 * (bm.N_BODY_JOINTS - 1))
        for side, kind, name in ((0, LEFT_HAND, "hand_left"), (1, RIGHT_HAND, "hand_right")):
            rows = (3 * m.part_indices(kind)[:, None] + np.arange(3)).reshape(-1)
            M[np.ix_(rows, np.arange(self.slices[name].start, self.slices[name].stop))] = m.hand_pca_basis[side].T
        jaw = m.part_indices(JAW)[0]
        psi = self.slices["psi"]
        M[3 * jaw:3 * jaw + 3, psi.stop - 3:psi.stop] = np.eye(3)
        return M

    def pack(self, params, camera=None):
        if params.hand_repr != "pca":
            raise InvalidConfigError("fitting works on PCA hand parameters")
        x = np.zeros(self.size)
        x[self.slices["global"]] = params.theta_global
        x[self.slices["body"]] = params.theta_body.reshape(-1)
        x[self.slices["hand_left"]] = params.hand_left
        x[self.slices["hand_right"]] = params.hand_right
        x[self.slices["psi"]] = params.psi_face
        x[self.slices["beta"]] = params.beta
        if self.kind is not None:
            cam = camera if camera is not None else params.camera
            x[self.slices["camera"]] = camera_vector(cam, self.kind)
        return x

    def unpack(self, x):
        cam = vector_camera(x[self.slices["camera"]], self.kind) if self.kind is not None else None
        return FullParams(x[self.slices["global"]].copy(), x[self.slices["body"]].reshape(-1, 3).copy(),
                          x[self.slices["hand_left"]].copy(), x[self.slices["hand_right"]].copy(),
                          x[self.slices["psi"]].copy(), x[self.slices["beta"]].copy(), "pca", cam)

    def pose(self, x):
        return (self.pose_map @ x[:self.n_pose_block]).reshape(-1, 3)


def camera_vector(cam, kind):
    if kind == PERSPECTIVE:
        if cam.kind != PERSPECTIVE:
            raise InvalidConfigError("perspective fit needs a perspective camera")
        return np.array([0.5 * (cam.fx + cam.fy), *cam.t_c])
    if kind != cam.kind:
        raise InvalidConfigError(f"camera kind {cam.kind!r} does not match {kind!r}")
    return cam.params()


def vector_camera(v, kind):
    if kind == PERSPECTIVE:
        return Perspective(v[0], v[0], v[1:4])
    return camera_from_params(kind, v)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def _hinge(pose, limits):
    lo, hi = limits[..., 0], limits[..., 1]
    over = np.maximum(pose - hi, 0.0)
    under = np.maximum(lo - pose, 0.0)
    return over - under


def rationality_penalty(params, model, lambda_beta=1.0):
    """Squared joint-limit violations (root excluded) plus shape magnitude."""
    pose = params.full_pose(model)
    viol = _hinge(pose[1:], model.angle_limits[1:])
    return float(np.sum(viol * viol) + lambda_beta * np.sum(params.beta * params.beta))


def _objective(x, layout, targets, weights, lambda_beta, grad=True):
    """Total loss, per-term breakdown and gradient w.r.t. the flat vector."""
    model, kind = layout.model, layout.kind
    K = model.n_joints
    pose = layout.pose(x)
    beta = x[layout.slices["beta"]]
    if grad:
        J, dJ_dpose, dJ_dbeta = bm.joint_jacobian(model, pose, beta)
    else:
        J = bm.kinematics(model, pose, beta).joints
    g = np.zeros(layout.size) if grad else None
    dL_dJ = np.zeros((K, 3))
    dL_dpose = np.zeros(3 * K)
    terms = {}

    if targets.j2d is not None:
        if kind is None:
            raise ConfigurationError("2D targets need a camera")
        cam = vector_camera(x[layout.slices["camera"]], kind)
        vis = targets.j2d.visible
        if grad:
            uv, dp, dc = projection_jacobian(kind, J[vis], cam)
        else:
            uv = project(J[vis], cam)
        r = uv - targets.j2d.coords[vis]
        n = r.size
        terms["L_2D"] = float(np.sum(np.abs(r)) / n)
        if grad:
            gu = np.sign(r) * (weights["w_2d"] / n)
            dL_dJ[vis] += np.einsum("kc,kcd->kd", gu, dp)
            dcam = np.einsum("kc,kcp->p", gu, dc)
            if kind == PERSPECTIVE:
                dcam = np.array([dcam[0] + dcam[1], dcam[2], dcam[3], dcam[4]])
            g[layout.slices["camera"]] += dcam

    if targets.j3d is not None:
        diff = J - targets.j3d
        terms["L_3D"] = float(np.mean(diff * diff))
        if grad:
            dL_dJ += weights["w_3d"] * 2.0 * diff / diff.size

    if targets.params is not None:
        gt = targets.params
        if grad:
            R, dR = rodrigues_jacobian(pose)
        else:
            R = rodrigues(pose)
        R_gt = rodrigues(gt.full_pose(model))
        dRot = R - R_gt
        expr = x[layout.slices["psi"]][:-3]
        dexp = expr - gt.expression
        dbeta = beta - gt.beta
        terms["L_pm"] = float(np.mean(dRot * dRot) + np.mean(dexp * dexp) + np.mean(dbeta * dbeta))
        if grad:
            dL_dpose += weights["w_pm"] * (2.0 / dRot.size) * np.einsum("kij,kija->ka", dRot, dR).reshape(-1)
            psi = layout.slices["psi"]
            g[psi.start:psi.stop - 3] += weights["w_pm"] * 2.0 * dexp / dexp.size
            g[layout.slices["beta"]] += weights["w_pm"] * 2.0 * dbeta / dbeta.size

    viol = _hinge(pose[1:], model.angle_limits[1:])
    terms["L_r"] = float(np.sum(viol * viol) + lambda_beta * np.sum(beta * beta))
    if grad:
        dL_dpose[3:] += weights["w_r"] * 2.0 * viol.reshape(-1)
        g[layout.slices["beta"]] += weights["w_r"] * 2.0 * lambda_beta * beta

    key = {"L_2D": "w_2d", "L_3D": "w_3d", "L_pm": "w_pm", "L_r": "w_r"}
    total = math.fsum(weights[key[t]] * v for t, v in terms.items())
    if grad:
        dL_dpose += np.einsum("kc,kcp->p", dL_dJ, dJ_dpose)
        g[:layout.n_pose_block] += dL_dpose @ layout.pose_map
        g[layout.slices["beta"]] += np.einsum("kc,kcs->s", dL_dJ, dJ_dbeta)
    return total, terms, g


def _weights(weights):
    w = dict(PAPER_WEIGHTS)
    if weights:
        w.update(weights)
    return w


def loss_total(params, targets, weights=None, model=None, lambda_beta=1.0, camera_kind=None):
    """Weighted objective for ``params``; returns ``(total, breakdown)``.

    The breakdown holds each active term plus the weights in use.
    """
    if targets.empty():
        raise ConfigurationError("loss_total needs at least one target")
    w = _weights(weights)
    kind = camera_kind or (params.camera.kind if params.camera is not None else None)
    layout = Layout(model, kind if targets.j2d is not None else None)
    x = layout.pack(params)
    total, terms, _ = _objective(x, layout, targets, w, lambda_beta, grad=False)
    return total, {**terms, "total": total, "weights": w}


def loss_gradient(params, targets, weights=None, model=None, lambda_beta=1.0, camera_kind=None):
    """Analytic gradient of :func:`loss_total` over the flat parameter vector.

    Returns ``(total, gradient, layout)``.
    """
    if targets.empty():
        raise ConfigurationError("loss_total needs at least one target")
    w = _weights(weights)
    kind = camera_kind or (params.camera.kind if params.camera is not None else None)
    layout = Layout(model, kind if targets.j2d is not None else None)
    x = layout.pack(params)
    total, _, g = _objective(x, layout, targets, w, lambda_beta, grad=True)
    return total, g, layout


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class _Problem:
    """Objective in optimiser coordinates.

    Positive camera factors are optimised in log space and image-plane
    translations as ``t / s`` so every coordinate has model-like units.  The
    D2S distance is optimised as inverse depth ``extent / d``: its effect on
    the image is close to linear and the weak limit sits at zero, whereas a
    log-distance coordinate turns flat at long range and drifts under the
    normalised steps.
    """

    def __init__(self, layout, targets, weights, lambda_beta):
        self.layout, self.targets = layout, targets
        self.weights, self.lambda_beta = weights, lambda_beta
        self.cam = layout.slices["camera"]
        self.extent = layout.model.extent
        self.evaluations = 0

    def to_natural(self, y):
        x = y.copy()
        c = y[self.cam]
        if self.layout.kind == PERSPECTIVE:
            x[self.cam] = [math.exp(c[0]), c[1], c[2], math.exp(c[3])]
        else:
            s = math.exp(c[0])
            nat = [s, s * c[1], s * c[2]]
            if self.layout.kind == D2S_KIND:
                if not c[3] > 0:
                    raise InvalidConfigError("inverse depth must be positive")
                nat.append(self.extent / c[3])
            x[self.cam] = nat
        return x

    def from_natural(self, x):
        y = x.copy()
        c = x[self.cam]
        if self.layout.kind == PERSPECTIVE:
            y[self.cam] = [math.log(c[0]), c[1], c[2], math.log(c[3])]
        else:
            opt = [math.log(c[0]), c[1] / c[0], c[2] / c[0]]
            if self.layout.kind == D2S_KIND:
                opt.append(self.extent / c[3])
            y[self.cam] = opt
        return y

    def value(self, y):
        self.evaluations += 1
        try:
            f, _, _ = _objective(self.to_natural(y), self.layout, self.targets, self.weights,
                                 self.lambda_beta, grad=False)
        except (BehindCameraError, InvalidConfigError, OverflowError):
            return math.inf
        return f if math.isfinite(f) else math.inf

    def value_grad(self, y):
        self.evaluations += 1
        try:
            x = self.to_natural(y)
            f, terms, g = _objective(x, self.layout, self.targets, self.weights, self.lambda_beta, grad=True)
        except (BehindCameraError, InvalidConfigError, OverflowError):
            return math.inf, {}, None
        if not math.isfinite(f):
            return math.inf, terms, None
        c = x[self.cam]
        gc = g[self.cam].copy()
        gy = g.copy()
        if self.layout.kind == PERSPECTIVE:
            gy[self.cam] = [gc[0] * c[0], gc[1], gc[2], gc[3] * c[3]]
        else:
            s = c[0]
            out = [gc[0] * s + gc[1] * c[1] + gc[2] * c[2], gc[1] * s, gc[2] * s]
            if self.layout.kind == D2S_KIND:
                out.append(-gc[3] * c[3] * c[3] / self.extent)
            gy[self.cam] = out
        return f, terms, gy


def _descend(problem, y, active, cfg, iters, trace):
    """Adaptive first-order descent with backtracking.

    The direction is the bias-corrected running mean of the gradient over
    its running RMS; each step length is halved until the objective
    drops.  Returns ``(y, f, iterations, stalled)``.
    """
    f, _, g = problem.value_grad(y)
    if not math.isfinite(f):
        return y, f, 0, True
    m = np.zeros_like(y)
    v = np.zeros_like(y)
    step = cfg.step
    calm = 0
    it = 0
    for it in range(1, iters + 1):
        g = np.where(active, g, 0.0)
        m = cfg.momentum * m + (1 - cfg.momentum) * g
        v = cfg.rms_decay * v + (1 - cfg.rms_decay) * g * g
        scale = np.sqrt(v / (1 - cfg.rms_decay ** it)) + 1e-12
        direction = -(m / (1 - cfg.momentum ** it)) / scale
        if direction @ g >= 0:
            direction = -g / scale
            m[:] = 0.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            y_new = y + step * direction
            f_new, _, g_new = problem.value_grad(y_new)
            if f_new < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return y, f, it, True
        calm = calm + 1 if (f - f_new) <= cfg.tol * max(f, 1e-12) else 0
        y, f, g = y_new, f_new, g_new
        trace.append(f)
        step = min(step * cfg.step_growth, cfg.max_step)
        if calm >= cfg.patience:
            break
    return y, f, it, False


def _initial_camera(j2d, model, kind, d_factor):
    pts = j2d.coords[j2d.visible & np.array([p == "body" for p in j2d.parts])]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    rest = model.joint_tree.rest_joints[:bm.N_BODY_JOINTS]
    rest_h = float(np.ptp(rest[:, 1]))
    s = max(float(hi[1] - lo[1]) / rest_h, 1e-3)
    centre = 0.5 * (lo + hi)
    rest_centre = 0.5 * (rest.min(axis=0) + rest.max(axis=0))[:2]
    t = centre - s * rest_centre
    d = d_factor * model.extent
    if kind == WEAK:
        return WeakPerspective(s, t)
    if kind == D2S_KIND:
        return D2SCamera(s, t, d)
    f = s * d
    return Perspective(f, f, (t[0] / s, t[1] / s, d))


def _log_depth(y, layout):
    # optimiser coordinate: log f for perspective, inverse depth for D2S
    c = y[layout.slices["camera"]][3]
    return c if layout.kind == PERSPECTIVE else -math.log(c)


def _distinct(candidates, layout, n, min_angle=0.5, min_log_d=0.3):
    """Up to ``n`` candidates (sorted best first) whose root orientations or
    distances differ from every already chosen one."""
    chosen = []
    for c in candidates:
        R = rodrigues(c["y"][layout.slices["global"]])
        dup = False
        for o in chosen:
            Ro = rodrigues(o["y"][layout.slices["global"]])
            angle = math.acos(min(1.0, max(-1.0, (np.trace(R.T @ Ro) - 1.0) / 2.0)))
            same_d = layout.kind == WEAK or abs(_log_depth(c["y"], layout) - _log_depth(o["y"], layout)) < min_log_d
            if angle < min_angle and same_d:
                dup = True
                break
        if not dup:
            chosen.append(c)
            if len(chosen) == n:
                break
    return chosen


def fit_frame(j2d, model, cfg=None, init=None):
    """Recover parameters and camera from 2D keypoints.

    Stage 1 optimises the camera and root orientation with the pose held at
    rest, restarting from ``cfg.n_starts`` azimuths; stage 2 optimises all
    parameters.  Stage 1 is repeated once per entry of ``cfg.d_init_factors``
    (the distance initialisation for cameras that have one, with a shifted
    azimuth grid for all kinds).  The ``cfg.n_probe`` best distinct stage-1
    results get ``cfg.probe_iters`` joint iterations each; the
    ``cfg.n_finish`` lowest continue to the full stage-2 budget and the lowest
    final objective wins.  With ``cfg.hold_depth`` the D2S distance keeps its
    initial value through stage 1 and the probes and is freed only for the
    rest of stage 2.  A fit that never lowers the objective returns
    ``converged=False`` with diagnostics instead of raising.
    """
    cfg = (cfg or FitConfig()).validate()
    body = np.array([p == "body" for p in j2d.parts])
    n_body = int(np.sum(j2d.visible & body))
    if n_body < MIN_BODY_KEYPOINTS:
        raise InsufficientKeypointsError(
            f"need at least {MIN_BODY_KEYPOINTS} visible body keypoints, got {n_body}")
    kind = cfg.camera_kind
    layout = Layout(model, kind)
    targets = Targets(j2d=j2d)
    problem = _Problem(layout, targets, cfg.weights(), cfg.lambda_beta)
    rng = np.random.default_rng(cfg.seed)
    jitter = rng.normal(0.0, cfg.init_jitter, layout.n_pose_block) if cfg.init_jitter > 0 else 0.0

    # one restart per distance factor; restarts also shift the azimuth grid so
    # every camera kind gets the same search budget
    n_restarts = len(cfg.d_init_factors)
    if init is not None:
        starts = [(problem.from_natural(layout.pack(init)), [None])]
    else:
        starts = []
        for r, factor in enumerate(cfg.d_init_factors):
            x0 = layout.pack(FullParams.rest(model), _initial_camera(j2d, model, kind, factor))
            x0[:layout.n_pose_block] += jitter
            offset = 2 * math.pi * r / (cfg.n_starts * n_restarts)
            azimuths = [offset + 2 * math.pi * i / cfg.n_starts for i in range(cfg.n_starts)]
            starts.append((problem.from_natural(x0), azimuths))

    stage1 = np.zeros(layout.size, dtype=bool)
    stage1[layout.slices["global"]] = True
    stage1[layout.slices["camera"]] = True
    everything = np.ones(layout.size, dtype=bool)
    probing = everything
    if cfg.hold_depth and kind == D2S_KIND:
        # depth is poorly observed until the pose is roughly right
        depth = layout.slices["camera"].start + 3
        stage1[depth] = False
        probing = everything.copy()
        probing[depth] = False
    candidates = []
    f_start = math.inf
    for y0, azimuths in starts:
        f_start = min(f_start, problem.value(y0))
        for az in azimuths:
            y = y0.copy()
            if az is not None:
                y[layout.slices["global"]] += [0.0, az, 0.0]
            trace = [problem.value(y)]
            y, f, it, _ = _descend(problem, y, stage1, cfg, cfg.stage1_iters, trace)
            candidates.append({"y": y, "f": f, "it1": it, "trace": trace})
    candidates = _distinct(sorted(candidates, key=lambda c: c["f"]), layout, cfg.n_probe)
    if len(candidates) > 1:
        # short joint refinement of each distinct candidate, then only the best continues
        for c in candidates:
            c["y"], c["f"], c["it2"], c["stalled"] = _descend(problem, c["y"], probing, cfg,
                                                            cfg.probe_iters, c["trace"])
        candidates.sort(key=lambda c: c["f"])
    for c in candidates[:cfg.n_finish]:
        done = c.get("it2", 0)
        # a probe that stalled with depth held may still move once depth is free
        if (probing is not everything or not c.get("stalled", False)) and done < cfg.stage2_iters:
            c["y"], c["f"], more, c["stalled"] = _descend(problem, c["y"], everything, cfg,
                                                          cfg.stage2_iters - done, c["trace"])
            done += more
        c.update(f_start=f_start, it2=done, hit_cap=done >= cfg.stage2_iters and not c.get("stalled", False))
    best = min(candidates[:cfg.n_finish], key=lambda c: c["f"])

    x = problem.to_natural(best["y"])
    params = layout.unpack(x)
    _, terms, _ = _objective(x, layout, targets, cfg.weights(), cfg.lambda_beta, grad=False)
    f, f_start = best["f"], best["f_start"]
    improved = f < f_start
    diagnostics = {"start_loss": f_start, "final_loss": f, "evaluations": problem.evaluations,
                   "stage1_iterations": best["it1"], "stage2_iterations": best["it2"],
                   "hit_iteration_cap": best["hit_cap"]}
    if not improved:
        diagnostics["reason"] = "objective never decreased from its starting value"
    return FitResult(params, {**terms, "total": f}, best["it1"] + best["it2"],
                     bool(improved and not best["hit_cap"]), best["trace"], diagnostics)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def sample_errors(model, sample, result, joint_set="body"):
    """Root-relative 3D errors of a fit against a synthetic sample."""
    idx = model.part_indices(bm.BODY) if joint_set == "body" else np.arange(model.n_joints)
    pred = root_relative(bm.joints(model, result.params))[idx]
    gt = root_relative(sample.j3d.coords)[idx]
    return mpjpe(pred, gt), pa_mpjpe(pred, gt)


def _fit_task(args):
    model, sample, cfg = args
    try:
        res = fit_frame(sample.j2d, model, cfg)
    except Exception as exc:  # counted as a failure in the report
        return {"failed": True, "error": f"{type(exc).__name__}: {exc}",
                "distance_bucket": sample.distance_bucket, "viewpoint_bucket": sample.viewpoint_bucket}
    e3, pa = sample_errors(model, sample, res)
    return {"failed": False, "mpjpe": e3, "pa_mpjpe": pa, "L_2D": res.losses.get("L_2D", math.nan),
            "converged": res.converged, "iterations": res.iterations,
            "distance_bucket": sample.distance_bucket, "viewpoint_bucket": sample.viewpoint_bucket}


def run_fits(model, samples, cfg, jobs=1):
    tasks = [(model, s, cfg) for s in samples]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_fit_task, tasks))
    return [_fit_task(t) for t in tasks]


# brute-force protocol for camera comparisons: three distance initialisations
# (azimuth-shifted restarts for cameras without a distance), eight probes, and
# depth held until the pose has settled
BENCHMARK_PROTOCOL = {"d_init_factors": (2.0, 8.0, 30.0), "n_probe": 8, "hold_depth": True}


def benchmark_config(camera_kind, **overrides):
    """FitConfig for sweeps: the benchmark protocol plus ``overrides``."""
    return FitConfig.from_dict({**BENCHMARK_PROTOCOL, "camera_kind": camera_kind, **overrides})


SWEEP_COLUMNS = ["camera_kind", "bucket", "n", "mpjpe", "pa_mpjpe", "median_mpjpe", "mean_L2D", "failures"]


def fit_sweep(model, samples, configs, bucket_key="distance", jobs=1):
    """Fit every sample under every config and aggregate per bucket.

    ``configs`` maps a camera-kind label to a FitConfig.  Returns
    ``(rows, reports, per_sample)`` where rows follow ``SWEEP_COLUMNS``;
    an ``all`` row follows the buckets when there is more than one.
    """
    rows, reports, per_sample = [], {}, {}
    for label, cfg in configs.items():
        records = run_fits(model, samples, cfg, jobs)
        per_sample[label] = records
        ok = [r for r in records if not r["failed"]]
        key = f"{bucket_key}_bucket"
        labels = sorted({r[key] for r in records}, key=lambda s: (_num(s), s))
        report = bucketed_report(ok, bucket_key) if ok else None
        reports[label] = report
        for b in labels:
            group = [r for r in ok if r[key] == b]
            fails = sum(1 for r in records if r[key] == b and r["failed"])
            rows.append(_sweep_row(label, b, group, fails))
        if len(labels) > 1:
            rows.append(_sweep_row(label, "all", ok, len(records) - len(ok)))
    return rows, reports, per_sample


def _num(label):
    import re

    m = re.search(r"-?\d+(?:\.\d+)?", label)
    return float(m.group()) if m else math.inf


def _sweep_row(kind, bucket, group, failures):
    if group:
        e = [r["mpjpe"] for r in group]
        return {"camera_kind": kind, "bucket": bucket, "n": len(group),
                "mpjpe": math.fsum(e) / len(e),
                "pa_mpjpe": math.fsum(r["pa_mpjpe"] for r in group) / len(group),
                "median_mpjpe": float(np.median(e)),
                "mean_L2D": math.fsum(r["L_2D"] for r in group) / len(group), "failures": failures}
    return {"camera_kind": kind, "bucket": bucket, "n": 0, "mpjpe": math.nan, "pa_mpjpe": math.nan,
            "median_mpjpe": math.nan, "mean_L2D": math.nan, "failures": failures}
