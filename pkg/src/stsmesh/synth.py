"""Synthetic paired 2D/3D data from parameter banks.

Pose, hand, expression and shape parameters are drawn independently from a
bank, posed through the body model and projected with a perspective camera,
giving 2D keypoints with complete 3D annotation.  The module also holds the
per-part scale normalisation applied to keypoints before regression.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bodymodel as bm
from .bodymodel import BODY, JAW, LEFT_HAND, RIGHT_HAND, FullParams
from .errors import (BankValidationError, DatasetFormatError, GenerationError, InvalidConfigError,
                     StsError)
from .projection import (EPS_DEPTH, PART_TAGS, Keypoints2D, Keypoints3D, Perspective, camera_from_dict,
                         project_perspective)
from .rotation import rodrigues, rotation_about_y, rotation_log

DATASET_FORMAT = "sts-dataset"
DATASET_VERSION = 1
EPS_BBOX = 1e-6

_KIND_TO_PART = {BODY: "body", LEFT_HAND: "left_hand", RIGHT_HAND: "right_hand", JAW: "face"}


def keypoint_parts(model):
    """Part tag of every keypoint, following the model's joint kinds."""
    return tuple(_KIND_TO_PART[k] for k in model.joint_tree.kinds)


def derive_seed(seed, index):
    """Stable per-item seed from a parent seed and an index."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# parameter banks
# ---------------------------------------------------------------------------

@dataclass
class BankConfig:
    n_body: int = 100
    n_hand: int = 100
    n_expression: int = 50
    n_shape: int = 50
    body_fraction: float = 0.3      # fraction of each joint's angle range
    hand_fraction: float = 0.8
    hand_amplitude: float = 2.0     # PCA coefficient range before limit scaling
    jaw_fraction: float = 0.5
    global_tilt: float = 0.1        # radians, bank root orientation spread
    shape_sigma: float = 0.5
    expression_sigma: float = 1.0


@dataclass
class ParameterBank:
    body_poses: np.ndarray      # (n, 22, 3); row 0 is the root orientation
    hand_poses: np.ndarray      # (n, pca_dim) coefficients, shared by both hands
    expressions: np.ndarray     # (n, E + 3)
    shapes: np.ndarray          # (n, S)
    provenance: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)

    def to_dict(self):
        return {"body_poses": self.body_poses.tolist(), "hand_poses": self.hand_poses.tolist(),
                "expressions": self.expressions.tolist(), "shapes": self.shapes.tolist(),
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["body_poses"], float).reshape(len(d["body_poses"]), -1, 3),
                   np.asarray(d["hand_poses"], float).reshape(len(d["hand_poses"]), -1),
                   np.asarray(d["expressions"], float).reshape(len(d["expressions"]), -1),
                   np.asarray(d["shapes"], float).reshape(len(d["shapes"]), -1),
                   d.get("provenance", {}))

    def sizes(self):
        return {"body": len(self.body_poses), "hand": len(self.hand_poses),
                "expression": len(self.expressions), "shape": len(self.shapes)}


def _within(pose, limits, tol=1e-12):
    return bool(np.all(pose >= limits[..., 0] - tol) and np.all(pose <= limits[..., 1] + tol))


def bank_violations(bank, model):
    """List of (category, index, reason) for entries outside the angle limits."""
    lim = model.angle_limits
    out = []
    for i, pose in enumerate(bank.body_poses):
        if not _within(pose, lim[:bm.N_BODY_JOINTS]):
            out.append(("body", i, "joint angle outside limits"))
    for i, c in enumerate(bank.hand_poses):
        for side, kind in ((0, LEFT_HAND), (1, RIGHT_HAND)):
            expanded = (c @ model.hand_pca_basis[side]).reshape(-1, 3)
            if not _within(expanded, lim[model.part_indices(kind)]):
                out.append(("hand", i, f"{kind} angle outside limits"))
                break
    jaw = model.part_indices(JAW)
    for i, e in enumerate(bank.expressions):
        if not _within(e[-3:][None], lim[jaw]):
            out.append(("expression", i, "jaw angle outside limits"))
    for i, b in enumerate(bank.shapes):
        if np.any(np.abs(b) > bm.MAX_BETA):
            out.append(("shape", i, "shape coefficient magnitude above limit"))
    return out


def _check_bank_shapes(bank, model):
    want = {"body_poses": (bm.N_BODY_JOINTS, 3), "hand_poses": (model.hand_pca_dim,),
            "expressions": (model.n_expression + 3,), "shapes": (model.n_shape,)}
    for name, tail in want.items():
        arr = getattr(bank, name)
        if arr.shape[1:] != tail:
            raise InvalidConfigError(f"bank {name} entries must have shape {tail}, got {arr.shape[1:]}")
        if not np.all(np.isfinite(arr)):
            raise InvalidConfigError(f"bank {name} contains non-finite values")


def _procedural_bank(model, cfg, rng):
    if min(cfg.n_body, cfg.n_hand, cfg.n_expression, cfg.n_shape) < 1:
        raise InvalidConfigError("every bank category needs at least one entry")
    for name in ("body_fraction", "hand_fraction", "jaw_fraction"):
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise InvalidConfigError(f"{name} must lie in [0, 1]")
    lim = model.angle_limits
    body_lim = lim[1:bm.N_BODY_JOINTS]
    body = np.zeros((cfg.n_body, bm.N_BODY_JOINTS, 3))
    u = rng.uniform(size=(cfg.n_body, bm.N_BODY_JOINTS - 1, 3))
    f = cfg.body_fraction
    body[:, 1:] = f * (body_lim[..., 0] + u * (body_lim[..., 1] - body_lim[..., 0]))
    tilt = rng.uniform(-cfg.global_tilt, cfg.global_tilt, size=(cfg.n_body, 2))
    body[:, 0, 0], body[:, 0, 2] = tilt[:, 0], tilt[:, 1]

    hands = np.zeros((cfg.n_hand, model.hand_pca_dim))
    bounds = [(model.hand_pca_basis[side], lim[model.part_indices(kind)].reshape(-1, 2))
              for side, kind in ((0, LEFT_HAND), (1, RIGHT_HAND))]
    for i in range(cfg.n_hand):
        c = rng.uniform(-cfg.hand_amplitude, cfg.hand_amplitude, size=model.hand_pca_dim)
        lam = 1.0
        for basis, hl in bounds:
            e = c @ basis
            with np.errstate(divide="ignore", invalid="ignore"):
                caps = np.where(e > 0, cfg.hand_fraction * hl[:, 1] / e,
                                np.where(e < 0, cfg.hand_fraction * hl[:, 0] / e, np.inf))
            lam = min(lam, float(np.min(caps)))
        hands[i] = c * max(lam, 0.0)

    jaw_lim = lim[model.part_indices(JAW)[0]]
    expr = np.zeros((cfg.n_expression, model.n_expression + 3))
    expr[:, :-3] = np.clip(rng.normal(0.0, cfg.expression_sigma, size=(cfg.n_expression, model.n_expression)),
                           -3.0, 3.0)
    uj = rng.uniform(size=(cfg.n_expression, 3))
    expr[:, -3:] = cfg.jaw_fraction * (jaw_lim[:, 0] + uj * (jaw_lim[:, 1] - jaw_lim[:, 0]))
    shapes = np.clip(rng.normal(0.0, cfg.shape_sigma, size=(cfg.n_shape, model.n_shape)),
                     -bm.MAX_BETA, bm.MAX_BETA)
    tag = "procedural"
    return ParameterBank(body, hands, expr, shapes,
                         {"body": tag, "hand": tag, "expression": tag, "shape": tag})


def build_bank(model, source="procedural", config=None, seed=0, path=None, strict=True):
    """Parameter bank drawn procedurally or read from a JSON file.

    File banks are checked against the model's limits: in strict mode any
    violation raises, otherwise violators are dropped and listed in
    ``bank.rejected``.
    """
    if source == "procedural":
        bank = _procedural_bank(model, config or BankConfig(), np.random.default_rng(seed))
    elif source == "file":
        try:
            bank = ParameterBank.from_dict(json.loads(Path(path).read_text()))
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise InvalidConfigError(f"cannot read bank file {path}: {exc}") from exc
        bank.provenance = {k: bank.provenance.get(k, f"file:{Path(path).name}")
                           for k in ("body", "hand", "expression", "shape")}
    else:
        raise InvalidConfigError(f"unknown bank source {source!r}")
    _check_bank_shapes(bank, model)
    violations = bank_violations(bank, model)
    if violations:
        if strict:
            raise BankValidationError(violations)
        drop = {}
        for cat, idx, _ in violations:
            drop.setdefault(cat, set()).add(idx)
        attr = {"body": "body_poses", "hand": "hand_poses", "expression": "expressions", "shape": "shapes"}
        for cat, idx in drop.items():
            arr = getattr(bank, attr[cat])
            setattr(bank, attr[cat], np.delete(arr, sorted(idx), axis=0))
        bank.rejected = violations
    for cat, n in bank.sizes().items():
        if n == 0:
            raise InvalidConfigError(f"bank category {cat!r} is empty")
    return bank


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class CameraSamplerConfig:
    distance_range: tuple = (2.0, 2.0)     # multiples of the model extent
    n_viewpoints: int = 30                 # azimuths evenly spaced about the vertical axis
    viewpoints: tuple = None               # optional subset of viewpoint indices
    image_height_range: tuple = (400.0, 600.0)  # rest-body height in pixels; sets f
    lateral_jitter: float = 0.03           # |t_x|, |t_y| as a fraction of d

    def distance_label(self):
        lo, hi = self.distance_range
        return f"{lo:g}x" if lo == hi else f"{lo:g}-{hi:g}x"


@dataclass
class SampleMeta:
    viewpoint_index: int
    distance_factor: float


def _draw_camera(model, cfg, rng):
    lo, hi = cfg.distance_range
    if not 0 < lo <= hi:
        raise InvalidConfigError("distance_range must satisfy 0 < lo <= hi")
    factor = lo if lo == hi else rng.uniform(lo, hi)
    choices = cfg.viewpoints if cfg.viewpoints is not None else range(cfg.n_viewpoints)
    choices = list(choices)
    view = int(choices[rng.integers(len(choices))])
    h_lo, h_hi = cfg.image_height_range
    height = h_lo if h_lo == h_hi else rng.uniform(h_lo, h_hi)
    d = factor * model.extent
    f = height * d / model.extent
    txy = rng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter, size=2) * d
    return Perspective(f, f, (txy[0], txy[1], d)), SampleMeta(view, float(factor))


def viewpoint_rotation(index, n_viewpoints):
    return rotation_about_y(2.0 * np.pi * index / n_viewpoints)


def sample_full_params(model, bank, camera_config=None, seed=0):
    """Draw one parameter set plus its generating perspective camera.

    Returns ``(params, camera, meta)``.  The sampled viewpoint is folded into
    the root orientation, since the camera rotation is absorbed into the
    global body rotation.
    """
    cfg = camera_config or CameraSamplerConfig()
    for cat, n in bank.sizes().items():
        if n == 0:
            raise InvalidConfigError(f"bank category {cat!r} is empty")
    rng = np.random.default_rng(seed)
    ib = rng.integers(len(bank.body_poses))
    il, ir = rng.integers(len(bank.hand_poses), size=2)
    ie = rng.integers(len(bank.expressions))
    ish = rng.integers(len(bank.shapes))
    cam, meta = _draw_camera(model, cfg, rng)
    body = bank.body_poses[ib]
    root = viewpoint_rotation(meta.viewpoint_index, cfg.n_viewpoints) @ rodrigues(body[0])
    params = FullParams(rotation_log(root), body[1:].copy(), bank.hand_poses[il].copy(),
                        bank.hand_poses[ir].copy(), bank.expressions[ie].copy(), bank.shapes[ish].copy(),
                        "pca", cam)
    return params, cam, meta


@dataclass
class GenConfig:
    camera: CameraSamplerConfig = field(default_factory=CameraSamplerConfig)
    max_retries: int = 10

    @classmethod
    def from_dict(cls, d):
        cam = dict(d.get("camera", {}))
        for key in ("distance_range", "image_height_range", "viewpoints"):
            if cam.get(key) is not None:
                cam[key] = tuple(cam[key])
        return cls(CameraSamplerConfig(**cam), d.get("max_retries", 10))

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticSample:
    params: FullParams
    j3d: Keypoints3D
    j2d: Keypoints2D
    camera: Perspective
    distance_bucket: str
    viewpoint_bucket: str
    rng_seed: int

    def to_dict(self):
        return {"params": self.params.to_dict(), "j3d": self.j3d.to_dict(), "j2d": self.j2d.to_dict(),
                "camera": self.camera.to_dict(), "distance_bucket": self.distance_bucket,
                "viewpoint_bucket": self.viewpoint_bucket, "rng_seed": self.rng_seed}

    @classmethod
    def from_dict(cls, d):
        return cls(FullParams.from_dict(d["params"]), Keypoints3D.from_dict(d["j3d"]),
                   Keypoints2D.from_dict(d["j2d"]), camera_from_dict(d["camera"]),
                   d["distance_bucket"], d["viewpoint_bucket"], int(d["rng_seed"]))

    def __eq__(self, other):
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return json.dumps(self.to_dict()) == json.dumps(other.to_dict())


def generate_sample(model, bank, config=None, seed=0):
    """Pose the model with sampled parameters and project its keypoints.

    The camera is redrawn (up to ``max_retries`` times) until every keypoint
    lies in front of it.
    """
    cfg = config or GenConfig()
    rng = np.random.default_rng(seed)
    params, cam, meta = sample_full_params(model, bank, cfg.camera, derive_seed(seed, 0))
    j3d = bm.joints(model, params)
    attempt = 0
    while np.any(cam.d + j3d[:, 2] <= EPS_DEPTH):
        attempt += 1
        if attempt > cfg.max_retries:
            raise GenerationError(f"no camera in front of the body after {cfg.max_retries} retries")
        view_old = viewpoint_rotation(meta.viewpoint_index, cfg.camera.n_viewpoints)
        cam, meta = _draw_camera(model, cfg.camera, rng)
        root = viewpoint_rotation(meta.viewpoint_index, cfg.camera.n_viewpoints) @ view_old.T \
            @ rodrigues(params.theta_global)
        params = params.copy(theta_global=rotation_log(root), camera=cam)
        j3d = bm.joints(model, params)
    parts = keypoint_parts(model)
    kp3 = Keypoints3D(j3d, None, parts)
    kp2 = project_perspective(kp3, cam)
    return SyntheticSample(params, kp3, kp2, cam, cfg.camera.distance_label(),
                           f"az{meta.viewpoint_index:02d}", int(seed))


def _generate_one(args):
    model, bank, cfg, seed = args
    return generate_sample(model, bank, cfg, seed)


def generate_dataset(model, bank, config=None, n=0, seed=0, jobs=1):
    """``n`` samples with per-sample seeds derived from ``seed``; order is canonical."""
    cfg = config or GenConfig()
    tasks = [(model, bank, cfg, derive_seed(seed, i)) for i in range(n)]
    if jobs > 1 and n > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_generate_one, tasks))
    return [_generate_one(t) for t in tasks]


# ---------------------------------------------------------------------------
# degradation and normalisation
# ---------------------------------------------------------------------------

@dataclass
class DegradeConfig:
    keypoint_noise_sigma: float = 0.0
    dropout_prob: dict = field(default_factory=dict)   # part tag -> probability
    seed: int = 0

    def validate(self):
        if self.keypoint_noise_sigma < 0:
            raise InvalidConfigError("keypoint_noise_sigma must be nonnegative")
        for part, p in self.dropout_prob.items():
            if not 0.0 <= p <= 1.0:
                raise InvalidConfigError(f"dropout probability for {part!r} must lie in [0, 1]")


def degrade(sample, cfg):
    """Gaussian pixel noise on visible keypoints and per-part dropout."""
    cfg.validate()
    kp = sample.j2d if isinstance(sample, SyntheticSample) else sample
    rng = np.random.default_rng(cfg.seed)
    coords = kp.coords.copy()
    vis = kp.visible.copy()
    noise = rng.normal(0.0, 1.0, size=coords.shape) * cfg.keypoint_noise_sigma
    if cfg.keypoint_noise_sigma > 0:
        coords[vis] += noise[vis]
    drops = rng.uniform(size=len(coords))
    for i, part in enumerate(kp.parts):
        if drops[i] < cfg.dropout_prob.get(part, 0.0):
            vis[i] = False
    return Keypoints2D(coords, vis, kp.parts)


@dataclass
class PartRecord:
    center: np.ndarray
    half_extent: float
    present: bool = True


@dataclass
class NormalizedKeypoints:
    coords: np.ndarray
    visible: np.ndarray
    parts: tuple
    records: dict

    def part(self, tag):
        idx = np.array([i for i, p in enumerate(self.parts) if p == tag], dtype=int)
        return self.coords[idx], self.visible[idx], self.records[tag]

    @property
    def absent(self):
        return tuple(t for t, r in self.records.items() if not r.present)


def scale_normalize(j2d):
    """Centre each part on the mean of its visible keypoints and divide by
    the larger half side of their bounding box (floored at ``EPS_BBOX``).

    Invisible keypoints and absent parts are emitted as zeros.
    """
    coords = np.zeros_like(j2d.coords)
    records = {}
    for tag in PART_TAGS:
        idx = j2d.part_indices(tag)
        if idx.size == 0:
            continue
        vis = j2d.visible[idx]
        if not vis.any():
            records[tag] = PartRecord(np.zeros(2), EPS_BBOX, present=False)
            continue
        pts = j2d.coords[idx[vis]]
        center = pts.mean(axis=0)
        half = max(float(np.max((pts.max(axis=0) - pts.min(axis=0)) / 2.0)), EPS_BBOX)
        coords[idx[vis]] = (pts - center) / half
        records[tag] = PartRecord(center, half)
    return NormalizedKeypoints(coords, j2d.visible.copy(), j2d.parts, records)


def denormalize(norm):
    """Invert :func:`scale_normalize` for visible keypoints."""
    out = np.full_like(norm.coords, np.nan)
    for tag, rec in norm.records.items():
        if not rec.present:
            continue
        idx = np.array([i for i, p in enumerate(norm.parts) if p == tag], dtype=int)
        idx = idx[norm.visible[idx]]
        out[idx] = norm.coords[idx] * rec.half_extent + rec.center
    return Keypoints2D(out, norm.visible.copy(), norm.parts)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_dataset(path, samples, meta=None):
    """Newline-delimited JSON: a header line then one record per sample."""
    path = Path(path)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "count": len(samples)}
    if meta:
        header["meta"] = meta
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")
    tmp.replace(path)


def read_dataset(path, with_header=False):
    path = Path(path)
    samples = []
    with path.open() as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"bad header: {exc}", line=1) from exc
        if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
            raise DatasetFormatError("missing sts-dataset header", line=1)
        if header.get("version") != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {header.get('version')!r}", line=1)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                samples.append(SyntheticSample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, StsError) as exc:
                raise DatasetFormatError(f"malformed record: {exc}", line=lineno) from exc
    return (samples, header) if with_header else samples
