"""Two-branch keypoint regressor trained by consistency supervision.

The global branch is a dense stack from normalised body keypoints to shape,
body pose, root orientation and a camera.  The partial branch runs one graph
convolution stack for the hands (read out to PCA coefficients) and one for
the face (pooled and passed through a small dense stack to expression plus
jaw).  By default both hands share one stack: left-hand inputs are mirrored
about the vertical image axis, which maps them onto right-hand poses with the
same coefficients because the two PCA bases are mirror images.

Training minimises ``w_pm * L_pm + w_3d * L_3D`` on synthetic samples, with
gradients taken by hand through the networks and the body model.  Phase 1
trains the partial branch alone with ground-truth body parameters; phase 2
trains everything, replacing one batch in every ``sts_cadence`` by freshly
sampled synthetic data.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bodymodel as bm
from .bodymodel import JAW, LEFT_HAND, RIGHT_HAND, FullParams
from .errors import (AbsentPartError, EmptyEvaluationError, InvalidConfigError, ModelFileError,
                     ShapeError, TrainingDivergenceError, VersionError)
from .fit import Layout, Targets, _objective
from .metrics import bucketed_report, mpjpe, pa_mpjpe, root_relative
from .projection import D2S
from .synth import GenConfig, SyntheticSample, build_bank, derive_seed, generate_sample, scale_normalize

WEIGHTS_FORMAT = "sts-regressor"
WEIGHTS_VERSION = 1
STS_WEIGHTS = {"w_pm": 20.0, "w_3d": 60.0}
HAND_PARTS = ("left_hand", "right_hand")
_PART_KIND = {"left_hand": LEFT_HAND, "right_hand": RIGHT_HAND, "face": JAW}
_LAYOUT_SLICE = {"left_hand": "hand_left", "right_hand": "hand_right", "face": "psi"}
PARTIAL_PARTS = (*HAND_PARTS, "face")
_MIRROR_U = np.array([-1.0, 1.0])


def softplus(x):
    return np.logaddexp(0.0, x)


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class DenseLayerStack:
    """Affine layers with rectifiers between them and an identity output."""

    weights: list
    biases: list

    def __post_init__(self):
        self.validate()

    @classmethod
    def init(cls, widths, rng):
        return cls([_glorot(rng, a, b) for a, b in zip(widths[:-1], widths[1:])],
                   [np.zeros(b) for b in widths[1:]])

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def validate(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("dense stack needs one bias per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i} input width does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {i} holds non-finite values")

    def forward(self, x):
        """Output and the per-layer inputs needed by :meth:`backward`."""
        acts = [x]
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ W + b
            if i < n - 1:
                x = np.maximum(x, 0.0)
            acts.append(x)
        return x, acts

    def backward(self, acts, g):
        """Gradients of the weights and of the input given ``dL/d output``."""
        grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0.0)
            x = acts[i]
            grads[i] = (x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]),
                        g.reshape(-1, g.shape[-1]).sum(axis=0))
            g = g @ self.weights[i].T
        return g, grads


def normalized_adjacency(adjacency):
    """``D^-1/2 (A + I) D^-1/2`` for a symmetric 0/1 adjacency."""
    A = np.asarray(adjacency, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError("adjacency must be square")
    if not np.array_equal(A, A.T):
        raise ShapeError("adjacency must be symmetric")
    A = A + np.eye(len(A))
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


@dataclass
class GraphConvStack:
    """Four graph convolutions ``H' = relu(A_hat H W)`` over a fixed skeleton."""

    adjacency: np.ndarray
    weights: list
    n_layers = 4

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=float)
        self.a_hat = normalized_adjacency(self.adjacency)
        if len(self.weights) != self.n_layers:
            raise ShapeError(f"graph stack needs exactly {self.n_layers} layers")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"graph layer {i} input width does not chain")

    @classmethod
    def init(cls, adjacency, widths, rng):
        return cls(adjacency, [_glorot(rng, a, b) for a, b in zip(widths[:-1], widths[1:])])

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def forward(self, H):
        """``H`` is ``(B, nodes, features)``."""
        acts = [H]
        for W in self.weights:
            H = np.maximum(np.einsum("ij,bjf->bif", self.a_hat, H) @ W, 0.0)
            acts.append(H)
        return H, acts

    def backward(self, acts, g):
        grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            g = g * (acts[i + 1] > 0.0)
            AH = np.einsum("ij,bjf->bif", self.a_hat, acts[i])
            grads[i] = (AH.reshape(-1, AH.shape[-1]).T @ g.reshape(-1, g.shape[-1]),)
            g = np.einsum("ji,bjf->bif", self.a_hat, g @ self.weights[i].T)
        return g, grads


def part_nodes(model, part):
    """Joint indices forming a part's graph.  Hands start with their wrist
    (a body joint) so the graph sees the hand's attachment point."""
    idx = model.part_indices(_PART_KIND[part])
    if part in HAND_PARTS:
        idx = np.concatenate([[int(model.parents[idx[0]])], idx])
    return idx


def part_adjacency(model, part):
    """Skeleton edges between the nodes of :func:`part_nodes`."""
    idx = part_nodes(model, part)
    pos = {int(j): i for i, j in enumerate(idx)}
    A = np.zeros((len(idx), len(idx)))
    for i, j in enumerate(idx):
        p = int(model.parents[j])
        if p in pos:
            A[i, pos[p]] = A[pos[p], i] = 1.0
    return A


# ---------------------------------------------------------------------------
# regressor
# ---------------------------------------------------------------------------

@dataclass
class RegressorConfig:
    hidden: tuple = (256, 256)
    gcn_widths: tuple = (2, 32, 32, 32, 16)
    face_hidden: tuple = (32,)
    share_hands: bool = True
    seed: int = 0


def _global_size(model):
    # beta, body pose, then camera: s, root axis-angle, t, d
    return model.n_shape + 3 * (bm.N_BODY_JOINTS - 1) + 7


def _global_slices(model):
    S, B = model.n_shape, 3 * (bm.N_BODY_JOINTS - 1)
    return {"beta": slice(0, S), "body": slice(S, S + B), "s": S + B, "global": slice(S + B + 1, S + B + 4),
            "t": slice(S + B + 4, S + B + 6), "d": S + B + 6}


@dataclass
class Regressor:
    config: RegressorConfig
    global_net: DenseLayerStack
    graphs: dict            # branch -> GraphConvStack
    heads: dict             # branch -> DenseLayerStack readout
    nodes: dict             # part -> joint index of every graph node

    @property
    def parts(self):
        return PARTIAL_PARTS

    @property
    def branches(self):
        return tuple(self.graphs)

    def branch(self, part):
        """Name of the stack that serves ``part``."""
        if part in self.graphs:
            return part
        if part in HAND_PARTS and "hand" in self.graphs:
            return "hand"
        raise InvalidConfigError(f"no partial branch for {part!r}")

    def arrays(self):
        """Every trainable array under a stable name (views, not copies)."""
        out = {}
        for i, (W, b) in enumerate(zip(self.global_net.weights, self.global_net.biases)):
            out[f"global.W{i}"], out[f"global.b{i}"] = W, b
        for part in self.branches:
            for i, W in enumerate(self.graphs[part].weights):
                out[f"{part}.gcn.W{i}"] = W
            head = self.heads[part]
            for i, (W, b) in enumerate(zip(head.weights, head.biases)):
                out[f"{part}.head.W{i}"], out[f"{part}.head.b{i}"] = W, b
        return out

    def copy(self):
        return regressor_from_dict(regressor_to_dict(self))

    def __eq__(self, other):
        if not isinstance(other, Regressor):
            return NotImplemented
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def build_regressor(model, config=None):
    """Glorot-uniform weights and zero biases; each component has its own seed."""
    cfg = config or RegressorConfig()
    n_body = len(model.part_indices(bm.BODY))
    g_rng = np.random.default_rng(derive_seed(cfg.seed, 0))
    global_net = DenseLayerStack.init([2 * n_body, *cfg.hidden, _global_size(model)], g_rng)
    nodes = {part: tuple(int(j) for j in part_nodes(model, part)) for part in PARTIAL_PARTS}
    branches = {"hand": "right_hand", "face": "face"} if cfg.share_hands else {p: p for p in PARTIAL_PARTS}
    graphs, heads = {}, {}
    for k, (name, part) in enumerate(branches.items(), start=1):
        rng = np.random.default_rng(derive_seed(cfg.seed, k))
        A = part_adjacency(model, part)
        graphs[name] = GraphConvStack.init(A, list(cfg.gcn_widths), rng)
        feat = cfg.gcn_widths[-1]
        if part == "face":
            heads[name] = DenseLayerStack.init([feat, *cfg.face_hidden, model.n_expression + 3], rng)
        else:
            heads[name] = DenseLayerStack.init([len(A) * feat, model.hand_pca_dim], rng)
    return Regressor(cfg, global_net, graphs, heads, nodes)


def _global_forward(reg, x):
    raw, acts = reg.global_net.forward(x)
    return raw, acts


def decode_global(raw, model):
    """Split raw global outputs; camera scale and depth go through softplus."""
    sl = _global_slices(model)
    return {"beta": raw[..., sl["beta"]], "theta_body": raw[..., sl["body"]],
            "theta_global": raw[..., sl["global"]], "s": softplus(raw[..., sl["s"]]),
            "t": raw[..., sl["t"]], "d": softplus(raw[..., sl["d"]])}


def _partial_forward(reg, part, H):
    name = reg.branch(part)
    G, g_acts = reg.graphs[name].forward(H)
    if part == "face":
        feat = G.mean(axis=1)
    else:
        feat = G.reshape(len(G), -1)
    out, h_acts = reg.heads[name].forward(feat)
    return out, (G.shape, g_acts, h_acts)


def _partial_backward(reg, part, cache, g_out):
    shape, g_acts, h_acts = cache
    name = reg.branch(part)
    g_feat, head_grads = reg.heads[name].backward(h_acts, g_out)
    if part == "face":
        g_G = np.broadcast_to(g_feat[:, None, :] / shape[1], shape)
    else:
        g_G = g_feat.reshape(shape)
    _, gcn_grads = reg.graphs[name].backward(g_acts, g_G)
    return gcn_grads, head_grads


# ---------------------------------------------------------------------------
# inputs and prediction
# ---------------------------------------------------------------------------

def _part_input(reg, norm, part):
    coords, vis, rec = norm.part(part)
    if part in HAND_PARTS:
        # the wrist (a body keypoint) re-expressed in the hand's normalised frame
        wrist = reg.nodes[part][0]
        body = norm.records["body"]
        if rec.present and body.present and norm.visible[wrist]:
            uv = norm.coords[wrist] * body.half_extent + body.center
            w = (uv - rec.center) / rec.half_extent
        else:
            w = np.zeros(2)
        coords = np.vstack([w, coords])
        if part == "left_hand" and reg.branch(part) == "hand":
            coords = coords * _MIRROR_U
    return coords, rec.present


def network_inputs(reg, j2d):
    """Per-part normalised inputs and presence flags for one keypoint set."""
    norm = scale_normalize(j2d)
    return {part: _part_input(reg, norm, part) for part in ("body", *PARTIAL_PARTS)}, norm


def forward_global(reg, model, norm):
    """Shape, body pose, root orientation and camera from normalised body keypoints.

    ``norm`` is a :class:`NormalizedKeypoints` or a flat array of body
    coordinates.  The camera is expressed in normalised image units.
    """
    if hasattr(norm, "part"):
        coords, present = _part_input(reg, norm, "body")
        if not present:
            raise AbsentPartError("body keypoints are absent")
        x = coords.reshape(-1)
    else:
        x = np.asarray(norm, dtype=float)
    raw, _ = _global_forward(reg, x[None, :] if x.ndim == 1 else x)
    out = decode_global(raw, model)
    return {k: v[0] for k, v in out.items()} if x.ndim == 1 else out


def forward_partial(reg, norm, part):
    """Hand PCA coefficients or face ``(expression, jaw)`` from normalised part keypoints.

    Raw coordinate arrays are taken as network inputs, already mirrored
    for a left hand on a shared hand branch.
    """
    reg.branch(part)
    if hasattr(norm, "part"):
        coords, present = _part_input(reg, norm, part)
        if not present:
            raise AbsentPartError(f"{part} keypoints are absent")
    else:
        coords = np.asarray(norm, dtype=float)
    single = coords.ndim == 2
    out, _ = _partial_forward(reg, part, coords[None] if single else coords)
    return out[0] if single else out


def predict_params(reg, model, j2d):
    """Assemble full parameters from both branches.

    Absent hands or face fall back to the rest configuration; the camera
    is mapped back to pixels as a D2S camera.
    """
    inputs, norm = network_inputs(reg, j2d)
    if not inputs["body"][1]:
        raise AbsentPartError("body keypoints are absent")
    g = forward_global(reg, model, norm)
    rec = norm.records["body"]
    cam = D2S(float(g["s"]) * rec.half_extent, tuple(g["t"] * rec.half_extent + rec.center), float(g["d"]))
    parts = {}
    for part in PARTIAL_PARTS:
        coords, present = inputs[part]
        size = model.n_expression + 3 if part == "face" else model.hand_pca_dim
        parts[part] = forward_partial(reg, coords, part) if present else np.zeros(size)
    return FullParams(g["theta_global"].copy(), g["theta_body"].reshape(-1, 3).copy(),
                      parts["left_hand"], parts["right_hand"], parts["face"], g["beta"].copy(), "pca", cam)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def sts_training_loss(pred, sample, model, weights=None):
    """``w_pm * L_pm + w_3d * L_3D`` of predicted parameters against a synthetic sample.

    Returns ``(total, breakdown)``; joints are recomputed through the model.
    """
    w = {**STS_WEIGHTS, **(weights or {})}
    layout = Layout(model, None)
    total, terms, _ = _objective(layout.pack(pred), layout, _targets(sample), _full_weights(w), 0.0,
                                 grad=False)
    return total, {"L_pm": terms["L_pm"], "L_3D": terms["L_3D"], "total": total, "weights": w}


def _full_weights(w):
    return {"w_pm": w["w_pm"], "w_3d": w["w_3d"], "w_2d": 0.0, "w_r": 0.0}


def _targets(sample):
    return Targets(j3d=sample.j3d.coords, params=sample.params)


@dataclass
class _Example:
    """Network inputs and supervision for one sample."""

    inputs: dict
    x_gt: np.ndarray
    targets: Targets


def _example(reg, layout, sample):
    inputs, _ = network_inputs(reg, sample.j2d)
    if not inputs["body"][1]:
        raise AbsentPartError("training sample without body keypoints")
    return _Example(inputs, layout.pack(sample.params), _targets(sample))


def _batch_loss(reg, model, layout, batch, weights, phase, grad=True, parts=None):
    """Mean loss over ``batch`` and gradients for every trainable array.

    Phase 1 keeps the ground-truth body and trains only the partial
    branches listed in ``parts`` (all by default); phase 2 uses every
    prediction.
    """
    with np.errstate(invalid="ignore", over="ignore"):
        return _batch_loss_inner(reg, model, layout, batch, weights, phase, grad, parts)


def _batch_loss_inner(reg, model, layout, batch, weights, phase, grad, parts):
    B = len(batch)
    x = np.stack([ex.x_gt for ex in batch])
    caches = {}
    if phase == 2:
        raw, g_acts = _global_forward(reg, np.stack([ex.inputs["body"][0].reshape(-1) for ex in batch]))
        dec = decode_global(raw, model)
        x[:, layout.slices["beta"]] = dec["beta"]
        x[:, layout.slices["body"]] = dec["theta_body"]
        x[:, layout.slices["global"]] = dec["theta_global"]
        caches["global"] = (raw, g_acts)
    active = tuple(reg.parts) if parts is None or phase == 2 else tuple(parts)
    for part in active:
        present = np.array([ex.inputs[part][1] for ex in batch])
        if not present.any():
            continue
        H = np.stack([ex.inputs[part][0] for ex in batch])[present]
        out, cache = _partial_forward(reg, part, H)
        x[present, layout.slices[_LAYOUT_SLICE[part]]] = out
        caches[part] = (present, cache)

    if not np.all(np.isfinite(x)):
        bad = sorted({name for name, sl in layout.slices.items() if not np.all(np.isfinite(x[:, sl]))})
        raise TrainingDivergenceError(f"non-finite network outputs for {bad}")
    w = _full_weights(weights)
    total, gx = 0.0, np.zeros_like(x)
    for i, ex in enumerate(batch):
        t, _, g = _objective(x[i], layout, ex.targets, w, 0.0, grad=grad)
        total += t
        if grad:
            gx[i] = g
    total /= B
    if not grad:
        return total, None
    gx /= B
    if not np.all(np.isfinite(gx)) or not math.isfinite(total):
        raise TrainingDivergenceError(f"non-finite loss or gradient (loss={total!r})")

    grads = {}
    if "global" in caches:
        raw, g_acts = caches["global"]
        sl = _global_slices(model)
        g_raw = np.zeros_like(raw)
        g_raw[:, sl["beta"]] = gx[:, layout.slices["beta"]]
        g_raw[:, sl["body"]] = gx[:, layout.slices["body"]]
        g_raw[:, sl["global"]] = gx[:, layout.slices["global"]]
        _, layer_grads = reg.global_net.backward(g_acts, g_raw)
        for i, (gW, gb) in enumerate(layer_grads):
            grads[f"global.W{i}"], grads[f"global.b{i}"] = gW, gb
    for part in active:
        if part not in caches:
            continue
        present, cache = caches[part]
        g_out = gx[present, layout.slices[_LAYOUT_SLICE[part]]]
        gcn_grads, head_grads = _partial_backward(reg, part, cache, g_out)
        name = reg.branch(part)
        found = {f"{name}.gcn.W{i}": gW for i, (gW,) in enumerate(gcn_grads)}
        for i, (gW, gb) in enumerate(head_grads):
            found[f"{name}.head.W{i}"], found[f"{name}.head.b{i}"] = gW, gb
        for k, g in found.items():
            grads[k] = grads[k] + g if k in grads else g
    return total, grads


def batch_loss(reg, model, samples, weights=None, phase=2, grad=True, parts=None):
    """Mean consistency loss over ``samples`` and, if ``grad``, its gradient
    for every named array of :meth:`Regressor.arrays` touched by ``phase``."""
    layout = Layout(model, None)
    batch = [_example(reg, layout, s) for s in samples]
    if not batch:
        raise InvalidConfigError("batch must not be empty")
    return _batch_loss(reg, model, layout, batch, {**STS_WEIGHTS, **(weights or {})}, phase, grad, parts)


# ---------------------------------------------------------------------------
# optimiser and training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 1.0       # per-epoch learning-rate factor within a phase
    batch_size: int = 16
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs_phase1: int = 10
    epochs_phase2: int = 10
    seed: int = 0
    sts_cadence: int = 5
    phase1_parts: tuple = ("left_hand", "right_hand", "face")
    w_pm: float = STS_WEIGHTS["w_pm"]
    w_3d: float = STS_WEIGHTS["w_3d"]
    gen: GenConfig = field(default_factory=GenConfig)

    def validate(self):
        if self.lr < 0 or self.batch_size < 1:
            raise InvalidConfigError("lr must be nonnegative and batch_size positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InvalidConfigError("lr_decay must lie in (0, 1]")
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise InvalidConfigError("betas must be two decay rates in [0, 1)")
        if self.sts_cadence < 1:
            raise InvalidConfigError("sts_cadence must be at least 1")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise InvalidConfigError("epoch counts must be nonnegative")
        self.phase1_parts = tuple(self.phase1_parts)
        if not set(self.phase1_parts) <= {*HAND_PARTS, "face"}:
            raise InvalidConfigError(f"unknown partial branches in {self.phase1_parts}")
        if self.w_pm < 0 or self.w_3d < 0:
            raise InvalidConfigError("loss weights must be nonnegative")
        return self

    def weights(self):
        return {"w_pm": self.w_pm, "w_3d": self.w_3d}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown train config fields: {sorted(unknown)}")
        if "gen" in d:
            d["gen"] = GenConfig.from_dict(d["gen"])
        return cls(**d).validate()


# Pilot-calibrated phase-1 hand protocol: hands only (the face target is
# degenerate and would dominate the loss), a decaying learning rate so the
# epoch loss settles instead of wandering on its plateau.
PHASE1_HAND_PROTOCOL = {"lr": 3e-3, "lr_decay": 0.9, "epochs_phase1": 50, "epochs_phase2": 0,
                        "phase1_parts": HAND_PARTS}


def phase1_hand_config(**overrides):
    """:class:`TrainConfig` for the phase-1 hand protocol, with overrides."""
    return TrainConfig(**{**PHASE1_HAND_PROTOCOL, **overrides}).validate()


class Adam:
    """Adaptive moment estimation over a dict of named arrays, updated in place."""

    def __init__(self, arrays, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train_step(reg, model, samples, cfg, optimizer=None, phase=2):
    """One gradient step on ``samples``; returns ``(batch loss, optimizer)``."""
    cfg.validate()
    arrays = reg.arrays()
    optimizer = optimizer or Adam(arrays, cfg.lr, cfg.betas, cfg.adam_eps)
    loss, grads = batch_loss(reg, model, samples, cfg.weights(), phase)
    optimizer.step(arrays, grads)
    return loss, optimizer


@dataclass
class CurvePoint:
    epoch: int
    phase: int
    train_loss: float
    val_loss: float
    steps: int = 0


def curve_to_csv(curve):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "phase", "train_loss", "val_loss"])
    for p in curve:
        writer.writerow([p.epoch, p.phase, repr(p.train_loss), repr(p.val_loss)])
    return buf.getvalue()


def _mean_loss(reg, model, layout, examples, weights, phase, batch_size, parts):
    if not examples:
        return math.nan
    total = 0.0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        loss, _ = _batch_loss(reg, model, layout, chunk, weights, phase, grad=False, parts=parts)
        total += loss * len(chunk)
    return total / len(examples)


def train(model, dataset, cfg=None, val_dataset=None, bank=None, regressor=None, progress=None):
    """Two-phase training; returns ``(regressor, curve)``.

    An epoch is ``ceil(n / batch_size)`` iterations.  In phase 2 every
    ``sts_cadence``-th iteration draws a fresh batch from the parameter
    bank instead of the next dataset batch.  The learning rate is
    multiplied by ``lr_decay`` after every epoch and reset with the
    optimiser state at the start of each phase.  Everything is seeded by
    ``cfg.seed``.
    """
    cfg = (cfg or TrainConfig()).validate()
    dataset = list(dataset)
    if not dataset:
        raise EmptyEvaluationError("training needs a nonempty dataset")
    reg = regressor if regressor is not None else build_regressor(model, RegressorConfig(seed=cfg.seed))
    layout = Layout(model, None)
    examples = [_example(reg, layout, s) for s in dataset]
    val_examples = [_example(reg, layout, s) for s in (val_dataset or [])]
    weights = cfg.weights()
    if cfg.epochs_phase2 and bank is None:
        bank = build_bank(model, seed=cfg.seed)
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    curve = []
    sts_counter = 0
    for phase, epochs in ((1, cfg.epochs_phase1), (2, cfg.epochs_phase2)):
        arrays = reg.arrays()
        opt = Adam(arrays, cfg.lr, cfg.betas, cfg.adam_eps)
        it = 0
        for epoch in range(epochs):
            opt.lr = cfg.lr * cfg.lr_decay ** epoch
            order = rng.permutation(len(examples))
            losses, seen = [], 0
            for b in range(steps_per_epoch):
                if phase == 2 and it % cfg.sts_cadence == cfg.sts_cadence - 1:
                    seeds = [derive_seed(derive_seed(cfg.seed, 2), sts_counter * cfg.batch_size + j)
                             for j in range(cfg.batch_size)]
                    sts_counter += 1
                    batch = [_example(reg, layout, generate_sample(model, bank, cfg.gen, s)) for s in seeds]
                else:
                    batch = [examples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                loss, grads = _batch_loss(reg, model, layout, batch, weights, phase, parts=cfg.phase1_parts)
                opt.step(arrays, grads)
                losses.append(loss * len(batch))
                seen += len(batch)
                it += 1
            val = _mean_loss(reg, model, layout, val_examples, weights, phase, cfg.batch_size, cfg.phase1_parts)
            curve.append(CurvePoint(len(curve) + 1, phase, math.fsum(losses) / seen, val, len(losses)))
            if progress is not None:
                progress(curve[-1])
    return reg, curve


def smoothed(values, window=5):
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=float)
    c = np.cumsum(np.concatenate([[0.0], values]))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _hand_points(model, joints):
    """Wrist-relative joints of each hand, wrist included (at the origin)."""
    out = []
    for kind in (LEFT_HAND, RIGHT_HAND):
        idx = model.part_indices(kind)
        wrist = int(model.parents[idx[0]])
        out.append(joints[np.concatenate([[wrist], idx])] - joints[wrist])
    return out


def joint_errors(model, pred_params, gt_params, joint_set="body"):
    """``(mpjpe, pa_mpjpe)`` for one sample.

    ``body``/``all``: root-relative body or all joints.  ``hands``: each hand
    relative to its wrist, averaged over the two hands.
    """
    pj, gj = bm.joints(model, pred_params), bm.joints(model, gt_params)
    if joint_set == "hands":
        errs = [(mpjpe(p, g), pa_mpjpe(p, g)) for p, g in zip(_hand_points(model, pj), _hand_points(model, gj))]
        return tuple(float(np.mean(e)) for e in zip(*errs))
    if joint_set == "body":
        idx = model.part_indices(bm.BODY)
    elif joint_set == "all":
        idx = np.arange(model.n_joints)
    else:
        raise InvalidConfigError(f"unknown joint set {joint_set!r}")
    pj, gj = root_relative(pj)[idx], root_relative(gj)[idx]
    return mpjpe(pj, gj), pa_mpjpe(pj, gj)


def evaluate_predictions(model, dataset, predictions, joint_set="body", bucket_key=None):
    """EvalReport comparing predicted to ground-truth parameters."""
    dataset, predictions = list(dataset), list(predictions)
    if not dataset:
        raise EmptyEvaluationError("no samples to evaluate")
    if len(dataset) != len(predictions):
        raise ShapeError("one prediction per sample is required")
    rows = []
    for s, p in zip(dataset, predictions):
        e, pa = joint_errors(model, p, s.params, joint_set)
        rows.append({"mpjpe": e, "pa_mpjpe": pa, "distance_bucket": s.distance_bucket,
                     "viewpoint_bucket": s.viewpoint_bucket})
    return bucketed_report(rows, bucket_key)


def predict_dataset(reg, model, dataset, gt_body=False):
    """Predictions for every sample; ``gt_body`` keeps the ground-truth body
    and replaces only hands and face, isolating the partial branch."""
    out = []
    for s in dataset:
        p = predict_params(reg, model, s.j2d)
        if gt_body:
            p = s.params.copy(hand_left=p.hand_left, hand_right=p.hand_right, psi_face=p.psi_face)
        out.append(p)
    return out


def evaluate(reg, model, dataset, joint_set="body", gt_body=False, bucket_key=None):
    """Run the regressor over ``dataset`` and report MPJPE / PA-MPJPE."""
    dataset = list(dataset)
    if not dataset:
        raise EmptyEvaluationError("no samples to evaluate")
    return evaluate_predictions(model, dataset, predict_dataset(reg, model, dataset, gt_body), joint_set,
                                bucket_key)


# ---------------------------------------------------------------------------
# weights file
# ---------------------------------------------------------------------------

def regressor_to_dict(reg):
    return {"format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION, "config": asdict(reg.config),
            "adjacency": {p: g.adjacency.tolist() for p, g in reg.graphs.items()},
            "nodes": {p: list(n) for p, n in reg.nodes.items()},
            "arrays": {k: v.tolist() for k, v in reg.arrays().items()}}


def regressor_from_dict(d):
    if d.get("format") != WEIGHTS_FORMAT:
        raise ModelFileError("not a regressor weights file")
    if d.get("version") != WEIGHTS_VERSION:
        raise VersionError(f"unsupported regressor weights version {d.get('version')!r}")
    try:
        cfg = RegressorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["config"].items()})
        arr = {k: np.array(v, dtype=float) for k, v in d["arrays"].items()}

        def stack(prefix, with_bias=True):
            n = sum(1 for k in arr if k.startswith(prefix + "W"))
            Ws = [arr[f"{prefix}W{i}"] for i in range(n)]
            return (Ws, [arr[f"{prefix}b{i}"] for i in range(n)]) if with_bias else Ws

        global_net = DenseLayerStack(*stack("global."))
        graphs = {p: GraphConvStack(np.array(A, dtype=float), stack(f"{p}.gcn.", False))
                  for p, A in d["adjacency"].items()}
        heads = {p: DenseLayerStack(*stack(f"{p}.head.")) for p in graphs}
        nodes = {p: tuple(int(j) for j in d["nodes"][p]) for p in PARTIAL_PARTS}
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed regressor weights: {exc}") from exc
    return Regressor(cfg, global_net, graphs, heads, nodes)


def save_regressor(reg, path):
    Path(path).write_text(json.dumps(regressor_to_dict(reg)))


def load_regressor(path):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"cannot read regressor weights: {exc}") from exc
    return regressor_from_dict(d)
