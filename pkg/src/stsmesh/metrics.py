"""Joint position errors with optional Procrustes alignment."""

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateAlignmentError, EmptyEvaluationError, LabelingError, ShapeError


def _mask(visibility, k):
    if visibility is None:
        return np.ones(k, dtype=bool)
    vis = np.asarray(visibility, dtype=bool)
    if vis.shape != (k,):
        raise ShapeError("visibility must hold one flag per joint")
    return vis


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must be matching (K, D) arrays")
    return pred, gt


def mpjpe(pred, gt, visibility=None):
    """Mean Euclidean distance over visible joints."""
    pred, gt = _check_pair(pred, gt)
    vis = _mask(visibility, len(gt))
    if not vis.any():
        raise EmptyEvaluationError("no visible joints to evaluate")
    dist = np.linalg.norm(pred[vis] - gt[vis], axis=1)
    return math.fsum(dist) / len(dist)


@dataclass
class Alignment:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    aligned: np.ndarray


def procrustes_align(pred, gt, visibility=None, with_scale=True):
    """Similarity transform minimising sum ||s R pred_i + t - gt_i||^2.

    Only visible joints determine the transform; it is then applied to every
    joint. ``with_scale=False`` fixes ``s = 1`` (rigid alignment).
    """
    pred, gt = _check_pair(pred, gt)
    vis = _mask(visibility, len(gt))
    P, G = pred[vis], gt[vis]
    if len(P) < 3:
        raise DegenerateAlignmentError("alignment needs at least three visible joints")
    mu_p, mu_g = P.mean(axis=0), G.mean(axis=0)
    X, Y = P - mu_p, G - mu_g
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateAlignmentError("predicted joints are collinear or coincident")
    U, S, Vt = np.linalg.svd(X.T @ Y)
    D = np.eye(X.shape[1])
    D[-1, -1] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    s = float(np.sum(S * np.diag(D)) / np.sum(X * X)) if with_scale else 1.0
    t = mu_g - s * R @ mu_p
    return Alignment(s, R, t, s * pred @ R.T + t)


def pa_mpjpe(pred, gt, visibility=None, with_scale=True):
    aligned = procrustes_align(pred, gt, visibility, with_scale).aligned
    return mpjpe(aligned, gt, visibility)


def root_relative(joints, root=0):
    joints = np.asarray(joints, dtype=float)
    return joints - joints[..., root:root + 1, :]


def _bucket_sort_key(label):
    numbers = re.findall(r"-?\d+(?:\.\d+)?", label)
    return (float(numbers[0]) if numbers else math.inf, label)


@dataclass
class BucketStats:
    n: int
    mpjpe: float
    pa_mpjpe: float
    extra: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    n_samples: int
    units: str = "model units"
    buckets: dict = field(default_factory=dict)

    def rows(self):
        out = [{"bucket": label, "n": b.n, "mpjpe": b.mpjpe, "pa_mpjpe": b.pa_mpjpe, **b.extra}
               for label, b in self.buckets.items()]
        out.append({"bucket": "all", "n": self.n_samples, "mpjpe": self.mpjpe, "pa_mpjpe": self.pa_mpjpe})
        return out

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["bucket", "n", "mpjpe", "pa_mpjpe"], extrasaction="ignore",
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_dict(self):
        return {"mpjpe": self.mpjpe, "pa_mpjpe": self.pa_mpjpe, "n_samples": self.n_samples,
                "units": self.units,
                "buckets": {k: {"n": b.n, "mpjpe": b.mpjpe, "pa_mpjpe": b.pa_mpjpe, **b.extra}
                            for k, b in self.buckets.items()}}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def bucketed_report(samples, bucket_key=None, units="model units"):
    """Aggregate per-sample errors overall and per bucket.

    ``samples`` are mappings with ``mpjpe`` and ``pa_mpjpe`` entries and,
    when ``bucket_key`` is given (``"distance"`` or ``"viewpoint"``), a
    ``"<key>_bucket"`` label.  Overall figures are means over samples.
    """
    samples = list(samples)
    if not samples:
        raise EmptyEvaluationError("no samples to report")
    groups = {}
    if bucket_key is not None:
        field_name = bucket_key if bucket_key.endswith("_bucket") else f"{bucket_key}_bucket"
        for i, s in enumerate(samples):
            label = s.get(field_name)
            if label is None:
                raise LabelingError(f"sample {i} has no {field_name!r} label")
            groups.setdefault(str(label), []).append(s)
    buckets = {}
    for label in sorted(groups, key=_bucket_sort_key):
        g = groups[label]
        buckets[label] = BucketStats(len(g), math.fsum(s["mpjpe"] for s in g) / len(g),
                                     math.fsum(s["pa_mpjpe"] for s in g) / len(g))
    return EvalReport(math.fsum(s["mpjpe"] for s in samples) / len(samples),
                      math.fsum(s["pa_mpjpe"] for s in samples) / len(samples),
                      len(samples), units, buckets)
