import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stsmesh import bodymodel as bm
from stsmesh import synth
from stsmesh.errors import BankValidationError, DatasetFormatError, GenerationError, InvalidConfigError
from stsmesh.projection import PART_TAGS, Keypoints2D, project_perspective

_PARTS = ("body",) * 5 + ("left_hand",) * 3 + ("right_hand",) * 3 + ("face",)


# -- banks -------------------------------------------------------------------

def test_procedural_bank_in_limits_and_reproducible(model, bank):
    assert bank.sizes() == {"body": 100, "hand": 100, "expression": 50, "shape": 50}
    assert synth.bank_violations(bank, model) == []
    again = synth.build_bank(model, seed=0)
    assert all(np.array_equal(getattr(bank, k), getattr(again, k))
               for k in ("body_poses", "hand_poses", "expressions", "shapes"))
    other = synth.build_bank(model, seed=1)
    assert not np.array_equal(bank.body_poses, other.body_poses)


def test_zero_fraction_bank_is_rest(model):
    cfg = synth.BankConfig(body_fraction=0.0, global_tilt=0.0)
    b = synth.build_bank(model, config=cfg, seed=3)
    assert np.all(b.body_poses == 0.0)


def test_file_bank_validation(model, bank, tmp_path):
    doc = bank.to_dict()
    doc["body_poses"][7][5] = [3.0, 3.0, 3.0]
    path = tmp_path / "bank.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(BankValidationError, match=r"body\[7\]"):
        synth.build_bank(model, source="file", path=path)
    lenient = synth.build_bank(model, source="file", path=path, strict=False)
    assert lenient.sizes()["body"] == 99 and lenient.rejected[0][:2] == ("body", 7)


def test_empty_category_rejected(model):
    with pytest.raises(InvalidConfigError):
        synth.build_bank(model, config=synth.BankConfig(n_shape=0))


# -- sampling ----------------------------------------------------------------

def _singleton_bank(model, bank):
    return synth.ParameterBank(bank.body_poses[:1], bank.hand_poses[:1], bank.expressions[:1], bank.shapes[:1])


def test_singleton_bank_fixes_parameters(model, bank):
    one = _singleton_bank(model, bank)
    cfg = synth.CameraSamplerConfig(viewpoints=(0,))
    p1, c1, _ = synth.sample_full_params(model, one, cfg, seed=1)
    p2, c2, _ = synth.sample_full_params(model, one, cfg, seed=2)
    assert p1.copy(camera=None) == p2.copy(camera=None)
    assert c1 != c2


def test_sampling_determinism(model, bank):
    a = synth.sample_full_params(model, bank, seed=5)
    b = synth.sample_full_params(model, bank, seed=5)
    c = synth.sample_full_params(model, bank, seed=6)
    assert a[0] == b[0] and a[1] == b[1]
    assert not a[0] == c[0]


def test_category_frequencies_uniform(model):
    small = synth.build_bank(model, config=synth.BankConfig(n_body=4, n_hand=3, n_expression=2, n_shape=5), seed=0)
    n = 10_000
    counts = {"body": np.zeros(4), "shape": np.zeros(5), "expression": np.zeros(2)}
    cfg = synth.CameraSamplerConfig(viewpoints=(0,))
    root0 = {tuple(np.round(bm.rodrigues(small.body_poses[i, 0]).ravel(), 12)): i for i in range(4)}
    for seed in range(n):
        p, _, _ = synth.sample_full_params(model, small, cfg, seed=seed)
        counts["body"][root0[tuple(np.round(bm.rodrigues(p.theta_global).ravel(), 12))]] += 1
        counts["shape"][np.flatnonzero(np.all(small.shapes == p.beta, axis=1))[0]] += 1
        counts["expression"][np.flatnonzero(np.all(small.expressions == p.psi_face, axis=1))[0]] += 1
    for c in counts.values():
        prob = 1 / len(c)
        sigma = math.sqrt(n * prob * (1 - prob))
        assert np.all(np.abs(c - n * prob) <= 3 * sigma)


# -- samples -----------------------------------------------------------------

def test_rest_sample_matches_hand_projection(model):
    zero = synth.ParameterBank(np.zeros((1, 22, 3)), np.zeros((1, 6)), np.zeros((1, 13)), np.zeros((1, 10)))
    cam_cfg = synth.CameraSamplerConfig(distance_range=(3.0, 3.0), viewpoints=(0,), image_height_range=(500, 500),
                                        lateral_jitter=0.0)
    s = synth.generate_sample(model, zero, synth.GenConfig(cam_cfg), seed=9)
    d = 3.0 * model.extent
    f = 500.0 * d / model.extent
    assert s.camera.fx == f and s.camera.t_c == (0.0, 0.0, d)
    rest = model.joint_tree.rest_joints
    expected = np.stack([f * rest[:, 0] / (d + rest[:, 2]), f * rest[:, 1] / (d + rest[:, 2])], axis=1)
    assert np.allclose(s.j2d.coords, expected, rtol=0, atol=1e-9)


def test_sample_invariants(model, bank):
    for s in synth.generate_dataset(model, bank, n=5, seed=3):
        assert np.array_equal(project_perspective(s.j3d, s.camera).coords, s.j2d.coords)
        assert np.array_equal(s.j3d.coords, bm.regress_joints(model, bm.skin(model, s.params))) or \
            np.abs(s.j3d.coords - bm.regress_joints(model, bm.skin(model, s.params))).max() < 1e-9
        assert s.distance_bucket == "2x" and s.viewpoint_bucket.startswith("az")
        assert s.j2d.parts == synth.keypoint_parts(model)


def test_identical_seeds_identical_samples(model, bank):
    assert synth.generate_sample(model, bank, seed=11) == synth.generate_sample(model, bank, seed=11)
    assert not synth.generate_sample(model, bank, seed=11) == synth.generate_sample(model, bank, seed=12)


def test_camera_inside_body_exhausts_retries(model, bank):
    cfg = synth.GenConfig(synth.CameraSamplerConfig(distance_range=(0.01, 0.01)), max_retries=3)
    with pytest.raises(GenerationError):
        synth.generate_sample(model, bank, cfg, seed=0)


def test_parallel_generation_matches_serial(model, bank):
    serial = synth.generate_dataset(model, bank, n=4, seed=2)
    parallel = synth.generate_dataset(model, bank, n=4, seed=2, jobs=2)
    assert serial == parallel


# -- degradation -------------------------------------------------------------

def test_degrade_identity_and_dropout(model, bank):
    s = synth.generate_sample(model, bank, seed=1)
    same = synth.degrade(s, synth.DegradeConfig())
    assert np.array_equal(same.coords, s.j2d.coords) and same.visible.all()
    dropped = synth.degrade(s, synth.DegradeConfig(dropout_prob={"left_hand": 1.0, "right_hand": 1.0}))
    hands = np.isin(np.array(s.j2d.parts), ["left_hand", "right_hand"])
    assert not dropped.visible[hands].any() and dropped.visible[~hands].all()


def test_degrade_noise_rayleigh_mean():
    kp = Keypoints2D(np.zeros((10_000, 2)), None, ("body",) * 10_000)
    out = synth.degrade(kp, synth.DegradeConfig(keypoint_noise_sigma=2.0, seed=4))
    r = np.linalg.norm(out.coords, axis=1)
    mean = 2.0 * math.sqrt(math.pi / 2)
    sd = 2.0 * math.sqrt((4 - math.pi) / 2) / math.sqrt(len(r))
    assert abs(r.mean() - mean) <= 3 * sd


def test_degrade_config_validation():
    with pytest.raises(InvalidConfigError):
        synth.degrade(Keypoints2D(np.zeros((1, 2))), synth.DegradeConfig(keypoint_noise_sigma=-1))
    with pytest.raises(InvalidConfigError):
        synth.degrade(Keypoints2D(np.zeros((1, 2))), synth.DegradeConfig(dropout_prob={"body": 1.5}))


# -- scale normalisation -----------------------------------------------------------

def test_normalize_square():
    kp = Keypoints2D(np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float), None, ("body",) * 4)
    norm = synth.scale_normalize(kp)
    assert np.array_equal(norm.records["body"].center, [1.0, 1.0])
    assert norm.records["body"].half_extent == 1.0
    assert np.array_equal(norm.coords, [[-1, -1], [1, -1], [1, 1], [-1, 1]])


def test_normalize_single_point_and_absent_part():
    kp = Keypoints2D(np.array([[5.0, 7.0], [1.0, 1.0], [2.0, 2.0]]), [True, False, False],
                     ("body", "left_hand", "left_hand"))
    norm = synth.scale_normalize(kp)
    assert np.array_equal(norm.coords[0], [0.0, 0.0])
    assert norm.records["body"].half_extent == synth.EPS_BBOX
    assert norm.absent == ("left_hand",)
    assert np.all(norm.coords[1:] == 0.0)


def _keypoints(coords, vis):
    return Keypoints2D(coords, vis, _PARTS)


coords_strategy = arrays(float, (12, 2), elements=st.floats(-1e3, 1e3))
vis_strategy = arrays(bool, 12)


@settings(max_examples=200, deadline=None)
@given(coords_strategy, vis_strategy)
def test_normalize_round_trip_and_range(coords, vis):
    kp = _keypoints(coords, vis)
    norm = synth.scale_normalize(kp)
    back = synth.denormalize(norm)
    scale = max(1.0, np.abs(coords).max())
    assert np.all(np.abs(back.coords[vis] - coords[vis]) <= 1e-12 * scale)
    assert np.all(np.abs(norm.coords[vis]) <= 2.0 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(coords_strategy, vis_strategy, st.integers(-20, 20))
def test_normalize_exact_under_power_of_two_scaling(coords, vis, k):
    a = 2.0 ** k
    out = synth.scale_normalize(_keypoints(a * coords, vis)).coords
    ref = synth.scale_normalize(_keypoints(coords, vis)).coords
    big = np.abs(coords).max(initial=0)
    if big * a > 1e300 or (0 < big * a < 1e-290):
        return
    # the degenerate floor breaks scale invariance for parts smaller than it
    norm = synth.scale_normalize(_keypoints(coords, vis))
    if any(r.present and r.half_extent * min(a, 1.0) <= synth.EPS_BBOX for r in norm.records.values()):
        return
    assert np.array_equal(out, ref)


@settings(max_examples=200, deadline=None)
@given(coords_strategy, vis_strategy, st.floats(0.01, 100), arrays(float, 2, elements=st.floats(-1e3, 1e3)))
def test_normalize_similarity_invariance(coords, vis, a, b):
    norm = synth.scale_normalize(_keypoints(coords, vis))
    present = [r.half_extent for r in norm.records.values() if r.present]
    if not present or min(present) < 1e-3:
        return
    out = synth.scale_normalize(_keypoints(a * coords + b, vis)).coords
    assert np.all(np.abs(out - norm.coords) <= 1e-12 * max(1.0, np.abs(coords).max() + np.abs(b).max() / a)
                  / min(present))


# -- dataset files ----------------------------------------------------------------

def test_dataset_round_trip(model, bank, tmp_path):
    samples = synth.generate_dataset(model, bank, n=3, seed=0)
    path = tmp_path / "data.ndjson"
    synth.write_dataset(path, samples, meta={"note": "x"})
    back, header = synth.read_dataset(path, with_header=True)
    assert back == samples and header["count"] == 3 and header["format"] == "sts-dataset"


def test_empty_dataset(tmp_path):
    path = tmp_path / "empty.ndjson"
    synth.write_dataset(path, [])
    assert synth.read_dataset(path) == []
    assert len(path.read_text().splitlines()) == 1


def test_corrupted_line_reports_number(model, bank, tmp_path):
    path = tmp_path / "data.ndjson"
    synth.write_dataset(path, synth.generate_dataset(model, bank, n=3, seed=0))
    lines = path.read_text().splitlines()
    lines[2] = lines[2][:50]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 3"):
        synth.read_dataset(path)


def test_part_tags_cover_model(model):
    assert set(synth.keypoint_parts(model)) == set(PART_TAGS)
