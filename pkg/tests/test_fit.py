import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsmesh import bodymodel as bm
from stsmesh import fit
from stsmesh import synth
from stsmesh.errors import ConfigurationError, InsufficientKeypointsError, InvalidConfigError
from stsmesh.projection import D2S, Keypoints2D, Perspective, WeakPerspective, project

from conftest import random_params

FAST = dict(stage1_iters=10, stage2_iters=60, n_starts=2, patience=5)


@pytest.fixture(scope="module")
def sample(model, bank):
    return synth.generate_sample(model, bank, seed=21)


def _camera(kind, rng, model):
    d = 3.0 * model.extent * rng.uniform(0.8, 1.2)
    if kind == "weak":
        return WeakPerspective(rng.uniform(200, 300), rng.uniform(-20, 20, 2))
    if kind == "d2s":
        return D2S(rng.uniform(200, 300), rng.uniform(-20, 20, 2), d)
    f = rng.uniform(500, 800)
    return Perspective(f, f, (rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), d))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_loss_zero_at_ground_truth(model, sample):
    t = fit.Targets(j2d=sample.j2d, j3d=sample.j3d.coords, params=sample.params)
    total, parts = fit.loss_total(sample.params, t, model=model, camera_kind="perspective",
                                  weights={"w_r": 0.0})
    assert total < 1e-20
    assert parts["L_2D"] < 1e-9 and parts["L_pm"] < 1e-30


def test_l2d_single_keypoint_example(model, sample):
    pred = project(bm.joints(model, sample.params), sample.camera)
    vis = np.zeros(model.n_joints, dtype=bool)
    vis[3] = True
    coords = pred.copy()
    coords[3] += [3.0, -4.0]
    kp = Keypoints2D(coords, vis, sample.j2d.parts)
    _, parts = fit.loss_total(sample.params, fit.Targets(j2d=kp), model=model)
    assert parts["L_2D"] == pytest.approx(3.5, abs=1e-9)


def test_weights_echoed(model, sample):
    _, parts = fit.loss_total(sample.params, fit.Targets(params=sample.params), model=model)
    assert parts["weights"] == {"w_pm": 20.0, "w_r": 0.5, "w_2d": 6.0, "w_3d": 60.0}


def test_loss_needs_targets(model, sample):
    with pytest.raises(ConfigurationError):
        fit.loss_total(sample.params, fit.Targets(), model=model)


def test_rationality_penalty_examples(model):
    rest = bm.FullParams.rest(model)
    assert fit.rationality_penalty(rest, model) == 0.0
    body = rest.theta_body.copy()
    j, axis = 3, 0
    body[j - 1, axis] = model.angle_limits[j, axis, 1] + 0.1
    assert fit.rationality_penalty(rest.copy(theta_body=body), model) == pytest.approx(0.01, rel=1e-9)
    beta = np.zeros(model.n_shape)
    beta[0] = 1.0
    assert fit.rationality_penalty(rest.copy(beta=beta), model, lambda_beta=2.5) == 2.5


def test_shape_enters_parameter_loss(model, sample):
    beta = sample.params.beta + 0.1
    _, parts = fit.loss_total(sample.params.copy(beta=beta), fit.Targets(params=sample.params), model=model)
    assert parts["L_pm"] == pytest.approx(0.01, rel=1e-9)


@pytest.mark.parametrize("kind", ["weak", "d2s", "perspective"])
def test_gradient_matches_finite_differences(model, sample, kind, rng):
    worst = 0.0
    for _ in range(10):
        p = random_params(model, rng, scale=0.25).copy(camera=_camera(kind, rng, model))
        # a target 2D set well away from the prediction keeps L1 kinks out of the stencil
        uv = project(bm.joints(model, sample.params), _camera(kind, rng, model)) + rng.normal(0, 5, (model.n_joints, 2))
        t = fit.Targets(j2d=Keypoints2D(uv, None, sample.j2d.parts), j3d=sample.j3d.coords, params=sample.params)
        _, g, layout = fit.loss_gradient(p, t, model=model)
        x = layout.pack(p)
        for i in rng.choice(layout.size, 12, replace=False):
            h = 1e-6 * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fp, _ = fit.loss_total(layout.unpack(xp), t, model=model, camera_kind=kind)
            fm, _ = fit.loss_total(layout.unpack(xm), t, model=model, camera_kind=kind)
            fd = (fp - fm) / (2 * h)
            if max(abs(fd), abs(g[i])) > 1e-6:
                worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i])))
    assert worst < 1e-4


def test_weak_gauge_invariance_and_depth_sensitivity(model, sample, rng):
    """Shifting every joint along the optical axis by 0.1 d is invisible to
    the weak model and strictly changes the D2S and perspective losses."""
    t = fit.Targets(j2d=sample.j2d)
    p = sample.params
    joints = bm.joints(model, p)
    weak = _camera("weak", rng, model)
    shift = [0.0, 0.0, 0.3 * model.extent]
    assert np.array_equal(project(joints + shift, weak), project(joints, weak))
    for kind in ("d2s", "perspective"):
        cam = _camera(kind, rng, model)
        base, _ = fit.loss_total(p.copy(camera=cam), t, model=model)
        if kind == "d2s":
            shifted = D2S(cam.s, cam.t, 1.1 * cam.d)
        else:
            tx, ty, tz = cam.t_c
            shifted = Perspective(cam.fx, cam.fy, (tx, ty, 1.1 * tz))
        moved, _ = fit.loss_total(p.copy(camera=shifted), t, model=model)
        assert moved != base


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def test_fit_trace_is_monotone_and_deterministic(model, sample):
    cfg = fit.FitConfig(**FAST)
    a = fit.fit_frame(sample.j2d, model, cfg)
    b = fit.fit_frame(sample.j2d, model, cfg)
    assert a.to_dict() == b.to_dict()
    assert np.all(np.diff(a.trace) <= 0)
    assert a.diagnostics["final_loss"] < a.diagnostics["start_loss"]
    assert a.iterations == a.diagnostics["stage1_iterations"] + a.diagnostics["stage2_iterations"]


def test_fit_with_probes_is_monotone(model, sample):
    cfg = fit.benchmark_config("d2s", **FAST)
    res = fit.fit_frame(sample.j2d, model, cfg)
    assert np.all(np.diff(res.trace) <= 0)
    assert res.params.camera.kind == "d2s"


def test_fit_improves_reprojection(model, sample):
    res = fit.fit_frame(sample.j2d, model, fit.FitConfig())
    assert res.losses["L_2D"] < 2.0
    e, pa = fit.sample_errors(model, sample, res)
    assert pa <= e and pa < 0.1


def test_fit_from_near_optimum_reaches_subpixel(model, sample):
    init = sample.params.copy(beta=np.zeros(model.n_shape),
                              camera=D2S(sample.camera.fx / sample.camera.t_c[2],
                                         np.array(sample.camera.t_c[:2]) * sample.camera.fx / sample.camera.t_c[2],
                                         sample.camera.t_c[2]))
    res = fit.fit_frame(sample.j2d, model, fit.FitConfig(), init=init)
    assert res.losses["L_2D"] < 0.5
    assert fit.sample_errors(model, sample, res)[1] < 0.02


def test_rest_pose_fit_stays_at_rest(model):
    params = bm.FullParams.rest(model)
    cam = Perspective(500.0, 500.0, (0.0, 0.0, 4.0 * model.extent))
    kp = Keypoints2D(project(bm.joints(model, params), cam), None, synth.keypoint_parts(model))
    res = fit.fit_frame(kp, model, fit.FitConfig(**FAST))
    assert res.losses["L_2D"] < 0.5
    assert np.max(np.abs(res.params.theta_body)) < 0.05


def test_insufficient_keypoints(model, sample):
    vis = np.zeros(model.n_joints, dtype=bool)
    vis[:3] = True
    kp = Keypoints2D(sample.j2d.coords, vis, sample.j2d.parts)
    with pytest.raises(InsufficientKeypointsError):
        fit.fit_frame(kp, model, fit.FitConfig(**FAST))


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        fit.FitConfig(w_2d=-1.0).validate()
    with pytest.raises(InvalidConfigError):
        fit.FitConfig(stage2_iters=0).validate()
    with pytest.raises(InvalidConfigError):
        fit.FitConfig.from_dict({"camera_kind": "fisheye"})
    with pytest.raises(InvalidConfigError):
        fit.FitConfig.from_dict({"speed": 3})
    cfg = fit.FitConfig.from_dict(fit.FitConfig(d_init_factors=[2, 3]).to_dict())
    assert cfg.d_init_factors == (2.0, 3.0)


def test_optimiser_coordinates_gradient(model, sample, rng):
    # D2S depth is optimised as inverse depth; check the chain rule
    layout = fit.Layout(model, "d2s")
    problem = fit._Problem(layout, fit.Targets(j2d=sample.j2d), fit.FitConfig().weights(), 1.0)
    p = random_params(model, rng, scale=0.2).copy(camera=_camera("d2s", rng, model))
    y = problem.from_natural(layout.pack(p))
    assert np.allclose(problem.to_natural(y), layout.pack(p), rtol=1e-12, atol=1e-12)
    _, _, g = problem.value_grad(y)
    for i in list(range(layout.slices["camera"].start, layout.size)) + [0, 5]:
        e = np.zeros_like(y)
        e[i] = 1e-6 * max(1.0, abs(y[i]))
        fd = (problem.value(y + e) - problem.value(y - e)) / (2 * e[i])
        assert fd == pytest.approx(g[i], rel=1e-4, abs=1e-4)
    y[layout.slices["camera"].start + 3] = 0.0
    assert problem.value(y) == math.inf


def test_held_depth_keeps_initial_distance(model, sample):
    factors = (2.0, 8.0)
    held = fit.FitConfig(camera_kind="d2s", d_init_factors=factors, n_probe=2, hold_depth=True,
                         stage1_iters=10, probe_iters=20, stage2_iters=20, n_starts=2, patience=1000)
    res = fit.fit_frame(sample.j2d, model, held)
    assert np.any(np.isclose(res.params.camera.d, [f * model.extent for f in factors], rtol=1e-12))
    free = fit.fit_frame(sample.j2d, model, fit.FitConfig(**{**held.to_dict(), "stage2_iters": 80}))
    assert not np.any(np.isclose(free.params.camera.d, [f * model.extent for f in factors], rtol=1e-6))
    assert np.all(np.diff(free.trace) <= 0)


def test_more_finishers_never_end_higher(model, sample):
    cfg = dict(camera_kind="d2s", d_init_factors=(2.0, 30.0), n_probe=3, probe_iters=10, **FAST)
    one = fit.fit_frame(sample.j2d, model, fit.FitConfig(**cfg))
    three = fit.fit_frame(sample.j2d, model, fit.FitConfig(n_finish=3, **cfg))
    assert three.losses["total"] <= one.losses["total"]
    with pytest.raises(InvalidConfigError):
        fit.FitConfig(n_finish=0).validate()


def test_benchmark_config_keeps_equal_budgets():
    w, d = fit.benchmark_config("weak"), fit.benchmark_config("d2s", stage2_iters=50)
    assert len(w.d_init_factors) == len(d.d_init_factors) and w.n_probe == d.n_probe
    assert d.stage2_iters == 50 and fit.FitConfig().d_init_factors == (4.0,)


def test_result_serialises(model, sample):
    res = fit.fit_frame(sample.j2d, model, fit.FitConfig(**FAST))
    d = res.to_dict()
    assert bm.FullParams.from_dict(d["params"]) == res.params
    assert d["losses"]["total"] == res.losses["total"]


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def test_singleton_sweep(model, sample):
    rows, reports, per = fit.fit_sweep(model, [sample], {"weak": fit.FitConfig(camera_kind="weak", **FAST),
                                                          "d2s": fit.FitConfig(**FAST)})
    assert [r["camera_kind"] for r in rows] == ["weak", "d2s"]
    assert all(r["n"] == 1 and r["failures"] == 0 and r["bucket"] == "2x" for r in rows)
    assert set(rows[0]) == set(fit.SWEEP_COLUMNS)
    assert reports["d2s"].n_samples == 1


def test_sweep_counts_failures(model, sample):
    vis = np.zeros(model.n_joints, dtype=bool)
    bad = synth.SyntheticSample(sample.params, sample.j3d, Keypoints2D(sample.j2d.coords, vis, sample.j2d.parts),
                                sample.camera, "5x", sample.viewpoint_bucket, 0)
    rows, _, per = fit.fit_sweep(model, [sample, bad], {"d2s": fit.FitConfig(**FAST)})
    by_bucket = {r["bucket"]: r for r in rows}
    assert by_bucket["5x"]["failures"] == 1 and by_bucket["5x"]["n"] == 0 and math.isnan(by_bucket["5x"]["mpjpe"])
    assert by_bucket["all"]["failures"] == 1 and by_bucket["all"]["n"] == 1
    assert per["d2s"][1]["failed"] and "InsufficientKeypoints" in per["d2s"][1]["error"]


def test_parallel_fits_match_serial(model, bank):
    samples = synth.generate_dataset(model, bank, n=2, seed=4)
    cfg = fit.FitConfig(**FAST)
    assert fit.run_fits(model, samples, cfg, jobs=2) == fit.run_fits(model, samples, cfg, jobs=1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_layout_round_trip(seed):
    model = bm.build_toy_model(seed=0)
    r = np.random.default_rng(seed)
    for kind in ("weak", "d2s", "perspective"):
        p = random_params(model, r).copy(camera=_camera(kind, r, model))
        layout = fit.Layout(model, kind)
        back = layout.unpack(layout.pack(p))
        assert np.array_equal(layout.pack(back), layout.pack(p))
        assert np.allclose(back.full_pose(model), p.full_pose(model), atol=1e-12)
