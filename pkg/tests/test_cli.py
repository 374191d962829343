import csv
import hashlib
import json

import pytest

from stsmesh import cli, synth

FAST_FIT = {"stage1_iters": 5, "stage2_iters": 20, "n_starts": 1, "patience": 3}
FAST_BENCH = {**FAST_FIT, "d_init_factors": [4.0], "n_probe": 1}
TINY_TRAIN = {"epochs_phase1": 1, "epochs_phase2": 1, "batch_size": 4, "lr": 1e-3}


def _main(*argv):
    return cli.main([str(a) for a in argv])


def _config(tmp_path, name, settings):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(settings))
    return path


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != cli.MANIFEST}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _main("model", "--out", root / "model") == 0
    assert _main("gen", "--n", 6, "--seed", 3, "--model", root / "model" / "model.json",
                 "--out", root / "gen") == 0
    return root


@pytest.fixture(scope="module")
def dataset(workspace):
    return workspace / "gen" / "dataset.ndjson"


def test_gen_empty_dataset(tmp_path, capsys):
    assert _main("gen", "--n", 0, "--out", tmp_path) == 0
    assert synth.read_dataset(tmp_path / "dataset.ndjson") == []
    manifest = json.loads((tmp_path / cli.MANIFEST).read_text())
    assert manifest["command"] == "gen" and manifest["config"]["n"] == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["outputs"] == [str(tmp_path / "dataset.ndjson")]


def test_flags_override_config_file(tmp_path):
    cfg = _config(tmp_path, "c", {"n": 4, "seed": 9})
    assert _main("gen", "--config", cfg, "--n", 2, "--out", tmp_path / "a") == 0
    manifest = json.loads((tmp_path / "a" / cli.MANIFEST).read_text())
    assert manifest["config"]["n"] == 2 and manifest["config"]["seed"] == 9
    assert len(synth.read_dataset(tmp_path / "a" / "dataset.ndjson")) == 2


def test_default_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert _main("gen", "--n", 1) == 0
    assert (tmp_path / "env" / "gen" / "dataset.ndjson").exists()


def test_errors_are_json_with_exit_one(tmp_path, capsys):
    assert _main("fit", "--dataset", tmp_path / "missing.ndjson", "--out", tmp_path) == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and err["message"]
    assert _main("gen", "--config", _config(tmp_path, "bad", {"speed": 1}), "--out", tmp_path) == 1
    assert "speed" in json.loads(capsys.readouterr().err)["message"]
    assert _main("eval", "--dataset", tmp_path / "x", "--out", tmp_path) == 1
    assert _main("gen", "--jobs", 0, "--out", tmp_path) == 1


def test_bench_distance_single_row(tmp_path, workspace):
    cfg = _config(tmp_path, "b", {"fit": FAST_BENCH})
    assert _main("bench-distance", "--config", cfg, "--distances", "2", "--n", 1, "--camera-kinds", "d2s",
                 "--model", workspace / "model" / "model.json", "--out", tmp_path / "b") == 0
    rows = list(csv.DictReader((tmp_path / "b" / "bench.csv").open()))
    assert len(rows) == 1
    assert rows[0]["camera_kind"] == "d2s" and rows[0]["bucket"] == "2x" and rows[0]["n"] == "1"
    per = json.loads((tmp_path / "b" / "per_sample.json").read_text())
    assert len(per["d2s"]) == 1


def _runs(tmp_path, workspace, dataset):
    model = workspace / "model" / "model.json"
    fit_cfg = _config(tmp_path, "fit", {"fit": FAST_FIT})
    bench_cfg = _config(tmp_path, "bench", {"fit": FAST_BENCH})
    train_cfg = _config(tmp_path, "train", {"train": TINY_TRAIN})
    runs = {
        "model": ["model"],
        "gen": ["gen", "--n", 4, "--seed", 5, "--model", model],
        "fit": ["fit", "--dataset", dataset, "--config", fit_cfg, "--model", model],
        "train": ["train", "--dataset", dataset, "--val-dataset", dataset, "--config", train_cfg, "--model", model],
        "bench-distance": ["bench-distance", "--config", bench_cfg, "--distances", "2,30", "--n", 1,
                           "--model", model],
        "bench-viewpoint": ["bench-viewpoint", "--config", bench_cfg, "--n-viewpoints", 2, "--n", 1,
                            "--model", model],
    }
    return runs


def test_every_command_reruns_bit_identically(tmp_path, workspace, dataset):
    before = _digest(dataset)
    runs = _runs(tmp_path, workspace, dataset)
    for name, argv in runs.items():
        first = tmp_path / name / "first"
        assert _main(*argv, "--out", first) == 0, name
        again = tmp_path / name / "again"
        assert _main("rerun", first / cli.MANIFEST, "--out", again, "--jobs", 2) == 0, name
        assert _outputs(first) == _outputs(again), name
        assert _outputs(first), name
    # eval reads the weights just trained
    weights = tmp_path / "train" / "first" / "weights.json"
    first = tmp_path / "eval" / "first"
    assert _main("eval", "--dataset", dataset, "--weights", weights, "--joint-set", "hands", "--gt-body",
                 "--out", first) == 0
    assert _main("rerun", first / cli.MANIFEST, "--out", tmp_path / "eval" / "again") == 0
    assert _outputs(first) == _outputs(tmp_path / "eval" / "again")
    report = json.loads((first / "report.json").read_text())
    assert report["n_samples"] == 6
    assert _digest(dataset) == before


def test_eval_of_fit_results(tmp_path, workspace, dataset):
    cfg = _config(tmp_path, "fit", {"fit": FAST_FIT})
    assert _main("fit", "--dataset", dataset, "--index", 1, "--config", cfg, "--out", tmp_path / "fit") == 0
    fits = json.loads((tmp_path / "fit" / "fits.json").read_text())
    assert [f["index"] for f in fits] == [1]
    rows = list(csv.DictReader((tmp_path / "fit" / "fits.csv").open()))
    assert list(rows[0]) == cli.FIT_COLUMNS
    assert _main("eval", "--dataset", dataset, "--fits", tmp_path / "fit" / "fits.json",
                 "--out", tmp_path / "eval") == 0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert report["n_samples"] == 1
    assert _main("eval", "--dataset", dataset, "--out", tmp_path / "neither") == 1


def test_manifest_records_absolute_inputs(tmp_path, workspace, dataset, monkeypatch):
    monkeypatch.chdir(dataset.parent)
    cfg = _config(tmp_path, "fit", {"fit": FAST_FIT})
    assert _main("fit", "--dataset", dataset.name, "--index", 0, "--config", cfg, "--out", tmp_path / "f") == 0
    manifest = json.loads((tmp_path / "f" / cli.MANIFEST).read_text())
    assert manifest["inputs"]["dataset"] == str(dataset)
    assert manifest["version"] and manifest["duration_s"] >= 0


def test_viewpoint_bench_pairing(tmp_path, workspace, monkeypatch):
    assert cli.resolve("bench-viewpoint")["paired"] is True
    seeds = []
    real = synth.generate_dataset

    def spy(model, bank, config=None, n=0, seed=0, jobs=1):
        seeds.append(seed)
        return real(model, bank, config, n=n, seed=seed, jobs=jobs)

    monkeypatch.setattr(synth, "generate_dataset", spy)
    cfg = _config(tmp_path, "b", {"fit": FAST_BENCH})
    common = ["bench-viewpoint", "--config", cfg, "--n-viewpoints", 3, "--n", 1, "--camera-kinds", "weak",
              "--model", workspace / "model" / "model.json"]
    assert _main(*common, "--out", tmp_path / "paired") == 0
    assert len(set(seeds)) == 1 and len(seeds) == 3
    seeds.clear()
    assert _main(*common, "--unpaired", "--out", tmp_path / "unpaired") == 0
    assert len(set(seeds)) == 3
    manifest = json.loads((tmp_path / "unpaired" / cli.MANIFEST).read_text())
    assert manifest["config"]["paired"] is False
    rows = list(csv.DictReader((tmp_path / "paired" / "bench.csv").open()))
    assert [r["bucket"] for r in rows] == ["az00", "az01", "az02", "all"]
