"""Command-line entry point.

Every command writes its outputs plus a ``manifest.json`` into one output
directory.  The manifest stores the fully resolved configuration, so
``stsmesh rerun <manifest>`` repeats the run exactly.  Settings resolve as
defaults < ``--config`` JSON file < command-line flags.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import bodymodel as bm
from . import fit as fitmod
from . import regress as rg
from . import synth
from .errors import InvalidConfigError, StsError

OUT_ENV = "STSMESH_OUT"
MANIFEST = "manifest.json"

log = logging.getLogger("stsmesh")


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def write_atomic(path, text):
    """Write ``text`` to a sibling temporary file, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _csv_text(rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_model(cfg):
    if cfg.get("model"):
        return bm.load_model(cfg["model"])
    return bm.build_toy_model(seed=0)


def _read_samples(path):
    return synth.read_dataset(path)


def _gen_config(cfg):
    return synth.GenConfig.from_dict(cfg.get("gen") or {})


def _fit_config(cfg, base=None, **overrides):
    d = {**(base or {}), **(cfg.get("fit") or {}), **overrides}
    if "d_init_factors" in d:
        d["d_init_factors"] = tuple(d["d_init_factors"])
    return fitmod.FitConfig.from_dict(d)


def _kinds(cfg):
    kinds = cfg["camera_kinds"]
    return kinds.split(",") if isinstance(kinds, str) else list(kinds)


# ---------------------------------------------------------------------------
# commands: each takes the resolved settings and returns output file names
# ---------------------------------------------------------------------------

def cmd_model(cfg, out):
    mc = bm.ToyModelConfig(**(cfg.get("model_config") or {}))
    model = bm.build_toy_model(mc, seed=cfg["seed"])
    bm.save_model(model, out / "model.json")
    return ["model.json"]


def cmd_gen(cfg, out):
    model = _load_model(cfg)
    bank = synth.build_bank(model, source=cfg["bank_source"], seed=cfg["seed"], path=cfg.get("bank_path"),
                            config=synth.BankConfig(**(cfg.get("bank") or {})))
    samples = synth.generate_dataset(model, bank, _gen_config(cfg), n=cfg["n"], seed=cfg["seed"],
                                     jobs=cfg["jobs"])
    synth.write_dataset(out / "dataset.ndjson", samples, {"seed": cfg["seed"], "n": cfg["n"]})
    return ["dataset.ndjson"]


FIT_COLUMNS = ["index", "camera_kind", "total", "L_2D", "iterations", "converged", "mpjpe", "pa_mpjpe"]


def cmd_fit(cfg, out):
    model = _load_model(cfg)
    samples = _read_samples(cfg["dataset"])
    indices = [cfg["index"]] if cfg.get("index") is not None else list(range(len(samples)))
    fcfg = _fit_config(cfg, camera_kind=cfg["camera_kind"], seed=cfg["seed"])
    chosen = [samples[i] for i in indices]
    results = _fit_all(model, chosen, fcfg, cfg["jobs"])
    rows, dump = [], []
    for i, s, res in zip(indices, chosen, results):
        e, pa = fitmod.sample_errors(model, s, res)
        rows.append({"index": i, "camera_kind": fcfg.camera_kind, "total": res.losses["total"],
                     "L_2D": res.losses.get("L_2D", math.nan), "iterations": res.iterations,
                     "converged": res.converged, "mpjpe": e, "pa_mpjpe": pa})
        dump.append({"index": i, **res.to_dict()})
    write_atomic(out / "fits.json", _json_text(dump))
    write_atomic(out / "fits.csv", _csv_text(rows, FIT_COLUMNS))
    return ["fits.json", "fits.csv"]


def _fit_one(args):
    model, sample, cfg = args
    return fitmod.fit_frame(sample.j2d, model, cfg)


def _fit_all(model, samples, cfg, jobs):
    tasks = [(model, s, cfg) for s in samples]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_fit_one, tasks))
    return [_fit_one(t) for t in tasks]


def cmd_train(cfg, out):
    model = _load_model(cfg)
    samples = _read_samples(cfg["dataset"])
    val = _read_samples(cfg["val_dataset"]) if cfg.get("val_dataset") else None
    tcfg = rg.TrainConfig.from_dict({**(cfg.get("train") or {}), "seed": cfg["seed"]})
    reg, curve = rg.train(model, samples, tcfg, val_dataset=val,
                          progress=lambda p: log.info("epoch %d phase %d loss %.6g", p.epoch, p.phase,
                                                      p.train_loss))
    write_atomic(out / "weights.json", json.dumps(rg.regressor_to_dict(reg)))
    write_atomic(out / "curve.csv", rg.curve_to_csv(curve))
    return ["weights.json", "curve.csv"]


def cmd_eval(cfg, out):
    model = _load_model(cfg)
    samples = _read_samples(cfg["dataset"])
    if bool(cfg.get("weights")) == bool(cfg.get("fits")):
        raise InvalidConfigError("eval needs exactly one of --weights or --fits")
    if cfg.get("weights"):
        reg = rg.load_regressor(cfg["weights"])
        preds = rg.predict_dataset(reg, model, samples, gt_body=cfg["gt_body"])
    else:
        fits = json.loads(Path(cfg["fits"]).read_text())
        samples = [samples[f["index"]] for f in fits]
        preds = [bm.FullParams.from_dict(f["params"]) for f in fits]
    report = rg.evaluate_predictions(model, samples, preds, cfg["joint_set"], cfg.get("bucket"))
    write_atomic(out / "report.json", report.to_json() + "\n")
    write_atomic(out / "report.csv", report.to_csv())
    return ["report.json", "report.csv"]


def _bench(cfg, out, model, groups, bucket_key):
    """Fit every group of samples under each camera kind and write the sweep.

    Fits start from the benchmark protocol; ``fit`` settings override it.
    """
    samples = [s for g in groups for s in g]
    configs = {k: _fit_config(cfg, fitmod.BENCHMARK_PROTOCOL, camera_kind=k, seed=cfg["seed"])
               for k in _kinds(cfg)}
    rows, _, per_sample = fitmod.fit_sweep(model, samples, configs, bucket_key, cfg["jobs"])
    write_atomic(out / "bench.csv", _csv_text(rows, fitmod.SWEEP_COLUMNS))
    write_atomic(out / "per_sample.json", _json_text(per_sample))
    return ["bench.csv", "per_sample.json"]


def _bench_bank(cfg, model):
    return synth.build_bank(model, seed=cfg["seed"])


def cmd_bench_distance(cfg, out):
    model = _load_model(cfg)
    bank = _bench_bank(cfg, model)
    base = _gen_config(cfg)
    groups = []
    for i, dist in enumerate(cfg["distances"]):
        cam = synth.CameraSamplerConfig(**{**asdict(base.camera), "distance_range": (float(dist), float(dist))})
        gen = synth.GenConfig(cam, base.max_retries)
        groups.append(synth.generate_dataset(model, bank, gen, n=cfg["n"], seed=synth.derive_seed(cfg["seed"], i),
                                             jobs=cfg["jobs"]))
    return _bench(cfg, out, model, groups, "distance")


def cmd_bench_viewpoint(cfg, out):
    """Fit error per azimuth.  Paired runs reuse the same sample seeds at
    every viewpoint, so buckets differ only in the body's orientation."""
    model = _load_model(cfg)
    bank = _bench_bank(cfg, model)
    base = _gen_config(cfg)
    groups = []
    for v in range(cfg["n_viewpoints"]):
        cam = synth.CameraSamplerConfig(**{**asdict(base.camera), "n_viewpoints": cfg["n_viewpoints"],
                                           "viewpoints": (v,), "distance_range": (cfg["distance"],) * 2})
        gen = synth.GenConfig(cam, base.max_retries)
        seed = cfg["seed"] if cfg["paired"] else synth.derive_seed(cfg["seed"], v)
        groups.append(synth.generate_dataset(model, bank, gen, n=cfg["n"], seed=seed, jobs=cfg["jobs"]))
    return _bench(cfg, out, model, groups, "viewpoint")


COMMANDS = {
    "model": cmd_model,
    "gen": cmd_gen,
    "fit": cmd_fit,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-distance": cmd_bench_distance,
    "bench-viewpoint": cmd_bench_viewpoint,
}

# defaults for every setting a command reads; flags and config keys share these names
DEFAULTS = {
    "model": {"model_config": None},
    "gen": {"n": 100, "bank_source": "procedural", "bank_path": None, "bank": None, "gen": None},
    "fit": {"dataset": None, "index": None, "camera_kind": "d2s", "fit": None},
    "train": {"dataset": None, "val_dataset": None, "train": None},
    "eval": {"dataset": None, "weights": None, "fits": None, "joint_set": "body", "bucket": None,
             "gt_body": False},
    "bench-distance": {"distances": [2.0, 5.0, 30.0], "n": 10, "camera_kinds": ["weak", "d2s"], "fit": None,
                       "gen": None},
    "bench-viewpoint": {"n_viewpoints": 30, "n": 10, "distance": 2.0, "camera_kinds": ["weak", "d2s"],
                        "paired": True, "fit": None, "gen": None},
}
COMMON = {"seed": 0, "jobs": 1}
INPUT_KEYS = ("model", "dataset", "val_dataset", "weights", "fits", "bank_path")


# ---------------------------------------------------------------------------
# running and manifests
# ---------------------------------------------------------------------------

def default_out(command):
    return Path(os.environ.get(OUT_ENV, "stsmesh-out")) / command


def resolve(command, config_file=None, flags=None):
    """Merge defaults, a JSON config file and explicit flags (in that order)."""
    cfg = {**COMMON, **DEFAULTS[command]}
    cfg.setdefault("model", None)
    if config_file:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfigError(f"cannot read config file: {exc}") from exc
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise InvalidConfigError(f"unknown settings for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in (flags or {}).items():
        if v is not None:
            cfg[k] = v
    for k in INPUT_KEYS:
        if cfg.get(k):
            cfg[k] = str(Path(cfg[k]).resolve())
    if cfg["jobs"] < 1:
        raise InvalidConfigError("--jobs must be at least 1")
    return cfg


def run(command, cfg, out):
    """Execute ``command`` with resolved settings; write outputs and manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    outputs = COMMANDS[command](cfg, out)
    manifest = {
        "command": command,
        "config": cfg,
        "seeds": {"seed": cfg["seed"]},
        "version": __version__,
        "inputs": {k: str(cfg[k]) for k in INPUT_KEYS if cfg.get(k)},
        "outputs": [str(out / name) for name in outputs],
        "duration_s": time.perf_counter() - start,
    }
    write_atomic(out / MANIFEST, _json_text(manifest))
    return manifest


def rerun(manifest_path, out=None, jobs=None):
    """Repeat a run from its manifest, optionally into another directory."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
        command, cfg = manifest["command"], manifest["config"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InvalidConfigError(f"unreadable manifest: {exc}") from exc
    if command not in COMMANDS:
        raise InvalidConfigError(f"manifest names unknown command {command!r}")
    if jobs is not None:
        cfg["jobs"] = jobs
    return run(command, cfg, out or Path(manifest_path).parent)


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def build_parser():
    p = argparse.ArgumentParser(prog="stsmesh", description="Toy whole-body mesh recovery pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file of settings (overridden by flags)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name} or stsmesh-out/{name})")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int)
        if name != "model":
            sp.add_argument("--model", help="body model JSON (default: toy model with seed 0)")
        return sp

    add("model", "build and save the toy body model")
    sp = add("gen", "generate a synthetic dataset")
    sp.add_argument("--n", type=int)
    sp.add_argument("--bank-source", dest="bank_source", choices=["procedural", "file"])
    sp.add_argument("--bank-path", dest="bank_path")
    sp = add("fit", "fit the model to 2D keypoints of a dataset")
    sp.add_argument("--dataset", required=False)
    sp.add_argument("--index", type=int, help="fit a single sample")
    sp.add_argument("--camera-kind", dest="camera_kind", choices=["weak", "d2s", "perspective"])
    sp = add("train", "two-phase regressor training")
    sp.add_argument("--dataset")
    sp.add_argument("--val-dataset", dest="val_dataset")
    sp = add("eval", "evaluate regressor weights or fit results")
    sp.add_argument("--dataset")
    sp.add_argument("--weights")
    sp.add_argument("--fits")
    sp.add_argument("--joint-set", dest="joint_set", choices=["body", "hands", "all"])
    sp.add_argument("--bucket", choices=["distance", "viewpoint"])
    sp.add_argument("--gt-body", dest="gt_body", action="store_true", default=None)
    sp = add("bench-distance", "fit error per camera distance")
    sp.add_argument("--distances", type=_floats, help="comma-separated multiples of the body extent")
    sp.add_argument("--n", type=int, help="samples per distance")
    sp.add_argument("--camera-kinds", dest="camera_kinds", type=lambda s: s.split(","))
    sp = add("bench-viewpoint", "fit error per viewpoint")
    sp.add_argument("--n-viewpoints", dest="n_viewpoints", type=int)
    sp.add_argument("--n", type=int, help="samples per viewpoint")
    sp.add_argument("--distance", type=float)
    sp.add_argument("--unpaired", dest="paired", action="store_false", default=None,
                    help="draw fresh samples for every viewpoint")
    sp.add_argument("--camera-kinds", dest="camera_kinds", type=lambda s: s.split(","))

    sp = sub.add_parser("rerun", help="repeat a run from its manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "rerun":
            manifest = rerun(args.manifest, args.out, args.jobs)
        else:
            flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "verbose")}
            cfg = resolve(args.command, args.config, flags)
            manifest = run(args.command, cfg, args.out or default_out(args.command))
    except (StsError, OSError) as exc:
        err = exc.to_dict() if isinstance(exc, StsError) else {"error": "io", "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"command": manifest["command"], "outputs": manifest["outputs"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
