"""Command-line pipeline: gen-data, train-baseline, scale-select, finalize, evaluate, cam, report.

Every command works on a run directory::

    run/
      manifest.json            resolved config and the command list
      data/dataset.npz
      checkpoints/*.cssm
      reports/*.csv
      heatmaps/*.pgm, *_overlay.ppm

Failures print one JSON object on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import netgraph as ng
from .config import derive_seed, load_run_config, read_config_file
from .data import generate_planted_dataset, import_dataset, load_dataset, save_dataset
from .errors import ChanscaleError, ConfigError, DataError
from .explain import grad_cam, save_heatmap
from .metrics import channels_per_layer_report, pr_curve, roc_curve, write_channels_csv, write_curve_csv
from .scale_select import finalize, load_records, scale_select_run
from .serialize import load_model, save_model
from .trainer import evaluate_split, train, write_history_csv

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# manifest


def read_manifest(run_dir):
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise DataError(f"{run_dir} has no {MANIFEST}; run gen-data first")
    return json.loads(path.read_text())


def _write_manifest(run_dir, manifest):
    path = Path(run_dir) / MANIFEST
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _record(run_dir, name, cfg, options):
    path = Path(run_dir) / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else \
        {"version": MANIFEST_VERSION, "package_version": __version__, "commands": []}
    manifest["config"] = cfg.to_dict()
    manifest["commands"].append({"command": name, "options": options, "config": cfg.to_dict()})
    _write_manifest(run_dir, manifest)


def _resolve_config(run_dir, args, fresh):
    values = {}
    if not fresh:
        values = read_manifest(run_dir)["config"]
    if getattr(args, "config", None):
        values = _merge(values, read_config_file(args.config))
    return load_run_config(values, args.set or (), getattr(args, "seed", None))


def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# ---------------------------------------------------------------------------
# commands; each takes (run_dir, cfg, options) and returns a summary dict


def _model_path(run_dir, name):
    path = Path(name)
    if path.suffix == ".cssm" or path.exists():
        return path
    return Path(run_dir) / "checkpoints" / f"{name}.cssm"


def _load(run_dir, name):
    path = _model_path(run_dir, name)
    if not path.exists():
        raise DataError(f"model {path} not found")
    return load_model(path)


def cmd_gen_data(run_dir, cfg, options):
    run_dir = Path(run_dir)
    if cfg.data.import_path:
        data = import_dataset(cfg.data.import_path, cfg.data.split_fractions, seed=cfg.seed,
                              size=cfg.data.image_size or None, channels=cfg.data.channels or None)
        shape = data.image_shape
        seed = derive_seed(cfg.seed, "init")
        if cfg.data.weights:
            model = ng.load_pretrained_npz(cfg.data.weights, cfg.synthetic.plan, shape, seed=seed)
        else:
            model = ng.build_vgg16_like(cfg.synthetic.plan, shape, seed=seed)
        informative = None
    else:
        data, model, informative = generate_planted_dataset(cfg.synthetic, seed=derive_seed(cfg.seed, "synthetic"))
    save_dataset(run_dir / "data" / "dataset.npz", data)
    save_model(model, run_dir / "checkpoints" / "backbone.cssm")
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    if informative is not None:
        (reports / "ground_truth.json").write_text(
            json.dumps({"informative": [list(k) for k in informative]}, sort_keys=True) + "\n")
    return {"samples": len(data), "channels": list(ng.count_channels(model))}


def cmd_train_baseline(run_dir, cfg, options):
    run_dir = Path(run_dir)
    data = load_dataset(run_dir / "data" / "dataset.npz")
    model = _load(run_dir, "backbone")
    trained, history = train(model, data, cfg.baseline)
    save_model(trained, run_dir / "checkpoints" / "baseline.cssm")
    write_history_csv(run_dir / "reports" / "baseline_history.csv", history)
    auc, ap = evaluate_split(trained, data, "validation")
    return {"val_auc_roc": auc, "val_auc_pr": ap}


def cmd_scale_select(run_dir, cfg, options):
    run_dir = Path(run_dir)
    data = load_dataset(run_dir / "data" / "dataset.npz")
    start = "baseline" if _model_path(run_dir, "baseline").exists() else "backbone"
    model = _load(run_dir, start)
    if not options.get("resume"):
        _clear_iterations(run_dir)
    result = scale_select_run(model, data, cfg.select_config(), out_dir=run_dir,
                              resume=bool(options.get("resume")))
    last = result.records[-1]
    return {"iterations": len(result.records), "channels": list(last.channels_after),
            "val_auc_roc": last.auc_roc}


def _clear_iterations(run_dir):
    # a fresh run must not inherit iteration files from an earlier, longer one
    dirs = [run_dir / "checkpoints"] + [run_dir / "reports" / d
                                        for d in ("histograms", "history", "keepsets", "records")]
    for d in dirs:
        for path in d.glob("iter_*"):
            path.unlink()


def cmd_finalize(run_dir, cfg, options):
    run_dir = Path(run_dir)
    records = load_records(run_dir)
    if not records:
        raise DataError(f"{run_dir} has no scale-select iterations; run scale-select first")
    data = load_dataset(run_dir / "data" / "dataset.npz")
    scaled = _load(run_dir, f"iter_{records[-1].iteration:03d}_scaled")
    final, history = finalize(scaled, data, cfg.select_config())
    save_model(final, run_dir / "checkpoints" / "final.cssm")
    write_history_csv(run_dir / "reports" / "final_history.csv", history)
    auc, ap = evaluate_split(final, data, "validation")
    return {"val_auc_roc": auc, "val_auc_pr": ap, "parameters": ng.count_parameters(final)["total"]}


def cmd_evaluate(run_dir, cfg, options):
    run_dir = Path(run_dir)
    name, split = options["model"], options["split"]
    model = _load(run_dir, name)
    data = load_dataset(run_dir / "data" / "dataset.npz")
    x, y = data.split(split)
    if len(y) == 0:
        raise DataError(f"split {split!r} is empty")
    scores = ng.predict_proba(model, x)
    out = run_dir / "reports" / "eval"
    tag = f"{Path(name).stem}_{split}"
    auc, ap = evaluate_split(model, data, split)
    counts = ng.count_parameters(model)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{tag}_metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "split", "samples", "positives", "auc_roc", "auc_pr",
                    "total_params", "channels"])
        w.writerow([Path(name).stem, split, len(y), int(y.sum()), repr(float(auc)), repr(float(ap)),
                    counts["total"], sum(ng.count_channels(model))])
    if 0 < y.sum() < len(y):
        write_curve_csv(out / f"{tag}_roc.csv", roc_curve(scores, y), ["threshold", "tpr", "fpr"])
        write_curve_csv(out / f"{tag}_pr.csv", pr_curve(scores, y), ["threshold", "precision", "recall"])
    return {"auc_roc": auc, "auc_pr": ap}


def cmd_cam(run_dir, cfg, options):
    run_dir = Path(run_dir)
    name, split, count = options["model"], options["split"], options["count"]
    model = _load(run_dir, name)
    data = load_dataset(run_dir / "data" / "dataset.npz")
    idx = data.indices(split)[:count]
    out = run_dir / "heatmaps"
    rows = []
    for i in idx:
        image = data.images[i]
        heat = grad_cam(model, image)
        stem = out / f"{Path(name).stem}_{split}_{int(i):05d}"
        save_heatmap(heat, stem, image)
        score = float(ng.predict_proba(model, image))
        rows.append([int(i), int(data.labels[i]), repr(score), stem.name + ".pgm"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{Path(name).stem}_{split}_index.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample", "label", "score", "heatmap"])
        w.writerows(rows)
    return {"heatmaps": len(rows)}


def cmd_report(run_dir, cfg, options):
    """Channels kept per layer (original backbone vs the final or last pruned model)."""
    run_dir = Path(run_dir)
    before = _load(run_dir, "backbone")
    records = load_records(run_dir)
    if _model_path(run_dir, "final").exists():
        after_name = "final"
    elif records:
        after_name = f"iter_{records[-1].iteration:03d}"
    else:
        raise DataError(f"{run_dir} has no pruned model; run scale-select first")
    after = _load(run_dir, after_name)
    report = channels_per_layer_report(before, after)
    write_channels_csv(run_dir / "reports" / "channels_per_layer.csv", report)
    summary = {
        "compared": ["backbone", after_name],
        "iterations": len(records),
        "channels_before": sum(ng.count_channels(before)),
        "channels_after": sum(ng.count_channels(after)),
        "parameters_before": ng.count_parameters(before)["total"],
        "parameters_after": ng.count_parameters(after)["total"],
    }
    (run_dir / "reports" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-baseline": cmd_train_baseline,
    "scale-select": cmd_scale_select,
    "finalize": cmd_finalize,
    "evaluate": cmd_evaluate,
    "cam": cmd_cam,
    "report": cmd_report,
}


def replay(manifest_path, run_dir):
    """Re-execute every recorded command of a manifest into a new run directory."""
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {manifest.get('version')!r}", "version")
    results = []
    for entry in manifest["commands"]:
        name = entry["command"]
        if name not in COMMANDS:
            raise ConfigError(f"unknown command {name!r} in manifest", "commands")
        cfg = load_run_config(entry["config"])
        results.append(COMMANDS[name](run_dir, cfg, entry["options"]))
        _record(run_dir, name, cfg, entry["options"])
    return results


# ---------------------------------------------------------------------------
# argument parsing


def _parser():
    p = argparse.ArgumentParser(prog="chanscale", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--run", required=True, help="run directory")
        sp.add_argument("--config", help="TOML or JSON config file")
        sp.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one config field (repeatable)")
        sp.add_argument("--seed", type=int, help="run seed; all randomness derives from it")
        return sp

    common(sub.add_parser("gen-data", help="generate (or import) the dataset and backbone"))
    common(sub.add_parser("train-baseline", help="train the dense head on the frozen backbone"))
    ss = common(sub.add_parser("scale-select", help="iterative scale-and-select pruning"))
    ss.add_argument("--resume", action="store_true", help="continue from the last finished iteration")
    common(sub.add_parser("finalize", help="fold scaling weights and retrain the head"))
    for name, helptext in (("evaluate", "ROC/PR metrics and curves"), ("cam", "Grad-CAM heatmaps")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--model", default="final", help="checkpoint name or .cssm path")
        sp.add_argument("--split", default="test", choices=("train", "validation", "test"))
        if name == "cam":
            sp.add_argument("--count", type=int, default=8, help="number of samples")
    common(sub.add_parser("report", help="channels-per-layer report"))
    rp = sub.add_parser("replay", help="re-run a manifest into a new run directory")
    rp.add_argument("manifest")
    rp.add_argument("--run", required=True)
    return p


def _options(args):
    skip = {"command", "run", "config", "set", "seed"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj).__name__)


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if args.command == "replay":
                result = replay(args.manifest, args.run)
            else:
                fresh = args.command == "gen-data"
                cfg = _resolve_config(args.run, args, fresh)
                options = _options(args)
                result = COMMANDS[args.command](args.run, cfg, options)
                _record(args.run, args.command, cfg, options)
        for w in caught:
            print(json.dumps({"warning": str(w.message)}), file=sys.stderr)
    except (ChanscaleError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(getattr(exc, "detail", exc))}
        if isinstance(exc, ConfigError) and exc.field:
            err["field"] = exc.field
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    print(json.dumps({"command": args.command, "result": result}, default=_json_default, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
