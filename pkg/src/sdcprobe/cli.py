"""Command-line entry point: train, attribute, campaign, fat, report.

Config values resolve as flags > config file > defaults, every run writes
enough sidecar metadata to be rerun exactly, and all file outputs land
atomically (temp + rename).  Errors exit with a one-line reason: code 2
for config/usage problems, 3 for data-format problems, 4 for runtime
failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import attribution as attr_mod
from . import campaign as campaign_mod
from . import fat as fat_mod
from .data import load_idx, synth_blobs, train_test_split
from .errors import (ConfigError, DataFormatError, DataIntegrityError, SdcProbeError,
                     UsageError)
from .fault_model import parse_code, save_fault_csv
from .nnet import build_cnn, build_mlp, load_checkpoint, model_checksum, save_checkpoint, train

SCHEMA_VERSION = 1

_TOP_KEYS = {"schema_version", "model", "dataset", "train", "attribute", "campaign", "fat"}
_MODEL_KEYS = {"kind", "input_shape", "hidden", "classes", "seed", "conv_channels", "kernel"}
_DATASET_KEYS = {"kind", "classes", "samples_per_class", "dims", "spread", "seed",
                 "center_scale", "image_shape", "test_fraction",
                 "train_images", "train_labels", "test_images", "test_labels"}
_TRAIN_KEYS = {"epochs", "batch_size", "lr", "optimizer", "seed"}
_ATTRIBUTE_KEYS = {"target_kind", "steps", "sample_count", "baseline", "seed"}
_CAMPAIGN_KEYS = {"code", "thresholds", "sample_budget", "seeds", "uniform_mix",
                  "workers", "exhaustive"}
_FAT_KEYS = {"code", "adversary_code", "warmup_epochs", "fat_epochs", "faults_per_round",
             "consecutive_criticals_required", "thresholds", "simulations_per_epoch",
             "latency_threshold", "lr", "batch_size", "optimizer", "seed",
             "uniform_mix", "attribution_steps", "attribution_sample_count"}


def _check_keys(section, allowed, context):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown {context} config keys: {', '.join(unknown)}")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    _check_keys(cfg, _TOP_KEYS, "top-level")
    if cfg.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {cfg['schema_version']} unsupported "
                          f"(expected {SCHEMA_VERSION})")
    return cfg


def build_model_from_config(mcfg):
    _check_keys(mcfg, _MODEL_KEYS, "model")
    kind = mcfg.get("kind", "mlp")
    input_shape = tuple(mcfg.get("input_shape", (1, 1, 6)))
    classes = int(mcfg.get("classes", 3))
    seed = int(mcfg.get("seed", 0))
    if kind == "mlp":
        return build_mlp(input_shape, list(mcfg.get("hidden", [16])), classes, seed=seed)
    if kind == "cnn":
        hidden = mcfg.get("hidden", 32)
        if isinstance(hidden, list):  # the cnn head takes one hidden width
            if len(hidden) != 1:
                raise ConfigError(f"cnn hidden must be a single width, got {hidden}")
            hidden = hidden[0]
        return build_cnn(input_shape, list(mcfg.get("conv_channels", [4, 8])),
                         int(mcfg.get("kernel", 3)), int(hidden), classes, seed=seed)
    raise ConfigError(f"unknown model kind {kind!r}; expected 'mlp' or 'cnn'")


def build_datasets_from_config(dcfg):
    """(train_set, test_set) from the dataset section; either may be None
    for idx configs that name only one split."""
    _check_keys(dcfg, _DATASET_KEYS, "dataset")
    kind = dcfg.get("kind", "blobs")
    if kind == "blobs":
        data = synth_blobs(classes=int(dcfg.get("classes", 3)),
                           samples_per_class=int(dcfg.get("samples_per_class", 100)),
                           dims=int(dcfg.get("dims", 6)),
                           spread=float(dcfg.get("spread", 0.25)),
                           seed=int(dcfg.get("seed", 0)),
                           image_shape=(tuple(dcfg["image_shape"])
                                        if "image_shape" in dcfg else None),
                           center_scale=float(dcfg.get("center_scale", 1.0)))
        return train_test_split(data, test_fraction=float(dcfg.get("test_fraction", 0.1)))
    if kind == "idx":
        train_set = test_set = None
        if "train_images" in dcfg or "train_labels" in dcfg:
            train_set = load_idx(dcfg["train_images"], dcfg["train_labels"], split="train")
        if "test_images" in dcfg or "test_labels" in dcfg:
            test_set = load_idx(dcfg["test_images"], dcfg["test_labels"], split="test")
        if train_set is None and test_set is None:
            raise ConfigError("idx dataset config names no files")
        return train_set, test_set
    raise ConfigError(f"unknown dataset kind {kind!r}; expected 'blobs' or 'idx'")


def _need(dataset, which):
    if dataset is None:
        raise ConfigError(f"this command needs a {which} split in the dataset config")
    return dataset


def _resolve(flag, file_value, default):
    if flag is not None:
        return flag
    if file_value is not None:
        return file_value
    return default


def _single_seed(args, file_value, default):
    seeds = getattr(args, "seed", None)
    if seeds:
        return int(seeds[-1])
    return int(_resolve(None, file_value, default))


def _write_meta(out_path, command, payload):
    meta = {"artifact_version": campaign_mod.ARTIFACT_VERSION,
            "command": command, **payload}
    campaign_mod.write_meta_sidecar(out_path, meta)


def _parse_thresholds(text):
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --thresholds value {text!r}: {exc}") from exc
    return values


def cmd_train(args):
    cfg = load_config(args.config)
    tcfg = cfg.get("train", {})
    _check_keys(tcfg, _TRAIN_KEYS, "train")
    model = build_model_from_config(cfg.get("model", {}))
    train_set, test_set = build_datasets_from_config(cfg.get("dataset", {}))
    seed = _single_seed(args, tcfg.get("seed"), 0)
    params = {"epochs": int(_resolve(None, tcfg.get("epochs"), 10)),
              "batch_size": int(_resolve(None, tcfg.get("batch_size"), 32)),
              "lr": float(_resolve(None, tcfg.get("lr"), 0.01)),
              "optimizer": _resolve(None, tcfg.get("optimizer"), "adam"),
              "seed": seed}
    log = train(model, _need(train_set, "train"), eval_set=test_set, **params)
    save_checkpoint(model, args.out)
    _write_meta(args.out, "train", {
        "config": {"model": cfg.get("model", {}), "dataset": cfg.get("dataset", {}),
                   "train": params},
        "model_checksum": model_checksum(model),
        "accuracy_log": log})
    final = log[-1] if log else None
    print(f"trained {params['epochs']} epochs; final accuracy "
          f"{final if final is not None else 'n/a'}; checkpoint {args.out}")
    return 0


def cmd_attribute(args):
    cfg = load_config(args.config)
    acfg = cfg.get("attribute", {})
    _check_keys(acfg, _ATTRIBUTE_KEYS, "attribute")
    model = load_checkpoint(args.checkpoint)
    train_set, test_set = build_datasets_from_config(cfg.get("dataset", {}))
    dataset = _need(test_set if test_set is not None else train_set, "test")
    target = _resolve(args.target, acfg.get("target_kind"), "neuron_weight")
    config = attr_mod.AttributionConfig(
        target_kind=target,
        steps=int(_resolve(args.steps, acfg.get("steps"), 32)),
        sample_count=_resolve(args.samples, acfg.get("sample_count"), None),
        baseline=_resolve(args.baseline, acfg.get("baseline"), "zeros"),
        seed=_single_seed(args, acfg.get("seed"), 0))
    amap = attr_mod.attribute_all(model, dataset, config)
    attr_mod.save_attribution(amap, args.out)
    _write_meta(args.out, "attribute", {
        "config": {"target_kind": config.target_kind, "steps": config.steps,
                   "sample_count": config.sample_count, "baseline": config.baseline,
                   "seed": config.seed},
        "checkpoint": args.checkpoint,
        "model_checksum": amap.model_checksum})
    print(f"attributed {len(amap.scores)} layers ({target}); wrote {args.out}")
    return 0


def cmd_campaign(args):
    cfg = load_config(args.config)
    ccfg = cfg.get("campaign", {})
    _check_keys(ccfg, _CAMPAIGN_KEYS, "campaign")
    model = load_checkpoint(args.checkpoint)
    train_set, test_set = build_datasets_from_config(cfg.get("dataset", {}))
    dataset = _need(test_set if test_set is not None else train_set, "test")
    code = parse_code(_resolve(args.code, ccfg.get("code"), "RBRNw"))
    seeds = args.seed if args.seed else ccfg.get("seeds", campaign_mod.DEFAULT_SEEDS)
    thresholds = (_parse_thresholds(args.thresholds) if args.thresholds is not None
                  else tuple(ccfg.get("thresholds", campaign_mod.DEFAULT_THRESHOLDS)))
    config = campaign_mod.CampaignConfig(
        code=code, thresholds=thresholds,
        sample_budget=int(_resolve(args.budget, ccfg.get("sample_budget"),
                                   campaign_mod.DEFAULT_BUDGET)),
        seeds=tuple(seeds),
        uniform_mix=float(_resolve(args.mix, ccfg.get("uniform_mix"), 0.0)),
        workers=int(_resolve(args.workers, ccfg.get("workers"), 1)),
        exhaustive=bool(ccfg.get("exhaustive", False)))
    attributions = None
    if code.needs_attributions and not config.exhaustive:
        if args.attribution is None:
            raise ConfigError(f"code {code} requires --attribution")
        attributions = attr_mod.load_attribution(args.attribution)
    probe = dataset.images[:fat_mod.EVAL_BATCH]
    result = campaign_mod.run_campaign(model, dataset, config, attributions,
                                       out_csv=args.out, probe_images=probe)
    stats = result.stats
    shown = [f"{t:.2f}:{p if p is None else round(p, 4)}"
             for t, p in zip(config.thresholds, stats.precision)][:4]
    print(f"campaign {code}: {len(result.records)} records, baseline "
          f"{result.baseline_accuracy}, precision {' '.join(shown)} ...; wrote {args.out}")
    return 0


def cmd_fat(args):
    cfg = load_config(args.config)
    fcfg = dict(cfg.get("fat", {}))
    _check_keys(fcfg, _FAT_KEYS, "fat")
    if args.code is not None:
        fcfg["code"] = args.code
    if args.mix is not None:
        fcfg["uniform_mix"] = float(args.mix)
    if args.seed:
        fcfg["seed"] = int(args.seed[-1])
    if args.thresholds is not None:
        fcfg["thresholds"] = _parse_thresholds(args.thresholds)
    config = fat_mod.FatConfig(**fcfg)
    model = build_model_from_config(cfg.get("model", {}))
    train_set, test_set = build_datasets_from_config(cfg.get("dataset", {}))
    model, report = fat_mod.fat_train(model, _need(train_set, "train"),
                                      _need(test_set, "test"), config)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "fat_model.ckpt")
    report_path = os.path.join(args.out_dir, "fat_report.json")
    save_checkpoint(model, ckpt)
    fat_mod.save_fat_report(report, report_path)
    save_fault_csv(report.trained_fault_sites,
                   os.path.join(args.out_dir, "trained_faults.csv"))
    save_fault_csv(report.adversary_fault_sites,
                   os.path.join(args.out_dir, "adversary_faults.csv"))
    _write_meta(report_path, "fat", {
        "config": {"model": cfg.get("model", {}), "dataset": cfg.get("dataset", {}),
                   "fat": config.to_json_dict()},
        "model_checksum": model_checksum(model)})
    print(f"fat: baseline {report.baseline_accuracy} post-fat {report.post_fat_accuracy} "
          f"under-trained-faults {report.accuracy_under_trained_faults}; "
          f"outputs in {args.out_dir}")
    return 0


def cmd_report(args):
    all_records = []
    thresholds = None
    for path in args.records:
        records, t = campaign_mod.load_records(path)
        if thresholds is None:
            thresholds = t
        elif t != thresholds:
            raise UsageError(f"{path}: threshold columns differ from {args.records[0]}; "
                             "refusing to mix")
        all_records.extend(records)
    if thresholds is None:
        raise UsageError("no records files given")
    summary = campaign_mod.report(all_records, thresholds,
                                  series_threshold=float(args.series_threshold))
    prec_path, series_path = campaign_mod.write_report_csvs(summary, args.out)
    _write_meta(prec_path, "report", {
        "config": {"records": list(args.records),
                   "series_threshold": float(args.series_threshold)}})
    for code, t, mean, std, n in summary.rows:
        if t == float(args.series_threshold):
            mean_s = "null" if mean is None else f"{mean:.4f}"
            std_s = "null" if std is None else f"{std:.4f}"
            print(f"{code} precision@{t:.2f}: mean {mean_s} stddev {std_s} over {n} seeds")
    print(f"wrote {prec_path} and {series_path}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="sdcprobe",
        description="Bit-flip fault injection campaigns on small neural networks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, seeds=True, workers=False):
        p.add_argument("--config", default=None, help="JSON config file")
        if seeds:
            p.add_argument("--seed", action="append", type=int, default=None,
                           help="seed (repeatable where seed lists apply)")
        if workers:
            p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", help="compute attribution scores for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", choices=list(attr_mod.TARGET_KINDS), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--baseline", choices=["zeros", "dataset_mean"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("campaign", help="run a fault-injection campaign")
    common(p, workers=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attribution", default=None)
    p.add_argument("--code", default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--thresholds", default=None, help="comma-separated values")
    p.add_argument("--mix", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("fat", help="fault-aware training")
    common(p)
    p.add_argument("--code", default=None)
    p.add_argument("--thresholds", default=None)
    p.add_argument("--mix", type=float, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fat)

    p = sub.add_parser("report", help="summarize campaign records")
    p.add_argument("records", nargs="+", help="records CSV files")
    p.add_argument("--series-threshold", default="0.05")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(category, exc):
    reason = " ".join(str(exc).split())  # one line, machine-parsable
    print(f"error: {category}: {reason}", file=sys.stderr)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        _fail("config", exc)
        return 2
    except (DataFormatError, DataIntegrityError) as exc:
        _fail("data", exc)
        return 3
    except SdcProbeError as exc:
        _fail("runtime", exc)
        return 4
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _fail("runtime", f"{exc.__class__.__name__}: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
