"""Batch front door: data generation, training, evaluation, analysis, sweeps.

Every command takes a JSON config (``--config``), an output directory
(``--out``) and optional dotted-key overrides (``--set key=value``). The
fully resolved config is written to ``<out>/config.json`` and can be fed
back to reproduce the run. Exit codes: 0 ok, 2 config error, 3 I/O error,
4 numerical failure. The ``INLOC_THREADS`` environment variable caps
data-generation parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, data, surrogate, training
from .errors import ConfigError, NumericalError
from .models import load_checkpoint, rebuild_networks

RUN_COMPLETE_NAME = "run_complete.json"

_BOX_SCHEMA = {
    "edge_length": float,
    "speed_of_sound": float,
    "freq_lo": float,
    "freq_step": float,
    "n_bins": int,
    "sensor_positions": list,
    "max_mode_order": int,
}
_SHIFT_SCHEMA = {
    "freq_perturb_sd": float,
    "damping_perturb_sd": float,
    "coupling_perturb_sd": float,
    "sensor_gain_sd": float,
    "noise_snr_db": (float, type(None)),
    "compression_exponent": float,
}
_MASK_SCHEMA = {"probability": float, "area_lo": float, "area_hi": float}

_TRAIN_KEYS = {
    "lambda_cyc": float,
    "lambda_identity": float,
    "lr_initial": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "batch_size": int,
    "epochs": int,
    "decay_start_epoch": int,
    "labeled_fraction": float,
    "seed": int,
    "width_mult": float,
    "n_res_blocks": int,
    "label_tap": str,
    "steps_per_epoch": (int, type(None)),
    "augment_mode": str,
    "mask": _MASK_SCHEMA,
    "decay_generator_lr": bool,
    "checkpoint_interval": int,
    "eval_interval": int,
}

SCHEMAS = {
    "gen-data": {
        "command": str,
        "domain": str,
        "spacing_mm": float,
        "zeta_base": float,
        "master_seed": int,
        "box": _BOX_SCHEMA,
        "shift": _SHIFT_SCHEMA,
    },
    "train": {
        "command": str,
        "model": str,
        "source_data": str,
        "target_data": (str, type(None)),
        "split_seed": (int, type(None)),
        "stratified": bool,
        "batch_size_baseline": int,
        **_TRAIN_KEYS,
    },
    "eval": {
        "command": str,
        "run_dir": str,
        "data": str,
        "subset": str,
        "split_file": (str, type(None)),
        "net": str,
    },
    "analyze": {
        "command": str,
        "run_dir": str,
        "max_tsne_samples": int,
        "seed": int,
    },
    "sweep": {
        "command": str,
        "model": str,
        "source_data": str,
        "target_data": (str, type(None)),
        "split_seed": (int, type(None)),
        "stratified": bool,
        "batch_size_baseline": int,
        "ratios": list,
        "seeds": list,
        **_TRAIN_KEYS,
    },
}

DEFAULTS = {
    "gen-data": {
        "domain": "source",
        "spacing_mm": None,  # resolved per domain: 50 source / 100 target
        "zeta_base": surrogate.DEFAULT_ZETA,
        "master_seed": surrogate.DEFAULT_MASTER_SEED,
        "box": {},
        "shift": {},
    },
    "train": {
        "model": "accyclegan",
        "target_data": None,
        "split_seed": None,
        "stratified": True,
        "batch_size_baseline": 32,
        **{k: getattr(training.TrainConfig(), k) for k in _TRAIN_KEYS if k != "mask"},
        "mask": {"probability": 0.5, "area_lo": 0.02, "area_hi": 0.10},
    },
    "eval": {"subset": "test", "split_file": None, "net": "auto"},
    "analyze": {"max_tsne_samples": 512, "seed": 0},
}
DEFAULTS["sweep"] = {
    **DEFAULTS["train"],
    "ratios": [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
    "seeds": [0],
}


def _check_keys(config: dict, schema: dict, prefix: str = "") -> None:
    for key, value in config.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be an object")
            _check_keys(value, expected, prefix=f"{path}.")
        elif expected is float:
            if value is not None and not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {path} must be a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"config key {path} must be an integer")
        elif expected is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"config key {path} must be a boolean")
        elif expected is str:
            if not isinstance(value, str):
                raise ConfigError(f"config key {path} must be a string")
        elif expected is list:
            if not isinstance(value, list):
                raise ConfigError(f"config key {path} must be a list")
        elif isinstance(expected, tuple):
            if value is not None and not isinstance(value, expected):
                raise ConfigError(f"config key {path} has the wrong type")


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_override(config: dict, dotted: str, raw_value: str) -> None:
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override non-object key: {dotted}")
    node[keys[-1]] = value


def load_config(path, command: str, overrides) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    for dotted, raw in overrides or []:
        _apply_override(user, dotted, raw)
    if user.get("command", command) != command:
        raise ConfigError(f"config is for command {user['command']!r}, not {command!r}")
    _check_keys(user, SCHEMAS[command])
    resolved = _merge(DEFAULTS[command], user)
    resolved["command"] = command
    return resolved


def _write_resolved(out_dir: Path, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _refuse_completed(out_dir: Path, marker: str) -> None:
    if (out_dir / marker).exists():
        raise FileExistsError(
            f"output directory {out_dir} already holds a completed run ({marker}); refusing to overwrite"
        )


def _mark_complete(out_dir: Path, payload: dict) -> None:
    with open(out_dir / RUN_COMPLETE_NAME, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(config: dict, out_dir: Path) -> None:
    domain = config["domain"]
    if domain not in ("source", "target"):
        raise ConfigError(f"domain must be 'source' or 'target', got {domain!r}")
    _refuse_completed(out_dir, data.MANIFEST_NAME)
    if config["spacing_mm"] is None:
        config["spacing_mm"] = 50.0 if domain == "source" else 100.0
    box = surrogate.BoxConfig.from_dict(_merge(surrogate.BoxConfig().to_dict(), config["box"]))
    base = (
        surrogate.DomainShiftConfig.source_defaults(config["master_seed"])
        if domain == "source"
        else surrogate.DomainShiftConfig.target_defaults(config["master_seed"])
    )
    shift = surrogate.DomainShiftConfig.from_dict(_merge(base.to_dict(), config["shift"]))
    shift.validate()
    modes = surrogate.cavity_mode_table(box, config["zeta_base"])
    grid = surrogate.make_source_grid(config["spacing_mm"], box)
    bundle = surrogate.generate_dataset(grid, box, modes, shift)
    data.save_bundle(bundle, out_dir)
    _write_resolved(out_dir, config)
    print(f"gen-data: wrote {len(bundle)} {domain} samples to {out_dir}")


def _train_config_from(config: dict) -> training.TrainConfig:
    kwargs = {k: config[k] for k in _TRAIN_KEYS if k != "mask"}
    kwargs["mask"] = data.MaskParams(**config["mask"])
    cfg = training.TrainConfig(**kwargs)
    cfg.validate()
    return cfg


def run_train_pipeline(config: dict, out_dir: Path, verbose: bool = False) -> dict:
    """Shared by ``train`` and each sweep cell: split, normalize, train, log."""
    _refuse_completed(out_dir, RUN_COMPLETE_NAME)
    src_path = Path(config["source_data"])
    source_raw = data.load_bundle(src_path)
    _write_resolved(out_dir, config)

    if config["model"] == "baseline":
        split_seed = config["split_seed"] if config["split_seed"] is not None else config["seed"]
        spec = data.SplitSpec(config["labeled_fraction"], seed=split_seed, stratified=config["stratified"])
        train_idx, test_idx = data.split_indices(source_raw, spec)
        data.save_split(out_dir / "split.json", train_idx, test_idx, spec)
        train_raw = source_raw.subset(train_idx)
        lo, hi = data.compute_normalization(train_raw)
        train_b = data.normalize_bundle(train_raw, lo, hi)
        test_b = data.normalize_bundle(source_raw.subset(test_idx), lo, hi)
        cfg = training.BaselineConfig(
            epochs=config["epochs"],
            batch_size=config["batch_size_baseline"],
            lr=config["lr_initial"],
            seed=config["seed"],
            width_mult=config["width_mult"],
        )
        net, rows = training.train_baseline(train_b, cfg, test_bundle=test_b, out_dir=out_dir, verbose=verbose)
        final = rows[-1]
        _mark_complete(out_dir, {"model": "baseline", "final_acc_train": final["acc_train"], "final_acc_test": final["acc_test"]})
        return {"net": net, "rows": rows}

    if config["model"] != "accyclegan":
        raise ConfigError(f"model must be 'accyclegan' or 'baseline', got {config['model']!r}")
    if not config["target_data"]:
        raise ConfigError("accyclegan training needs target_data")
    target_raw = data.load_bundle(Path(config["target_data"]))
    cfg = _train_config_from(config)
    split_seed = config["split_seed"] if config["split_seed"] is not None else cfg.seed
    spec = data.SplitSpec(cfg.labeled_fraction, seed=split_seed, stratified=config["stratified"])
    train_idx, test_idx = data.split_indices(target_raw, spec)
    data.save_split(out_dir / "split.json", train_idx, test_idx, spec)
    src_lo, src_hi = data.compute_normalization(source_raw)
    source = data.normalize_bundle(source_raw, src_lo, src_hi)
    tgt_train_raw = target_raw.subset(train_idx)
    tgt_lo, tgt_hi = data.compute_normalization(tgt_train_raw)
    tgt_train = data.normalize_bundle(tgt_train_raw, tgt_lo, tgt_hi)
    tgt_test = data.normalize_bundle(target_raw.subset(test_idx), tgt_lo, tgt_hi)
    nets, runlog = training.train(
        source, tgt_train, cfg, target_test=tgt_test, out_dir=out_dir, verbose=verbose
    )
    acc = training.label_accuracy(nets["d_t"], tgt_test.images(), tgt_test.label_indices())
    _mark_complete(
        out_dir,
        {"model": "accyclegan", "wall_clock_s": runlog.wall_clock_s, "acc_target_test": acc},
    )
    return {"nets": nets, "runlog": runlog, "acc_target_test": acc}


def cmd_train(config: dict, out_dir: Path, verbose: bool = False) -> None:
    result = run_train_pipeline(config, out_dir, verbose=verbose)
    if "acc_target_test" in result:
        print(f"train: target-test accuracy {result['acc_target_test']:.4f} -> {out_dir}")
    else:
        print(f"train: baseline final test accuracy {result['rows'][-1]['acc_test']:.4f} -> {out_dir}")


def cmd_eval(config: dict, out_dir: Path) -> None:
    run_dir = Path(config["run_dir"])
    bundle_raw = data.load_bundle(Path(config["data"]))
    subset = config["subset"]
    if subset not in ("all", "train", "test"):
        raise ConfigError(f"subset must be all/train/test, got {subset!r}")
    if subset == "all":
        lo, hi = data.compute_normalization(bundle_raw)
        part = data.normalize_bundle(bundle_raw, lo, hi)
    else:
        split_file = Path(config["split_file"]) if config["split_file"] else run_dir / "split.json"
        train_idx, test_idx, _ = data.load_split(split_file)
        train_raw = bundle_raw.subset(train_idx)
        lo, hi = data.compute_normalization(train_raw)
        chosen = train_idx if subset == "train" else test_idx
        part = data.normalize_bundle(bundle_raw.subset(chosen), lo, hi)

    ckpt = load_checkpoint(analysis.latest_checkpoint(run_dir))
    nets = rebuild_networks(ckpt)
    net_key = config["net"]
    if net_key == "auto":
        net_key = "d_t" if ckpt["kind"] == "accyclegan" else "net"
    if net_key not in nets:
        raise ConfigError(f"net must be one of {sorted(nets)}, got {net_key!r}")
    report = analysis.evaluate_classifier(nets[net_key], part)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / analysis.EVAL_REPORT_NAME)
    _write_resolved(out_dir, config)
    print(
        f"eval: {net_key} on {subset} of {config['data']}: "
        f"accuracy {analysis.accuracy(int(report.confusion.trace()), int(report.confusion.sum())):.2f}% -> {out_dir}"
    )


def cmd_analyze(config: dict, out_dir: Path) -> None:
    result = analysis.analyze_run(
        config["run_dir"],
        out_dir=out_dir,
        seed=config["seed"],
        max_tsne_samples=config["max_tsne_samples"],
    )
    _write_resolved(out_dir, config)
    print(f"analyze: wrote reports for {result['n_attention_records']} samples -> {out_dir}")


def cmd_sweep(config: dict, out_dir: Path, verbose: bool = False) -> None:
    import csv as _csv

    _refuse_completed(out_dir, "sweep.csv")
    ratios = [float(r) for r in config["ratios"]]
    seeds = [int(s) for s in config["seeds"]]
    for r in ratios:
        if not 0.0 < r < 1.0:
            raise ConfigError(f"sweep ratio {r} outside (0, 1)")
    _write_resolved(out_dir, config)
    rows = []
    for ratio in ratios:
        for seed in seeds:
            cell = dict(config)
            cell["command"] = "train"
            cell.pop("ratios", None)
            cell.pop("seeds", None)
            cell["labeled_fraction"] = ratio
            cell["seed"] = seed
            cell_dir = out_dir / f"ratio_{ratio:.2f}_seed_{seed}"
            result = run_train_pipeline(cell, cell_dir, verbose=verbose)
            acc = result.get("acc_target_test", result.get("rows", [{}])[-1].get("acc_test"))
            rows.append({"ratio": ratio, "seed": seed, "acc_target_test": float(acc)})
            print(f"sweep: ratio={ratio:.2f} seed={seed} acc={acc:.4f}")
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["ratio", "seed", "acc_target_test"])
        for row in rows:
            writer.writerow([row["ratio"], row["seed"], format(row["acc_target_test"], ".8e")])
    print(f"sweep: wrote {len(rows)} rows -> {out_dir / 'sweep.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "analyze", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted-key config override (repeatable)",
        )
        p.add_argument("--width-mult", type=float, default=None, help="override width_mult")
        p.add_argument("--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--ratios", default=None, help="comma-separated labeled fractions")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = []
    for item in args.set:
        if "=" not in item:
            print(f"inloc: bad --set argument (need KEY=VALUE): {item}", file=sys.stderr)
            return 2
        key, _, value = item.partition("=")
        overrides.append((key, value))
    try:
        config = load_config(args.config, args.command, overrides)
        if args.seed is not None:
            for key in ("master_seed", "seed"):
                if key in SCHEMAS[args.command]:
                    config[key] = args.seed
        if args.width_mult is not None and "width_mult" in SCHEMAS[args.command]:
            config["width_mult"] = args.width_mult
        if args.command == "sweep" and getattr(args, "ratios", None):
            config["ratios"] = [float(v) for v in args.ratios.split(",")]
        out_dir = Path(args.out)
        if args.command == "gen-data":
            cmd_gen_data(config, out_dir)
        elif args.command == "train":
            cmd_train(config, out_dir, verbose=args.verbose)
        elif args.command == "eval":
            cmd_eval(config, out_dir)
        elif args.command == "analyze":
            cmd_analyze(config, out_dir)
        elif args.command == "sweep":
            cmd_sweep(config, out_dir, verbose=args.verbose)
        return 0
    except ConfigError as exc:
        print(f"inloc: config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"inloc: numerical failure: {exc}", file=sys.stderr)
        return 4
    except (OSError, FileExistsError, FileNotFoundError) as exc:
        print(f"inloc: i/o error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"inloc: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
