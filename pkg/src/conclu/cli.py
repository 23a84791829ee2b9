"""Operator surface: data generation, pretraining, probing, segmentation, export.

Driven by a JSON config plus flags (flags win). Unknown config keys are
rejected by name. Exit codes: 0 success, 1 runtime failure, 2 usage/config
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import evaluate, trainer
from .errors import (
    CheckpointFormatError,
    ConCluError,
    ConfigError,
    EmptyInputError,
    ParseError,
)
from .geometry import (
    SHAPE_KINDS,
    AugmentConfig,
    generate_shape,
    load_xyz,
    normalize_cloud,
    save_xyz,
)
from .network import NetworkConfig
from .trainer import TrainConfig, load_checkpoint


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section, raw, allowed):
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{section}.{key}'" if section else
                              f"unknown config key '{key}'")


def build_run_config(raw):
    """Split a raw config dict into (data paths, NetworkConfig, TrainConfig)."""
    _check_keys("", raw, {"data", "train", "network", "augment"})
    data = dict(raw.get("data", {}))
    _check_keys("data", data, {"train_manifest", "test_manifest"})

    net_raw = dict(raw.get("network", {}))
    _check_keys("network", net_raw, _field_names(NetworkConfig))
    net_cfg = NetworkConfig(**net_raw)

    aug_raw = dict(raw.get("augment", {}))
    _check_keys("augment", aug_raw, _field_names(AugmentConfig))
    augment = AugmentConfig(**aug_raw)

    train_raw = dict(raw.get("train", {}))
    _check_keys("train", train_raw, _field_names(TrainConfig) - {"augment"})
    train_cfg = TrainConfig(augment=augment, **train_raw)
    return data, net_cfg, train_cfg


def load_config_file(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return raw


def load_manifest(path):
    """Read {'items': [{'path':…, 'label':…}]}; paths resolve relative to it."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or "items" not in raw:
        raise ParseError(f"manifest {path} must be an object with an 'items' list")
    _check_keys("manifest", raw, {"items"})
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for i, item in enumerate(raw["items"]):
        if not isinstance(item, dict):
            raise ParseError(f"manifest item {i} must be an object")
        _check_keys(f"items[{i}]", item, {"path", "label"})
        if "path" not in item or "label" not in item:
            raise ParseError(f"manifest item {i} needs 'path' and 'label'")
        entries.append((os.path.join(base, item["path"]), int(item["label"])))
    if not entries:
        raise EmptyInputError(f"manifest {path} lists no items")
    return entries


def load_manifest_clouds(path, normalize=True):
    clouds = []
    for cloud_path, label in load_manifest(path):
        pc = load_xyz(cloud_path)
        pc.label = label
        clouds.append(normalize_cloud(pc) if normalize else pc)
    return clouds


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    for kind in kinds:
        if kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    items = []
    for label, kind in enumerate(kinds):
        for i in range(args.n_per_class):
            pc = generate_shape(kind, args.points, int(rng.integers(0, 2**63 - 1)))
            name = f"{kind}_{i:03d}.xyz"
            save_xyz(pc, os.path.join(args.out, name))
            items.append({"path": name, "label": label})
    _write_json(os.path.join(args.out, "manifest.json"), {"items": items})
    print(f"wrote {len(items)} clouds + manifest to {args.out}")
    return 0


def cmd_pretrain(args):
    raw = load_config_file(args.config)
    data, net_cfg, cfg = build_run_config(raw)
    if args.loss_mode is not None:
        cfg = dataclasses.replace(cfg, loss_mode=args.loss_mode)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        net_cfg = dataclasses.replace(net_cfg, seed=args.seed)
    if "train_manifest" not in data:
        raise ConfigError("config is missing data.train_manifest")

    clouds = load_manifest_clouds(
        os.path.join(os.path.dirname(os.path.abspath(args.config)), data["train_manifest"])
        if not os.path.isabs(data["train_manifest"])
        else data["train_manifest"]
    )
    os.makedirs(args.out, exist_ok=True)
    echo = {
        "config_file": os.path.abspath(args.config),
        "data": data,
        "network": trainer.net_cfg_dict(net_cfg),
        "train": dataclasses.asdict(cfg),
    }
    _write_json(os.path.join(args.out, "config_echo.json"), echo)

    ckpt_dir = os.path.join(args.out, "checkpoints")
    state, rows = trainer.train(
        clouds,
        net_cfg,
        cfg,
        log_path=os.path.join(args.out, "train_log.csv"),
        checkpoint_dir=ckpt_dir,
    )
    final = os.path.join(ckpt_dir, f"epoch_{cfg.epochs:04d}.ckpt")
    print(f"trained {cfg.epochs} epochs ({state.step} steps); final checkpoint {final}")
    return 0


def cmd_probe(args):
    state, _, _ = load_checkpoint(args.checkpoint)
    train_clouds = load_manifest_clouds(args.train_manifest)
    test_clouds = load_manifest_clouds(args.test_manifest)
    train_table = evaluate.extract_features(state, train_clouds, source=args.train_manifest)
    test_table = evaluate.extract_features(state, test_clouds, source=args.test_manifest)
    accuracy = evaluate.linear_probe(train_table, test_table, reg=args.reg)
    metrics = {
        "probe_accuracy": accuracy,
        "train_size": len(train_clouds),
        "test_size": len(test_clouds),
        "config": {
            "checkpoint": os.path.abspath(args.checkpoint),
            "reg": args.reg,
            "train_manifest": os.path.abspath(args.train_manifest),
            "test_manifest": os.path.abspath(args.test_manifest),
        },
    }
    _write_json(args.out, metrics)
    print(f"probe accuracy {accuracy:.4f} -> {args.out}")
    return 0


def cmd_segment(args):
    state, _, _ = load_checkpoint(args.checkpoint)
    raw_cloud = load_xyz(args.cloud)
    pc = normalize_cloud(raw_cloud)
    cfg = TrainConfig(sinkhorn_epsilon=args.epsilon, sinkhorn_iters=args.iters)
    labels = evaluate.hard_assignments(state, pc, cfg)
    out_cloud = dataclasses.replace(raw_cloud, part_labels=labels)
    save_xyz(out_cloud, args.out)

    metrics = {
        "num_points": int(pc.n),
        "num_prototypes": int(state.cfg.num_prototypes),
        "balance": evaluate.partition_balance(labels, state.cfg.num_prototypes),
        "ari": None,
        "config": {
            "checkpoint": os.path.abspath(args.checkpoint),
            "epsilon": args.epsilon,
            "iterations": args.iters,
        },
    }
    if raw_cloud.part_labels is not None:
        metrics["ari"] = evaluate.adjusted_rand_index(labels, raw_cloud.part_labels)
    _write_json(args.out + ".metrics.json", metrics)
    ari = metrics["ari"]
    print(
        f"segmented {pc.n} points into {state.cfg.num_prototypes} clusters"
        + (f", ARI {ari:.4f}" if ari is not None else "")
    )
    return 0


def cmd_export(args):
    state, _, _ = load_checkpoint(args.checkpoint)
    clouds = load_manifest_clouds(args.manifest)
    table = evaluate.extract_features(state, clouds, source=args.manifest)
    os.makedirs(args.out, exist_ok=True)
    features_path = os.path.join(args.out, "features.csv")
    evaluate.export_features_csv(table, features_path)
    proj = evaluate.pca_2d(table)
    pca_path = os.path.join(args.out, "pca2d.csv")
    with open(pca_path, "w") as fh:
        fh.write("label,x,y\n")
        for label, row in zip(table.labels, proj):
            fh.write(f"{int(label)},{row[0]:.17g},{row[1]:.17g}\n")
    print(f"wrote {features_path} and {pca_path} ({len(clouds)} rows)")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="conclu",
        description="Unsupervised point-cloud representation learning lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic shape clouds + manifest")
    p.add_argument("--kinds", default="sphere,box,cylinder",
                   help="comma-separated shape kinds")
    p.add_argument("--n-per-class", type=int, default=10)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run unsupervised pretraining")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--loss-mode", choices=trainer.LOSS_MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--reg", type=float, default=evaluate.PROBE_REG)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("segment", help="per-point cluster labels for one cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True, help="input XYZ file")
    p.add_argument("--out", required=True, help="output XYZ with label column")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--iters", type=int, default=20)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("export", help="feature + 2D projection CSV export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, CheckpointFormatError, EmptyInputError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConCluError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
