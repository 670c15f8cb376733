"""Command-line pipeline: train, encode, search, eval, baseline.

All subcommands are driven by one JSON config file (see README for the
schema); a few keys can be overridden with flags. Exit codes: 0 success,
2 configuration/validation problem, 3 numeric failure during training.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import dataset as ds
from . import evaluation, network, retrieval, training
from .errors import ConfigError, FormatError, NumericError, ShapeError, TripletHashError
from .losses import LossWeights, TripletConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def load_run_config(path, overrides=None):
    """Parse and validate the JSON run config, applying CLI overrides."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")

    overrides = overrides or {}
    if "seed" in overrides:
        raw.setdefault("train", {})["seed"] = overrides["seed"]
        raw.setdefault("eval", {})["seed"] = overrides["seed"]
    if "bits" in overrides:
        raw.setdefault("train", {})["bit_width"] = overrides["bits"]
    if "out" in overrides:
        raw["output_dir"] = overrides["out"]
    return raw


def _dataset_from_config(raw):
    section = raw.get("dataset")
    if not isinstance(section, dict):
        raise ConfigError("config needs a 'dataset' section")
    fmt = section.get("format")
    if fmt == "mnist":
        for key in ("images", "labels"):
            if key not in section or not os.path.exists(section[key]):
                raise ConfigError(f"mnist dataset path missing or absent: {key}")
        data = ds.load_mnist_idx(section["images"], section["labels"])
    elif fmt == "cifar10":
        paths = section.get("batches", [])
        if not paths or any(not os.path.exists(p) for p in paths):
            raise ConfigError("cifar10 dataset batches missing or absent")
        data = ds.load_cifar10(paths)
    else:
        raise ConfigError(f"unknown dataset format: {fmt}")

    limit = section.get("limit")
    if limit is not None:
        if not isinstance(limit, int) or limit < 1:
            raise ConfigError("dataset limit must be a positive integer")
        data = data.subset(range(min(limit, len(data))))
    return data


def _train_config_from(raw):
    section = dict(raw.get("train", {}))
    weights = LossWeights(**section.pop("weights", {}))
    triplet = TripletConfig(margin=section.pop("margin", 1.0))
    rotations = ds.RotationConfig(tuple(section.pop("rotations", (-10.0, -5.0, 5.0, 10.0))))
    return training.TrainConfig(
        weights=weights, triplet=triplet, rotations=rotations, **section
    )


def _eval_config_from(raw):
    return evaluation.EvalConfig(**raw.get("eval", {}))


def _output_dir(raw):
    out = raw.get("output_dir")
    if not out:
        raise ConfigError("config needs an 'output_dir'")
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out_dir, raw, elapsed):
    digest = hashlib.sha256(
        json.dumps(raw, sort_keys=True).encode()
    ).hexdigest()
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(
            {
                "config_sha256": digest,
                "seed": raw.get("train", {}).get("seed", 0),
                "wall_clock_seconds": elapsed,
                "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            },
            f,
            indent=2,
        )
        f.write("\n")


def _run_training(raw, variant):
    data = _dataset_from_config(raw)
    config = _train_config_from(raw)
    out_dir = _output_dir(raw)
    spec = network.default_layer_spec(config.bit_width)
    params = network.build_network(spec, data.dims, config.seed)
    started = time.perf_counter()
    params, log = training.train(params, data, config, variant=variant)
    network.save_params(params, os.path.join(out_dir, "params.bin"))
    log.to_csv(os.path.join(out_dir, "trainlog.csv"))
    _write_manifest(out_dir, raw, time.perf_counter() - started)
    return out_dir


def cmd_train(args):
    raw = load_run_config(args.config, _overrides(args))
    out_dir = _run_training(raw, variant="triplet")
    print(f"wrote {os.path.join(out_dir, 'params.bin')}")
    return EXIT_OK


def cmd_encode(args):
    raw = load_run_config(args.config, _overrides(args))
    data = _dataset_from_config(raw)
    out_dir = _output_dir(raw)
    params = network.load_params(args.params)
    if params.input_dims != data.dims:
        raise ConfigError(
            f"params expect input {params.input_dims}, dataset has {data.dims}"
        )
    db = retrieval.encode_dataset(params, data)
    codes_path = os.path.join(out_dir, "codes.bin")
    retrieval.save_codes(db, codes_path)
    print(f"wrote {codes_path}")
    return EXIT_OK


def cmd_search(args):
    db = retrieval.load_codes(args.codes)
    rows = np.flatnonzero(db.ids == args.query_id)
    if rows.size == 0:
        raise ConfigError(f"query id {args.query_id} not present in code database")
    neighbors = retrieval.knn_search(db, db.code(int(rows[0])), args.k)
    print("rank,neighbor_id,distance")
    for rank, nb in enumerate(neighbors, start=1):
        print(f"{rank},{nb.id},{nb.distance}")
    return EXIT_OK


def cmd_eval(args):
    raw = load_run_config(args.config, _overrides(args))
    out_dir = _output_dir(raw)
    db = retrieval.load_codes(args.codes)
    if db.labels is None:
        raise ConfigError("code database has no labels; cannot evaluate")
    report = evaluation.evaluate(db, _eval_config_from(raw))
    csv_path = os.path.join(out_dir, "pr_curve.csv")
    json_path = os.path.join(out_dir, "eval_summary.json")
    evaluation.export_report(report, csv_path, json_path)
    print(f"mAP@{report.config.top_k} = {report.map:.6f}")
    return EXIT_OK


def cmd_baseline(args):
    raw = load_run_config(args.config, _overrides(args))
    if args.method == "lsh":
        data = _dataset_from_config(raw)
        config = _train_config_from(raw)
        out_dir = _output_dir(raw)
        codes = retrieval.lsh_encode(
            data.pixel_matrix(), config.bit_width, config.seed
        )
        db = retrieval.codes_from_list(
            codes,
            [s.index for s in data.samples],
            [s.label for s in data.samples]
            if all(s.label is not None for s in data.samples)
            else None,
        )
        codes_path = os.path.join(out_dir, "codes.bin")
        retrieval.save_codes(db, codes_path)
        print(f"wrote {codes_path}")
    elif args.method == "rotinv":
        out_dir = _run_training(raw, variant="rotinv")
        print(f"wrote {os.path.join(out_dir, 'params.bin')}")
    else:
        raise ConfigError(f"unknown baseline method: {args.method}")
    return EXIT_OK


def _overrides(args):
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "bits", None) is not None:
        out["bits"] = args.bits
    if getattr(args, "out", None) is not None:
        out["out"] = args.out
    return out


def _add_common(p):
    p.add_argument("--seed", type=int, help="override train/eval seed")
    p.add_argument("--bits", type=int, help="override code bit width")
    p.add_argument("--out", help="override output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="triplethash",
        description="Unsupervised binary image descriptors and Hamming retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="two-phase training from a JSON config")
    p.add_argument("--config", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a dataset into a code database")
    p.add_argument("--params", required=True)
    p.add_argument("--config", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("search", help="k-NN search for one query id")
    p.add_argument("--codes", required=True)
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="mAP and PR-curve evaluation")
    p.add_argument("--codes", required=True)
    p.add_argument("--config", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="LSH codes or rotation-invariance training")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=["lsh", "rotinv"], required=True)
    _add_common(p)
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, ShapeError, TripletHashError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
