"""Experiment runner: flag parsing, seeding, metrics files, cap summaries.

A metrics file has one header row and one comma-separated row per evaluated
round with columns (round, alpha_r, accuracy, loss, upload_bits_cum,
download_bits_cum, mask_flip_frac, failed_clients), floats at full precision.
The same (config, seed) pair always reproduces the file byte for byte.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import protocol
from .data import (Dirichlet, LabeledDataset, Pathological, load_cifar10_bin, load_idx,
                   load_synthetic, partition_dirichlet, partition_pathological, synthetic_blobs)
from .errors import ConfigurationError, FormatError, RoundError
from .nn import build_model, make_mlp
from .protocol import AlgorithmConfig, RoundMetrics, rng_for, run_experiment

DATASETS = ("mnist", "cifar10", "synthetic")
SYNTHETIC_SHAPE = (1, 6, 6)
SYNTHETIC_CLASSES = 10
SYNTHETIC_PER_CLASS = 500
SYNTHETIC_SEPARATION = 6.0

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = "test_batch.bin"


@dataclass
class ExperimentConfig:
    """Everything one run needs: data source, partition, algorithm, seeding."""

    dataset: str = "synthetic"
    data_dir: str = "data"
    partition: str = "pathological"
    num_clients: int = 400
    classes_per_client: int = 2
    images_per_class: int = 20
    dirichlet_beta: float = 0.1
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    seed: int = 42
    seeds: tuple[int, ...] = ()
    eval_every: int = 10
    per_client_eval: bool = False
    threads: int = 1
    output: str = "metrics.csv"
    ledger_output: str = ""
    caps: tuple[int, ...] = ()


def _float_in(lo, hi, flag, closed_hi=False):
    def convert(token):
        try:
            v = float(token)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} got a non-numeric value {token!r}")
        ok = lo <= v <= hi if closed_hi else lo <= v < hi
        if not ok:
            bracket = "]" if closed_hi else ")"
            raise argparse.ArgumentTypeError(f"{flag} value {token!r} outside [{lo}, {hi}{bracket}")
        return v
    return convert


def _positive_int(flag, minimum=1):
    def convert(token):
        try:
            v = int(token)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} got a non-integer value {token!r}")
        if v < minimum:
            raise argparse.ArgumentTypeError(f"{flag} value {token!r} must be >= {minimum}")
        return v
    return convert


def _int_list(flag):
    def convert(token):
        try:
            return tuple(int(t) for t in token.split(",") if t)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects comma-separated integers, got {token!r}")
    return convert


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedsparse",
        description="Deterministic federated-learning simulator with dynamic sparse training.",
    )
    p.add_argument("--config", default=None, help="key=value file; flags override its entries")
    p.add_argument("--dataset", choices=DATASETS, default=None)
    p.add_argument("--data-dir", default=None, help="directory holding mnist/ and cifar10/ files")
    p.add_argument("--algorithm", choices=protocol.ALGORITHMS, default=None)
    p.add_argument("--sparsity", type=_float_in(0.0, 1.0, "--sparsity"), default=None)
    p.add_argument("--readjustment-ratio", type=_float_in(0.0, 1.0, "--readjustment-ratio", True),
                   default=None)
    p.add_argument("--rounds-between-readjustments", type=_positive_int("--rounds-between-readjustments"),
                   default=None)
    p.add_argument("--readjustment-end-round", type=_positive_int("--readjustment-end-round"),
                   default=None)
    p.add_argument("--readjustment-epoch", type=_positive_int("--readjustment-epoch"), default=None)
    p.add_argument("--prox", type=_float_in(0.0, math.inf, "--prox", True), default=None)
    p.add_argument("--rounds", type=_positive_int("--rounds"), default=None)
    p.add_argument("--clients-per-round", type=_positive_int("--clients-per-round"), default=None)
    p.add_argument("--epochs", type=_positive_int("--epochs", 0), default=None)
    p.add_argument("--batch-size", type=_positive_int("--batch-size"), default=None)
    p.add_argument("--learning-rate", type=_float_in(0.0, math.inf, "--learning-rate", True),
                   default=None)
    p.add_argument("--momentum", type=_float_in(0.0, 1.0, "--momentum"), default=None)
    p.add_argument("--weight-decay", type=_float_in(0.0, math.inf, "--weight-decay", True),
                   default=None)
    p.add_argument("--bfloat16", action="store_true", default=None,
                   help="quantize client uploads to bfloat16")
    p.add_argument("--seed", type=_positive_int("--seed", 0), default=None)
    p.add_argument("--seeds", type=_int_list("--seeds"), default=None,
                   help="comma-separated seeds; runs each and writes a cap summary")
    p.add_argument("--partition", choices=("pathological", "dirichlet"), default=None)
    p.add_argument("--num-clients", type=_positive_int("--num-clients"), default=None)
    p.add_argument("--classes-per-client", type=_positive_int("--classes-per-client"), default=None)
    p.add_argument("--images-per-class", type=_positive_int("--images-per-class"), default=None)
    p.add_argument("--beta", type=_float_in(0.0, math.inf, "--beta", True), default=None)
    p.add_argument("--eval-every", type=_positive_int("--eval-every", 0), default=None)
    p.add_argument("--per-client-eval", action="store_true", default=None)
    p.add_argument("--threads", type=_positive_int("--threads"), default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--ledger-output", default=None)
    p.add_argument("--caps", type=_int_list("--caps"), default=None,
                   help="cumulative upload caps in bytes for the best-at-cap summary")
    return p


_FLAG_TO_ALGO = {
    "sparsity": "sparsity",
    "readjustment_ratio": "readjustment_ratio",
    "rounds_between_readjustments": "rounds_between_readjustments",
    "readjustment_end_round": "readjustment_end_round",
    "readjustment_epoch": "readjustment_epoch",
    "prox": "prox_mu",
    "rounds": "rounds",
    "clients_per_round": "clients_per_round",
    "epochs": "local_epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "algorithm": "algorithm",
}

_FLAG_TO_EXPERIMENT = {
    "dataset": "dataset",
    "data_dir": "data_dir",
    "seed": "seed",
    "seeds": "seeds",
    "partition": "partition",
    "num_clients": "num_clients",
    "classes_per_client": "classes_per_client",
    "images_per_class": "images_per_class",
    "beta": "dirichlet_beta",
    "eval_every": "eval_every",
    "per_client_eval": "per_client_eval",
    "threads": "threads",
    "output": "output",
    "ledger_output": "ledger_output",
    "caps": "caps",
}

# dataset-dependent defaults, applied when the flag is not given
_DATASET_DEFAULTS = {
    "mnist": {"readjustment_end_round": 200, "rounds_between_readjustments": 10},
    "cifar10": {"readjustment_end_round": 1000, "rounds_between_readjustments": 15},
    "synthetic": {"readjustment_end_round": 200, "rounds_between_readjustments": 10},
}


def _read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def parse_config(argv=None) -> ExperimentConfig:
    """Build an ExperimentConfig from flags plus an optional key=value file.

    Precedence: built-in and dataset defaults, then file entries, then
    explicit command-line flags.
    """
    parser = _build_parser()
    ns = parser.parse_args(argv)
    given = {k: v for k, v in vars(ns).items() if v is not None and k != "config"}

    if ns.config:
        file_values = _read_config_file(ns.config)
        file_argv = []
        for key, value in file_values.items():
            flag = "--" + key.replace("_", "-")
            if key in ("bfloat16", "per_client_eval"):
                if value.lower() in ("1", "true", "yes"):
                    file_argv.append(flag)
                elif value.lower() not in ("0", "false", "no"):
                    parser.error(f"config value {key}={value!r} is not a boolean")
            else:
                file_argv.extend([flag, value])
        file_ns = parser.parse_args(file_argv)
        for k, v in vars(file_ns).items():
            if v is not None and k not in given and k != "config":
                given[k] = v

    dataset = given.get("dataset", "synthetic")
    for key, value in _DATASET_DEFAULTS[dataset].items():
        given.setdefault(key, value)

    algo_kwargs = {dst: given[src] for src, dst in _FLAG_TO_ALGO.items() if src in given}
    if given.get("bfloat16"):
        algo_kwargs["upload_quantizer"] = "bfloat16"
    exp_kwargs = {dst: given[src] for src, dst in _FLAG_TO_EXPERIMENT.items() if src in given}
    try:
        return ExperimentConfig(algorithm=AlgorithmConfig(**algo_kwargs), **exp_kwargs)
    except ConfigurationError as exc:
        parser.error(str(exc))


def load_dataset(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Return (train, test) for the configured dataset id."""
    root = Path(cfg.data_dir)
    if cfg.dataset == "mnist":
        d = root / "mnist"
        train = load_idx(d / MNIST_FILES[0], d / MNIST_FILES[1])
        test = load_idx(d / MNIST_FILES[2], d / MNIST_FILES[3])
        return train, test
    if cfg.dataset == "cifar10":
        d = root / "cifar10"
        return load_cifar10_bin([d / f for f in CIFAR_TRAIN]), load_cifar10_bin([d / CIFAR_TEST])
    saved = root / "synthetic.bin"
    if saved.exists():
        ds = load_synthetic(saved)
    else:
        ds = synthetic_blobs(SYNTHETIC_CLASSES, SYNTHETIC_PER_CLASS,
                             int(np.prod(SYNTHETIC_SHAPE)), SYNTHETIC_SEPARATION,
                             seed=int(rng_for(cfg.seed, protocol.STREAM_DATA).integers(2 ** 31)),
                             image_shape=SYNTHETIC_SHAPE)
    split = int(0.8 * len(ds))
    train = LabeledDataset(ds.images[:split], ds.labels[:split], ds.num_classes)
    test = LabeledDataset(ds.images[split:], ds.labels[split:], ds.num_classes)
    return train, test


def partition_dataset(cfg: ExperimentConfig, train: LabeledDataset):
    part_seed = int(rng_for(cfg.seed, protocol.STREAM_PARTITION).integers(2 ** 31))
    if cfg.partition == "pathological":
        spec = Pathological(cfg.num_clients, cfg.classes_per_client, cfg.images_per_class)
        return partition_pathological(train, spec, part_seed)
    return partition_dirichlet(train, cfg.num_clients, cfg.dirichlet_beta, part_seed)


def net_builder(cfg: ExperimentConfig, train: LabeledDataset):
    if cfg.dataset == "mnist":
        return lambda seed: build_model("mnist_cnn", seed)
    if cfg.dataset == "cifar10":
        return lambda seed: build_model("cifar10_cnn", seed)
    shape = train.sample_shape
    return lambda seed: make_mlp(shape, (64,), train.num_classes, seed)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_metrics(series: list[RoundMetrics], path) -> None:
    """Write the metrics table; full float precision, one row per evaluated round."""
    if not series:
        raise ValueError("metrics series is empty")
    cols = ["round", "alpha_r", "accuracy", "loss", "upload_bits_cum",
            "download_bits_cum", "mask_flip_frac", "failed_clients"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for m in series:
            fh.write(",".join(_fmt(v) for v in (
                m.round_no, m.alpha, m.accuracy, m.mean_loss, m.upload_bits_cum,
                m.download_bits_cum, m.mask_flip_frac, m.failed_clients)) + "\n")


def best_at_caps(series: list[RoundMetrics], caps) -> list[tuple[int, float | None]]:
    """Best accuracy reached before each cumulative-upload cap (in bits).

    Caps must be ascending; a cap below the first evaluation's upload maps to
    None. The result is non-decreasing in the cap.
    """
    if list(caps) != sorted(caps):
        raise ValueError("caps must be sorted ascending")
    out = []
    for cap in caps:
        eligible = [m.accuracy for m in series if m.upload_bits_cum <= cap]
        out.append((cap, max(eligible) if eligible else None))
    return out


def run_single(cfg: ExperimentConfig, seed: int):
    train, test = load_dataset(cfg)
    shards = partition_dataset(replace(cfg, seed=seed), train)
    return run_experiment(cfg.algorithm, net_builder(cfg, train), train,
                          None if cfg.per_client_eval else test, shards, seed,
                          eval_every=cfg.eval_every, workers=cfg.threads,
                          per_client_eval=cfg.per_client_eval)


def multi_seed_runner(cfg: ExperimentConfig, seeds, caps):
    """Run one experiment per seed; aggregate best-at-cap accuracy across them.

    Returns (per-seed series list, list of (cap, mean, std)); std is the
    population standard deviation, so a single seed reports 0.
    """
    if not seeds:
        raise ConfigurationError("at least one seed is required")
    all_series = []
    for seed in seeds:
        series, _ = run_single(cfg, seed)
        all_series.append(series)
    summary = []
    for i, cap in enumerate(caps):
        vals = [best_at_caps(series, caps)[i][1] for series in all_series]
        present = [v for v in vals if v is not None]
        if not present:
            summary.append((cap, None, None))
        else:
            summary.append((cap, float(np.mean(present)), float(np.std(present))))
    return all_series, summary


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        caps_bits = tuple(8 * c for c in cfg.caps)
        if cfg.seeds:
            all_series, summary = multi_seed_runner(cfg, cfg.seeds, caps_bits)
            out = Path(cfg.output)
            for seed, series in zip(cfg.seeds, all_series):
                emit_metrics(series, out.with_name(f"{out.stem}.seed{seed}{out.suffix}"))
            with open(out, "w") as fh:
                fh.write("cap_bytes,mean_accuracy,std_accuracy\n")
                for cap, mean, std in summary:
                    fh.write(f"{cap // 8},{_fmt(mean) if mean is not None else ''},"
                             f"{_fmt(std) if std is not None else ''}\n")
            print(f"wrote per-seed metrics and cap summary to {out}")
        else:
            series, ledger = run_single(cfg, cfg.seed)
            emit_metrics(series, cfg.output)
            if cfg.ledger_output:
                ledger.export(cfg.ledger_output)
            if caps_bits:
                for cap, acc in best_at_caps(series, caps_bits):
                    shown = f"{acc:.4f}" if acc is not None else "absent"
                    print(f"cap {cap // 8} bytes: best accuracy {shown}")
            final = series[-1]
            print(f"finished round {final.round_no}: accuracy {final.accuracy:.4f}, "
                  f"upload {final.upload_bits_cum} bits")
        return 0
    except (ConfigurationError, FormatError, RoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
