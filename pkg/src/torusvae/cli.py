"""Command-line front end: generate, train, evaluate, sweep, traverse.

Every command is a pure function of the JSON config and its input files;
outputs are written atomically (temp file, then rename) so reruns reproduce
identical bytes and interruptions never leave truncated artifacts.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import datasets, engine, metrics
from .errors import ConfigError, FormatError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


# -- config ----------------------------------------------------------------------


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        config = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config root must be a JSON object")
    return config


def _section(config: dict, name: str) -> dict:
    if name not in config or not isinstance(config[name], dict):
        raise ConfigError(f"config needs a {name!r} object")
    return config[name]


def _require(section: dict, key: str, context: str):
    if key not in section:
        raise ConfigError(f"{context}.{key} is required (seeds are never defaulted)")
    return section[key]


def _out_dir(config: dict, args) -> Path:
    out = args.out if getattr(args, "out", None) else config.get("out_dir", ".")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(out_dir: Path, name) -> Path:
    path = Path(name)
    return path if path.is_absolute() else out_dir / path


def _atomic_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_json(path: Path, obj) -> None:
    _atomic_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _atomic_file(path: Path, write_fn) -> None:
    """Run write_fn(tmp_path) and atomically rename the result into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- dataset plumbing --------------------------------------------------------------


def _build_dataset(block: dict) -> datasets.Dataset:
    kind = _require(block, "kind", "dataset")
    count = int(_require(block, "count", "dataset"))
    seed = int(_require(block, "seed", "dataset"))
    if kind == "2dshapes":
        width = int(block.get("width", 16))
        height = int(block.get("height", 16))
        return datasets.make_2dshapes_dataset(count, seed, width, height)
    if kind == "synthetic":
        k = int(_require(block, "factors", "dataset"))
        noise = float(block.get("noise_sigma", 0.0))
        return datasets.make_synthetic_dataset(k, count, seed, noise)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _input_scale_for(kind: str) -> str:
    return engine.SCALE_UNIT if kind == "2dshapes" else engine.SCALE_SYMMETRIC


def _dataset_path(config: dict, out_dir: Path) -> Path:
    block = _section(config, "dataset")
    return _resolve(out_dir, block.get("path", "dataset.tdds"))


def _train_config(config: dict, beta=None, latent_dim=None, seed=None) -> engine.TrainConfig:
    block = _section(config, "model")
    kind = _require(_section(config, "dataset"), "kind", "dataset")
    return engine.TrainConfig(
        mode=block.get("mode", "torus"),
        latent_dim=int(latent_dim if latent_dim is not None else _require(block, "latent_dim", "model")),
        beta=float(beta if beta is not None else block.get("beta", 1.0)),
        learning_rate=float(block.get("learning_rate", 0.0001)),
        batch_size=int(block.get("batch_size", 144)),
        epochs=int(block.get("epochs", 50)),
        seed=int(seed if seed is not None else _require(block, "seed", "model")),
        hidden=tuple(int(h) for h in block.get("hidden", (256, 128))),
        val_fraction=float(block.get("val_fraction", 0.2)),
        input_scale=_input_scale_for(kind),
    )


def split_indices(seed: int, n: int, val_fraction: float):
    """The train/validation row split used by engine.train, recomputed.

    Must stay in lockstep with engine.train so evaluation reads exactly the
    rows that training held out.
    """
    streams = np.random.SeedSequence(seed).spawn(4)
    split_rng = np.random.default_rng(streams[1])
    perm = split_rng.permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        return perm, perm
    return perm[n_val:], perm[:n_val]


# -- commands ------------------------------------------------------------------------


def cmd_generate(config: dict, args) -> int:
    out_dir = _out_dir(config, args)
    block = _section(config, "dataset")
    dataset = _build_dataset(block)
    path = _dataset_path(config, out_dir)

    def write(tmp):
        datasets.save_dataset(dataset, tmp)

    _atomic_file(path, write)
    _atomic_json(Path(str(path) + ".json"), json.loads(dataset.spec.to_json()))
    print(f"wrote {dataset.n} records to {path}")
    return EXIT_OK


def _load_dataset_checked(config: dict, out_dir: Path) -> datasets.Dataset:
    path = _dataset_path(config, out_dir)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path} (run generate first)")
    return datasets.load_dataset(path)


def cmd_train(config: dict, args) -> int:
    out_dir = _out_dir(config, args)
    dataset = _load_dataset_checked(config, out_dir)
    train_config = _train_config(config)
    model, report = engine.train(train_config, dataset.samples)

    block = _section(config, "model")
    ckpt_path = _resolve(out_dir, block.get("checkpoint", "model.tdvae"))
    report_path = _resolve(out_dir, block.get("report", "train_report.json"))
    _atomic_file(ckpt_path, lambda tmp: engine.save_checkpoint(model, tmp))
    _atomic_json(report_path, report.to_dict())
    print(
        f"trained {train_config.mode} latent_dim={train_config.latent_dim} "
        f"beta={train_config.beta}: best epoch {report.best_epoch}, "
        f"val MSE {report.val_mse[report.best_epoch]:.6g}"
    )
    return EXIT_OK


def _evaluation_codes(model, dataset, config: dict, rows) -> np.ndarray:
    metrics_block = _section(config, "metrics")
    source = metrics_block.get("codes_source", "encoder")
    if source == "factors":
        return dataset.factors[rows]
    if source != "encoder":
        raise ConfigError(f"unknown codes_source {source!r}")
    x = dataset.samples[rows]
    if model.input_scale == engine.SCALE_UNIT:
        x = 2.0 * x - 1.0
    return model.codes(x)


def cmd_evaluate(config: dict, args) -> int:
    out_dir = _out_dir(config, args)
    dataset = _load_dataset_checked(config, out_dir)
    block = _section(config, "model")
    metrics_block = _section(config, "metrics")

    ckpt_path = _resolve(out_dir, block.get("checkpoint", "model.tdvae"))
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path} (run train first)")
    model = engine.load_checkpoint(ckpt_path)
    if model.encoder.input_dim != dataset.samples.shape[1]:
        raise ConfigError(
            f"checkpoint expects {model.encoder.input_dim}-dim samples, "
            f"dataset provides {dataset.samples.shape[1]}"
        )

    train_config = _train_config(config)
    if metrics_block.get("codes_source", "encoder") == "encoder":
        if model.latent.mode != train_config.mode or model.latent.dim != train_config.latent_dim:
            raise ConfigError(
                f"checkpoint is {model.latent.mode}/{model.latent.dim} but config says "
                f"{train_config.mode}/{train_config.latent_dim}"
            )
    _, val_rows = split_indices(train_config.seed, dataset.n, train_config.val_fraction)

    codes = _evaluation_codes(model, dataset, config, val_rows)
    factors = dataset.factors[val_rows]
    evaluation = metrics.run_dci(
        codes,
        factors,
        split_seed=int(_require(metrics_block, "split_seed", "metrics")),
        grid=tuple(metrics_block.get("alpha_grid", metrics.DEFAULT_ALPHA_GRID)),
        folds=int(metrics_block.get("folds", 10)),
        holdout_fraction=float(metrics_block.get("holdout_fraction", 0.2)),
    )
    report = evaluation.report

    report_path = _resolve(out_dir, metrics_block.get("report", "dci_report.json"))
    _atomic_json(report_path, report.to_dict())

    codes_std, _ = metrics.standardize_columns(codes)
    factors_std, _ = metrics.standardize_columns(factors)
    bundle = metrics.heatmap_export(codes_std, factors_std, evaluation.importance)
    heatmap_dir = _resolve(out_dir, metrics_block.get("heatmap_dir", "heatmaps"))
    metrics.write_heatmap_bundle(bundle, heatmap_dir)
    print(
        f"dci: D={report.disentanglement:.4f} C={report.completeness:.4f} "
        f"I={report.informativeness:.4f} DC={report.dc_score:.4f}"
    )
    return EXIT_OK


def cmd_sweep(config: dict, args) -> int:
    out_dir = _out_dir(config, args)
    dataset_path = _dataset_path(config, out_dir)
    if not dataset_path.exists():
        raise ConfigError(f"dataset file not found: {dataset_path} (run generate first)")
    sweep_block = _section(config, "sweep")
    betas = list(sweep_block.get("betas", (0.0, 1.0, 3.0, 6.0, 9.0)))
    dims = list(sweep_block.get("dims", (4, 5, 6, 8)))
    if not betas or not dims:
        raise ConfigError("sweep grids must be non-empty")
    workers = max(1, int(getattr(args, "workers", 1) or 1))

    cells = [(float(beta), int(dim)) for beta in betas for dim in dims]
    jobs = [(config, str(dataset_path), beta, dim) for beta, dim in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(job) for job in jobs]

    csv_path = _resolve(out_dir, sweep_block.get("csv", "sweep.csv"))

    def write(tmp):
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "beta", "latent_dim", "dc_score", "disentanglement",
                "completeness", "informativeness", "mse", "status",
            ])
            writer.writerows(rows)

    _atomic_file(csv_path, write)
    failures = sum(1 for row in rows if row[-1] != "ok")
    print(f"sweep wrote {len(rows)} rows to {csv_path} ({failures} failed cells)")
    return EXIT_OK


def _sweep_cell(job):
    config, dataset_path, beta, dim = job
    fmt = metrics.FLOAT_FORMAT
    try:
        dataset = datasets.load_dataset(dataset_path)
        train_config = _train_config(config, beta=beta, latent_dim=dim)
        model, report = engine.train(train_config, dataset.samples)
        _, val_rows = split_indices(train_config.seed, dataset.n, train_config.val_fraction)
        metrics_block = _section(config, "metrics")
        codes = _evaluation_codes(model, dataset, config, val_rows)
        dci = metrics.evaluate_dci(
            codes,
            dataset.factors[val_rows],
            split_seed=int(_require(metrics_block, "split_seed", "metrics")),
            grid=tuple(metrics_block.get("alpha_grid", metrics.DEFAULT_ALPHA_GRID)),
            folds=int(metrics_block.get("folds", 10)),
            holdout_fraction=float(metrics_block.get("holdout_fraction", 0.2)),
        )
        mse = report.val_mse[report.best_epoch]
        return [
            fmt % beta, str(dim), fmt % dci.dc_score, fmt % dci.disentanglement,
            fmt % dci.completeness, fmt % dci.informativeness, fmt % mse, "ok",
        ]
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        return [fmt % beta, str(dim), "", "", "", "", "", f"error: {exc}"]


def cmd_traverse(config: dict, args) -> int:
    out_dir = _out_dir(config, args)
    block = _section(config, "model")
    traverse_block = config.get("traverse", {})
    circle = int(getattr(args, "circle", None) if getattr(args, "circle", None) is not None
                 else traverse_block.get("circle", 0))
    steps = int(getattr(args, "steps", None) if getattr(args, "steps", None) is not None
                else traverse_block.get("steps", 12))
    if steps < 1:
        raise ConfigError("steps must be >= 1")

    ckpt_path = _resolve(out_dir, block.get("checkpoint", "model.tdvae"))
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    model = engine.load_checkpoint(ckpt_path)
    if model.latent.mode != engine.TORUS:
        raise ConfigError("traverse needs a circle-latent checkpoint")
    d = model.latent.dim
    if not 0 <= circle < d:
        raise ConfigError(f"circle index {circle} out of range for {d} circles")

    anchor = np.asarray(traverse_block.get("anchor", [0.0] * d), dtype=float)
    if anchor.shape != (d,):
        raise ConfigError(f"anchor must list {d} angles")

    prefix = traverse_block.get("prefix", "traverse")
    width, height = _image_dims(config, model)
    for step in range(steps):
        angles = anchor.copy()
        angles[circle] = datasets.TWO_PI * step / steps
        sample = engine.scale_out(engine.generate(model, angles), model.input_scale)
        image = sample.reshape(height, width, 3)
        path = out_dir / f"{prefix}_{step:03d}.ppm"
        _atomic_file(path, lambda tmp, image=image: datasets.write_ppm(image, tmp))
    print(f"wrote {steps} frames to {out_dir}/{prefix}_*.ppm")
    return EXIT_OK


def _image_dims(config: dict, model) -> tuple:
    block = _section(config, "dataset")
    if _require(block, "kind", "dataset") != "2dshapes":
        raise ConfigError("traverse writes PPM frames and needs an image dataset (2dshapes)")
    width = int(block.get("width", 16))
    height = int(block.get("height", 16))
    if width * height * 3 != model.encoder.input_dim:
        raise ConfigError(
            f"dataset dims {width}x{height}x3 do not match the checkpoint input "
            f"({model.encoder.input_dim})"
        )
    return width, height


# -- entry point -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise ConfigError(message)


def _build_parser() -> _Parser:
    # The global flags exist on the root parser (usable before the subcommand)
    # and again on every subcommand with SUPPRESS defaults, so a value given
    # after the subcommand wins and an omitted one never clobbers the root's.
    # The parents mechanism shares action objects, so the two positions need
    # distinct parser instances.
    shared = _Parser(add_help=False)
    shared.add_argument("--config", default=argparse.SUPPRESS, help="experiment config JSON")
    shared.add_argument("--out", default=argparse.SUPPRESS, help="output directory override")
    shared.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="parallel sweep cells")

    parser = _Parser(prog="torusvae", description="circle-product VAE experiment pipeline")
    parser.add_argument("--config", default=None, help="experiment config JSON")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--workers", type=int, default=1, help="parallel sweep cells")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[shared], help="write the dataset file")
    sub.add_parser("train", parents=[shared], help="train and checkpoint a model")
    sub.add_parser("evaluate", parents=[shared], help="DCI report and heatmaps")
    sub.add_parser("sweep", parents=[shared], help="beta x latent-dim grid")
    traverse = sub.add_parser("traverse", parents=[shared], help="decode one circle sweep")
    traverse.add_argument("--circle", type=int, default=None, help="circle index to sweep")
    traverse.add_argument("--steps", type=int, default=None, help="number of frames")
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "traverse": cmd_traverse,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if not args.config:
            raise ConfigError("--config is required")
        config = load_config(args.config)
        return _COMMANDS[args.command](config, args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - surface anything else as runtime failure
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
