"""Command-line interface: synth / train / predict / eval / gradcheck / rf / sweep-ac.

Every command resolves its settings from defaults, an optional
``--config`` file and explicit flags (flags win), and writes the resolved
snapshot next to its outputs so any run can be replayed bit-for-bit.

Exit codes: 0 success, 2 configuration or usage error, 3 missing or
malformed input, 4 training diverged, 1 anything else.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click

from .config import ConfigError, RunConfig, resolve, snapshot

_SNAPSHOT_NAME = "resolved_config.txt"


def _apply_threads(threads: int) -> None:
    """Cap BLAS worker counts; only effective before numpy is loaded."""
    n = threads or int(os.environ.get("MILSEG_THREADS", "0"))
    if n > 0 and "numpy" not in sys.modules:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _common_options(fn):
    fn = click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                      default=None, help="key=value configuration file")(fn)
    fn = click.option("--seed", type=int, default=None, help="master RNG seed")(fn)
    fn = click.option("--threads", type=int, default=None,
                      help="cap BLAS thread count (or set MILSEG_THREADS)")(fn)
    return fn


def _resolved(config_file, threads, **flags) -> RunConfig:
    cfg = resolve(config_file, **flags)
    if threads is not None:
        cfg.threads = threads
    _apply_threads(cfg.threads)
    if cfg.threads > 0:
        from .tensor import _set_blas_threads

        _set_blas_threads(cfg.threads)
    return cfg


def _check_weights(cfg: RunConfig) -> None:
    if len(cfg.eta_side) != len(cfg.conv_counts):
        raise ConfigError(
            f"eta_side has {len(cfg.eta_side)} entries for {len(cfg.conv_counts)} stages"
        )


@click.group()
def cli():
    """Weakly-supervised segmentation from image-level labels and area estimates."""


@cli.command()
@_common_options
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--image-size", "image_size", type=int, default=None)
@click.option("--positives", "positive_count", type=int, default=None)
@click.option("--negatives", "negative_count", type=int, default=None)
@click.option("--area-lo", "area_lo", type=float, default=None)
@click.option("--area-hi", "area_hi", type=float, default=None)
@click.option("--area-step", "area_step", type=float, default=None)
def synth(config_file, seed, threads, out_dir, **flags):
    """Generate a synthetic two-texture dataset with ground-truth masks."""
    cfg = _resolved(config_file, threads, seed=seed, **flags)
    from .synth import generate, write_dataset

    bags = generate(cfg.synth_spec())
    out = Path(out_dir)
    write_dataset(bags, out)
    snapshot(cfg, out / _SNAPSHOT_NAME)
    n_pos = sum(b.label for b in bags)
    click.echo(f"wrote {len(bags)} images ({n_pos} positive) to {out}")


_TRAIN_FLAG_KEYS = (
    "learning_rate", "side_lr_scale", "beta1", "beta2", "epsilon", "weight_decay",
    "iterations", "batch_size", "r", "eta_side", "eta_fuse", "plateau_window",
    "plateau_tol", "superpixel_k", "compactness", "sp_iterations",
    "conv_counts", "channels", "kernel_size", "fusion_weights",
)


def _train_options(fn):
    for key in reversed(_TRAIN_FLAG_KEYS):
        flag = "--" + key.replace("_", "-")
        fn = click.option(flag, key, default=None)(fn)
    return fn


@cli.command()
@_common_options
@_train_options
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def train(config_file, seed, threads, data_dir, out_dir, **flags):
    """Train on a dataset directory and write checkpoint + loss log."""
    cfg = _resolved(config_file, threads, seed=seed, **flags)
    _check_weights(cfg)
    from .backbone import build_network
    from .synth import read_dataset
    from .trainer import train as run_training

    bags = read_dataset(data_dir)
    network = build_network(cfg.backbone_config(), seed=cfg.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = run_training(network, bags, cfg.train_config(),
                       checkpoint_path=out / "checkpoint.dwsm")
    log.write_tsv(out / "trainlog.tsv")
    snapshot(cfg, out / _SNAPSHOT_NAME)
    final = log.entries[-1].total if log.entries else float("nan")
    click.echo(
        f"trained {len(log.entries)} iterations on {len(bags)} bags, "
        f"final loss {final:.6f}; checkpoint at {log.checkpoint_path}"
    )


@cli.command()
@_common_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "inputs", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--threshold", type=float, default=None)
def predict(config_file, seed, threads, checkpoint, inputs, out_dir, threshold):
    """Write heatmaps and binary masks for images or dataset directories."""
    cfg = _resolved(config_file, threads, seed=seed, threshold=threshold)
    import numpy as np
    from PIL import Image

    from .backbone import forward, load_checkpoint
    from .evaluation import render_heatmap
    from .losses import predict_mask

    network = load_checkpoint(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    paths: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted((p / "images").glob("*.png")) or sorted(p.glob("*.png")))
        else:
            paths.append(p)
    if not paths:
        raise FileNotFoundError(f"no input images found under {', '.join(inputs)}")

    for path in paths:
        with Image.open(path) as handle:
            image = np.asarray(handle.convert("RGB")).astype(np.float32) / 255.0
        image = image.transpose(2, 0, 1)
        outputs = forward(network, image)
        stem = path.stem
        render_heatmap(outputs.fused_array(), out / f"{stem}_fused.png")
        for t in range(len(outputs.side_maps)):
            render_heatmap(outputs.side_array(t), out / f"{stem}_side{t + 1}.png")
        mask = predict_mask(outputs, cfg.threshold)
        Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(
            out / f"{stem}_mask.png")
    snapshot(cfg, out / _SNAPSHOT_NAME)
    click.echo(f"wrote predictions for {len(paths)} images to {out}")


@cli.command("eval")
@_common_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--threshold", type=float, default=None)
@click.option("--map", "map_name", default="fused",
              help="which output to score: fused or side1..sideT")
def eval_cmd(config_file, seed, threads, checkpoint, data_dir, out_dir, threshold, map_name):
    """Score a checkpoint against a dataset's ground-truth masks."""
    cfg = _resolved(config_file, threads, seed=seed, threshold=threshold)
    from .backbone import load_checkpoint
    from .evaluation import evaluate
    from .synth import read_dataset

    network = load_checkpoint(checkpoint)
    bags = read_dataset(data_dir)
    map_index = None
    if map_name != "fused":
        if not map_name.startswith("side"):
            raise ConfigError(f"--map must be 'fused' or 'side<t>', got {map_name!r}")
        try:
            map_index = int(map_name[4:]) - 1
        except ValueError:
            raise ConfigError(f"bad side output name {map_name!r}") from None
        if not 0 <= map_index < network.config.num_stages:
            raise ConfigError(
                f"{map_name!r} out of range: checkpoint has "
                f"{network.config.num_stages} side outputs")
    report = evaluate(network, bags, threshold=cfg.threshold, map_index=map_index)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_tsv(out / "report.tsv")
    snapshot(cfg, out / _SNAPSHOT_NAME)
    click.echo(report.summary())


@cli.command()
@_common_options
def gradcheck(config_file, seed, threads):
    """Verify tape gradients against finite differences."""
    cfg = _resolved(config_file, threads, seed=seed)
    from .gradcheck import run_suite

    results = run_suite(cfg.seed)
    for result in results:
        click.echo(str(result))
    if not all(r.passed for r in results):
        raise SystemExit(1)


@cli.command()
@_common_options
@click.option("--conv-counts", "conv_counts", default=None)
@click.option("--channels", "channels", default=None)
@click.option("--kernel-size", "kernel_size", type=int, default=None)
@click.option("--fusion-weights", "fusion_weights", default=None)
def rf(config_file, seed, threads, **flags):
    """Print receptive field size and stride of every tapped layer."""
    cfg = _resolved(config_file, threads, seed=seed, **flags)
    from .backbone import receptive_field_report

    click.echo("layer\trf_size\tstride")
    for name, rf_size, stride in receptive_field_report(cfg.backbone_config()):
        click.echo(f"{name}\t{rf_size}\t{stride}")


@cli.command("sweep-ac")
@_common_options
@_train_options
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--grid", required=True, help="comma-separated area-constraint weights")
@click.option("--threshold", type=float, default=None)
def sweep_ac(config_file, seed, threads, data_dir, out_dir, grid, threshold, **flags):
    """Tune each layer's area-constraint weight in isolation.

    For every layer (each side output, then the fusion) and every weight
    in the grid, trains a fresh network in which only that layer carries
    an area constraint, then reports CA/NC F-measures.
    """
    cfg = _resolved(config_file, threads, seed=seed, threshold=threshold, **flags)
    _check_weights(cfg)
    from dataclasses import replace

    from .backbone import build_network
    from .evaluation import evaluate
    from .losses import LossWeights
    from .synth import read_dataset
    from .trainer import train as run_training

    try:
        etas = [float(v) for v in grid.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --grid value {grid!r}: {exc}") from exc

    bags = read_dataset(data_dir)
    base_train = cfg.train_config()
    t_layers = len(cfg.conv_counts)
    layer_names = [f"side{t + 1}" for t in range(t_layers)] + ["fuse"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = ["layer\teta\tf_ca\tf_nc"]
    for layer_i, layer in enumerate(layer_names):
        for eta in etas:
            eta_side = [0.0] * t_layers
            eta_fuse = 0.0
            if layer == "fuse":
                eta_fuse = eta
            else:
                eta_side[layer_i] = eta
            weights = LossWeights(eta_side=tuple(eta_side), eta_fuse=eta_fuse)
            network = build_network(cfg.backbone_config(), seed=cfg.seed)
            run_training(network, bags, replace(base_train, weights=weights))
            report = evaluate(network, bags, threshold=cfg.threshold)
            lines.append(f"{layer}\t{eta!r}\t{report.mean_f_ca!r}\t{report.mean_f_nc!r}")
            click.echo(lines[-1])
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    snapshot(cfg, out / _SNAPSHOT_NAME)


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, FileNotFoundError):
        return 3
    for mod, name in (("synth", "DatasetError"), ("backbone", "CheckpointError"),
                      ("evaluation", "EvaluationError")):
        cls = getattr(sys.modules.get(f"milseg.{mod}"), name, None) \
            if f"milseg.{mod}" in sys.modules else None
        if cls is not None and isinstance(exc, cls):
            return 3
    trainer_mod = sys.modules.get("milseg.trainer")
    if trainer_mod is not None and isinstance(
            exc, getattr(trainer_mod, "TrainingDivergedError")):
        return 4
    return 1


def main(argv=None) -> None:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - map known failures to exit codes
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_code(exc))


if __name__ == "__main__":
    main()
