"""Command-line entry point: ``diffgan {generate,train-denoiser,train-gan,detect,benchmark}``.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure
(divergence, I/O).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .bundle import load_bundle
from .config import SCALES, ExperimentConfig, config_from_dict, dump_config, load_config
from .data import ANOMALY_KINDS, DATASET_NAMES, load_dataset, save_dataset
from .errors import RuntimeFailure, ValidationError
from .nn_core import RngStream

log = logging.getLogger("diffgan")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="sectioned key = value config file")
    common.add_argument("--seed", type=_seed, help="random seed (overrides [experiment] seed)")
    common.add_argument("--out", type=Path, help="output directory (overrides [experiment] out)")
    common.add_argument("--scale", choices=SCALES, help="preset: desk (T=2000, short training) or paper")
    common.add_argument("--timesteps", type=_positive, help="series length for generated data")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="diffgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write the synthetic benchmark datasets")
    g.add_argument("--kinds", nargs="+", choices=ANOMALY_KINDS, help="subset of anomaly kinds")

    td = sub.add_parser("train-denoiser", parents=[common], help="train the noise predictor on a dataset")
    td.add_argument("--data", type=Path, required=True, help="dataset CSV")

    tg = sub.add_parser("train-gan", parents=[common], help="train generator and discriminator")
    tg.add_argument("--data", type=Path, required=True, help="dataset CSV")
    tg.add_argument("--checkpoint", type=Path, required=True, help="denoiser checkpoint from train-denoiser")

    d = sub.add_parser("detect", parents=[common], help="score a dataset and label anomalies")
    d.add_argument("--bundle", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--mode", choices=("diffgan", "diffusion"), default="diffgan")
    d.add_argument("--steps", type=int, help="fixed diffusion steps M for --mode diffusion")
    d.add_argument("--threshold", type=float, help="explicit threshold; default selects one on the validation split")
    d.add_argument("--split", choices=("test", "val", "all"), default="test")
    d.add_argument("--emit-curve", action="store_true", help="also sweep fixed steps and write curve.csv")
    d.add_argument("--curve-steps", type=int, nargs="+", help="steps for --emit-curve (default from config)")

    b = sub.add_parser("benchmark", parents=[common], help="train and compare all methods on all datasets")
    b.add_argument("--seeds", type=_seed, nargs="+", help="several seeds; results are averaged in the table")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.scale)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    if args.out is not None:
        cfg.experiment.out = str(args.out)
    if args.timesteps is not None:
        cfg.data.timesteps = args.timesteps
    return cfg.validate()


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.experiment.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_history(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["epoch"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"{what} not found: {path}")
    return path


def cmd_generate(args, cfg: ExperimentConfig) -> None:
    from .pipeline import make_dataset
    out = _out_dir(cfg)
    for kind in args.kinds or cfg.data.kinds:
        ds = make_dataset(cfg, kind, cfg.experiment.seed)
        path = out / f"{DATASET_NAMES[kind]}.csv"
        save_dataset(ds, path)
        log.info("wrote %s (%d x %d, %d anomalous points)", path, ds.T, ds.D, int(ds.labels.sum()))
    (out / "config.ini").write_text(dump_config(cfg))


def cmd_train_denoiser(args, cfg: ExperimentConfig) -> None:
    from .pipeline import fit_bundle
    ds = load_dataset(_need(args.data, "dataset"))
    bundle, hist = fit_bundle(ds, cfg, cfg.experiment.seed, with_gan=False, strict=False)
    out = _out_dir(cfg)
    bundle.save(out / "denoiser.dgb")
    _write_history(hist["denoiser"], out / "denoiser_history.csv")
    log.info("wrote %s", out / "denoiser.dgb")


def cmd_train_gan(args, cfg: ExperimentConfig) -> None:
    from .pipeline import add_controller
    ds = load_dataset(_need(args.data, "dataset"))
    bundle = load_bundle(_need(args.checkpoint, "denoiser checkpoint"))
    if args.config is None and args.scale is None:
        cfg = replace(config_from_dict(bundle.config), experiment=cfg.experiment)
    nds = replace(ds, values=bundle.stats.transform(ds.values))
    bundle, hist = add_controller(bundle, nds, cfg, cfg.experiment.seed)
    out = _out_dir(cfg)
    bundle.save(out / "bundle.dgb")
    _write_history(hist, out / "gan_history.csv")
    log.info("wrote %s", out / "bundle.dgb")


def cmd_detect(args, cfg: ExperimentConfig) -> None:
    from .pipeline import detect_dataset
    bundle = load_bundle(_need(args.bundle, "bundle"))
    ds = load_dataset(_need(args.data, "dataset"))
    if args.mode == "diffusion" and (args.steps is None or args.steps < 1):
        raise ValidationError("--mode diffusion needs --steps >= 1")
    if args.threshold is not None and not args.threshold >= 0:
        raise ValidationError(f"--threshold must be >= 0, got {args.threshold}")
    snap = config_from_dict(bundle.config)
    if args.config is not None:
        snap.detect = cfg.detect
    snap.experiment = cfg.experiment
    seed = cfg.experiment.seed if args.seed is not None else bundle.seed
    rng = RngStream(seed, ("detect", args.mode, str(args.steps or 0)))
    report = detect_dataset(bundle, ds, snap, args.mode, args.steps, rng, args.threshold, args.split)
    out = _out_dir(cfg)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    if report.metrics is not None:
        m = report.metrics
        log.info("%s: threshold %.6g  P %.4f  R %.4f  F1 %.4f", report.mode, report.threshold, m.precision,
                 m.recall, m.f1)
    if args.emit_curve:
        with (out / "curve.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["steps", "f1"])
            for m in args.curve_steps or snap.detect.sweep_steps:
                rep = detect_dataset(bundle, ds, snap, "diffusion", m, RngStream(seed, ("detect", "diffusion", str(m))),
                                     None, args.split)
                w.writerow([m, repr(rep.metrics.f1 if rep.metrics else 0.0)])
                log.info("curve: steps %d F1 %.4f", m, rep.metrics.f1 if rep.metrics else 0.0)


def cmd_benchmark(args, cfg: ExperimentConfig) -> None:
    from .pipeline import run_benchmark
    out = _out_dir(cfg)
    (out / "config.ini").write_text(dump_config(cfg))
    run_benchmark(cfg, args.seeds, out)
    sys.stdout.write((out / "benchmark.txt").read_text())


COMMANDS = {"generate": cmd_generate, "train-denoiser": cmd_train_denoiser, "train-gan": cmd_train_gan,
            "detect": cmd_detect, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    logging.captureWarnings(True)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        log.error("%s", exc)
        return 2
    except (RuntimeFailure, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
