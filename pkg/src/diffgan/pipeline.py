"""End-to-end orchestration: data, training, scoring and the benchmark table."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .bundle import ModelBundle
from .config import ExperimentConfig
from .controller import StepMapper, train_gan
from .data import DATASET_NAMES, AnomalySpec, SeriesDataset, generate_synthetic, make_windows, normalize
from .detect import (Reconstructor, best_f1_threshold, detect_scores, diffgan_reconstructor,
                     fixed_step_reconstructor, score_series, select_threshold)
from .diffusion import build_schedule, train_denoiser
from .errors import ConfigurationError
from .nn_core import RngStream

log = logging.getLogger(__name__)

# published reference values (P, R, F1) at T = 50,000, shown next to measured results
REFERENCE = {
    ("global", "Diffusion-20"): (0.9605, 0.8056, 0.8762),
    ("global", "Diffusion-50"): (0.9321, 0.8012, 0.8617),
    ("global", "Diffusion-80"): (0.9483, 0.7838, 0.8582),
    ("global", "DiffGAN"): (0.9576, 0.8274, 0.8877),
    ("contextual", "Diffusion-20"): (0.9194, 0.5963, 0.7234),
    ("contextual", "Diffusion-50"): (0.8841, 0.6251, 0.7324),
    ("contextual", "Diffusion-80"): (0.8936, 0.6077, 0.7234),
    ("contextual", "DiffGAN"): (0.8985, 0.6385, 0.7465),
    ("seasonal", "Diffusion-20"): (0.9629, 0.7098, 0.8172),
    ("seasonal", "Diffusion-50"): (0.9768, 0.7149, 0.8256),
    ("seasonal", "Diffusion-80"): (0.9701, 0.7194, 0.8261),
    ("seasonal", "DiffGAN"): (0.9692, 0.7324, 0.8343),
    ("shapelet", "Diffusion-20"): (0.6013, 0.4055, 0.4843),
    ("shapelet", "Diffusion-50"): (0.7608, 0.3501, 0.4795),
    ("shapelet", "Diffusion-80"): (0.7235, 0.3730, 0.4922),
    ("shapelet", "DiffGAN"): (0.7265, 0.4357, 0.5447),
    ("trend", "Diffusion-20"): (0.7708, 0.4984, 0.6054),
    ("trend", "Diffusion-50"): (0.7943, 0.4189, 0.5485),
    ("trend", "Diffusion-80"): (0.2592, 0.3845, 0.3097),
    ("trend", "DiffGAN"): (0.6842, 0.4568, 0.5478),
}

RESULT_COLUMNS = ["seed", "dataset", "method", "threshold", "precision", "recall", "f1", "best_f1",
                  "val_mean_step", "test_mean_step", "ref_precision", "ref_recall", "ref_f1"]
CURVE_COLUMNS = ["seed", "dataset", "steps", "f1", "best_f1"]


def make_dataset(cfg: ExperimentConfig, kind: str, seed: int) -> SeriesDataset:
    d = cfg.data
    return generate_synthetic(AnomalySpec(kind, ratio=d.ratio), d.timesteps, d.dims, seed, noise_std=d.noise_std)


def fit_bundle(dataset: SeriesDataset, cfg: ExperimentConfig, seed: int, with_gan: bool = True,
               strict: bool = True) -> tuple[ModelBundle, dict]:
    """Normalise, window the training split, train the denoiser and (optionally) the controller."""
    nds, stats = normalize(dataset, strict=strict)
    train = make_windows(nds.split("train")[0], cfg.data.window, cfg.data.stride)
    s = cfg.schedule
    schedule = build_schedule(s.steps, s.beta_start, s.beta_end, s.shape)
    t0 = time.perf_counter()
    den, den_hist = train_denoiser(train, cfg.denoiser_config(dataset.D), schedule, cfg.denoiser_optim(), seed)
    log.info("%s: denoiser trained in %.1fs (%d epochs)", dataset.name, time.perf_counter() - t0, len(den_hist))
    bundle = ModelBundle(den, stats, cfg.snapshot(), seed=seed)
    hist = {"denoiser": den_hist}
    if with_gan:
        bundle, hist["gan"] = add_controller(bundle, nds, cfg, seed)
    return bundle, hist


def add_controller(bundle: ModelBundle, nds: SeriesDataset, cfg: ExperimentConfig, seed: int):
    train = make_windows(nds.split("train")[0], cfg.data.window, cfg.data.stride)
    mapper = StepMapper.from_schedule(bundle.denoiser.schedule, cfg.gan.mapper)
    t0 = time.perf_counter()
    models, hist = train_gan(train, cfg.generator_config(nds.D), cfg.discriminator_config(nds.D), bundle.denoiser,
                             mapper, cfg.gan_train_config(), seed)
    log.info("%s: controller trained in %.1fs", nds.name, time.perf_counter() - t0)
    bundle.gan = models
    bundle.config = cfg.snapshot()
    return bundle, hist


def reconstructor(bundle: ModelBundle, mode: str, steps: int | None = None, variant: str = "ddpm") -> Reconstructor:
    if mode == "diffgan":
        if bundle.gan is None:
            raise ConfigurationError("bundle has no trained generator/discriminator; run train-gan first")
        return diffgan_reconstructor(bundle.gan, bundle.denoiser, variant)
    if mode == "diffusion":
        N = bundle.denoiser.schedule.N
        if steps is None or not 1 <= steps <= N:
            raise ConfigurationError(f"--steps must lie in [1, {N}] for the diffusion baseline, got {steps}")
        return fixed_step_reconstructor(bundle.denoiser, steps, variant)
    raise ConfigurationError(f"unknown mode {mode!r}")


@dataclass
class MethodResult:
    method: str
    threshold: float
    precision: float
    recall: float
    f1: float
    best_f1: float
    val_mean_step: float
    test_mean_step: float
    test_scores: np.ndarray


def _threshold(nds: SeriesDataset, recon: Reconstructor, cfg: ExperimentConfig, rng: RngStream):
    """Select the threshold on the validation split; returns ``(threshold, val_scores)``."""
    w, l, det = cfg.data.window, cfg.detect_stride, cfg.detect
    val, val_y = nds.split("val")
    sv = score_series(val, recon, w, l, rng.spawn("val"), det.batch_size, det.aggregate)
    if det.threshold == "best_f1":
        if val_y[~np.isnan(sv.scores)].any():
            return select_threshold(sv.scores, val_y, "best_f1"), sv
        warnings.warn(f"{nds.name}: no labelled anomalies in the validation split; "
                      f"falling back to the {det.quantile} quantile of training scores", RuntimeWarning)
    sn = score_series(nds.split("train")[0], recon, w, l, rng.spawn("train"), det.batch_size, det.aggregate)
    return select_threshold(sv.scores, strategy="quantile", q=det.quantile, normal_scores=sn.scores), sv


def evaluate_method(nds: SeriesDataset, recon: Reconstructor, cfg: ExperimentConfig, rng: RngStream,
                    method: str) -> MethodResult:
    """Threshold on validation scores, report point-wise metrics on the test split."""
    det = cfg.detect
    thr, sv = _threshold(nds, recon, cfg, rng)
    test, test_y = nds.split("test")
    st = score_series(test, recon, cfg.data.window, cfg.detect_stride, rng.spawn("test"), det.batch_size,
                      det.aggregate)
    rep = detect_scores(st, thr, test_y, method, det.point_adjust)
    keep = ~np.isnan(st.scores)
    best = best_f1_threshold(st.scores[keep], test_y[keep])[1] if test_y[keep].any() else 0.0
    mean_step = lambda s: float(np.mean(s.window_steps)) if s.window_steps is not None else math.nan
    m = rep.metrics
    return MethodResult(method, thr, m.precision, m.recall, m.f1, best, mean_step(sv), mean_step(st), st.scores)


def run_dataset(cfg: ExperimentConfig, kind: str, seed: int, sweep: bool = False,
                bundle_dir: Path | None = None) -> tuple[list[dict], list[dict]]:
    ds = make_dataset(cfg, kind, seed)
    name = DATASET_NAMES[kind]
    bundle, _ = fit_bundle(ds, cfg, seed)
    if bundle_dir is not None:
        bundle_dir.mkdir(parents=True, exist_ok=True)
        bundle.save(bundle_dir / f"{name}_seed{seed}.dgb")
    nds, _ = normalize(ds)
    variant = cfg.detect.variant
    rows = []
    methods = [(f"Diffusion-{m}", "diffusion", m) for m in cfg.detect.baseline_steps] + [("DiffGAN", "diffgan", None)]
    with torch.no_grad():
        for label, mode, steps in methods:
            res = evaluate_method(nds, reconstructor(bundle, mode, steps, variant), cfg,
                                  RngStream(seed, ("score", kind, label)), label)
            ref = REFERENCE.get((name, label), (math.nan,) * 3)
            rows.append({"seed": seed, "dataset": name, "method": label, "threshold": res.threshold,
                         "precision": res.precision, "recall": res.recall, "f1": res.f1, "best_f1": res.best_f1,
                         "val_mean_step": res.val_mean_step, "test_mean_step": res.test_mean_step,
                         "ref_precision": ref[0], "ref_recall": ref[1], "ref_f1": ref[2]})
            log.info("%s seed %d %-12s F1 %.4f best %.4f", name, seed, label, res.f1, res.best_f1)
        curve = []
        if sweep:
            for m in cfg.detect.sweep_steps:
                res = evaluate_method(nds, reconstructor(bundle, "diffusion", m, variant), cfg,
                                      RngStream(seed, ("score", kind, f"Diffusion-{m}")), f"Diffusion-{m}")
                curve.append({"seed": seed, "dataset": name, "steps": m, "f1": res.f1, "best_f1": res.best_f1})
    return rows, curve


def run_benchmark(cfg: ExperimentConfig, seeds=None, out: Path | None = None,
                  sweep_kinds=("global_point",)) -> tuple[list[dict], list[dict]]:
    seeds = [cfg.experiment.seed] if seeds is None else list(seeds)
    rows, curve = [], []
    for seed in seeds:
        for kind in cfg.data.kinds:
            t0 = time.perf_counter()
            r, c = run_dataset(cfg, kind, seed, kind in sweep_kinds,
                               None if out is None else Path(out) / "bundles")
            rows += r
            curve += c
            log.info("%s seed %d done in %.1fs", DATASET_NAMES[kind], seed, time.perf_counter() - t0)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(rows, RESULT_COLUMNS, out / "benchmark.csv")
        (out / "benchmark.txt").write_text(format_table(rows))
        if curve:
            write_csv(curve, CURVE_COLUMNS, out / "curve.csv")
    return rows, curve


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(rows: list[dict], columns: list[str], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def format_table(rows: list[dict]) -> str:
    """Aligned text table; seeds averaged. ``ref`` columns are published values, not measurements."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["method"]), []).append(r)
    head = ["dataset", "method", "P", "R", "F1", "best-F1", "mean step", "ref P", "ref R", "ref F1"]
    lines = []
    for (ds, method), rs in groups.items():
        mean = lambda k: float(np.mean([x[k] for x in rs]))
        step = mean("test_mean_step")
        ref = [rs[0]["ref_precision"], rs[0]["ref_recall"], rs[0]["ref_f1"]]
        lines.append([ds, method, f"{mean('precision'):.4f}", f"{mean('recall'):.4f}", f"{mean('f1'):.4f}",
                      f"{mean('best_f1'):.4f}", "" if math.isnan(step) else f"{step:.1f}",
                      *("" if math.isnan(v) else f"{v:.4f}" for v in ref)])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
    fmt = lambda cells: "  ".join(c.ljust(wd) if i < 2 else c.rjust(wd) for i, (c, wd) in enumerate(zip(cells, widths)))
    seeds = sorted({r["seed"] for r in rows})
    out = [fmt(head), "  ".join("-" * wd for wd in widths), *map(fmt, lines),
           f"(mean over seeds {seeds}; ref columns are published reference values at T = 50,000)"]
    return "\n".join(out) + "\n"


def detect_dataset(bundle: ModelBundle, dataset: SeriesDataset, cfg: ExperimentConfig, mode: str,
                   steps: int | None, rng: RngStream, threshold: float | None = None, split: str = "test"):
    """Score ``split`` of a raw dataset with the bundle's own normalisation.

    Without an explicit ``threshold`` one is selected on the validation split
    using the configured strategy.
    """
    nds = replace(dataset, values=bundle.stats.transform(dataset.values))
    recon = reconstructor(bundle, mode, steps, cfg.detect.variant)
    det = cfg.detect
    label = "DiffGAN" if mode == "diffgan" else f"Diffusion-{steps}"
    with torch.no_grad():
        if threshold is None:
            threshold, _ = _threshold(nds, recon, cfg, rng)
        values, labels = (nds.values, nds.labels) if split == "all" else nds.split(split)
        scores = score_series(values, recon, bundle.window, cfg.detect_stride, rng.spawn(split), det.batch_size,
                              det.aggregate)
    report = detect_scores(scores, threshold, labels, label, det.point_adjust)
    report.extra["split"] = split
    if labels.any():
        keep = ~np.isnan(scores.scores)
        report.extra["best_f1"] = best_f1_threshold(scores.scores[keep], labels[keep])[1]
    if scores.window_steps is not None:
        report.extra["mean_step"] = float(np.mean(scores.window_steps))
    return report
