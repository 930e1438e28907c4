"""Reconstruction quality metrics and the noise robustness benchmark.

All four metrics operate on plain numpy arrays shaped like cube data
(bands on the last axis unless noted) and match straightforward per-pixel /
per-band definitions:

    PSNR  = 10 log10(peak^2 / MSE) over the whole cube
    SAM   = mean_pixels arccos(<a, b> / (||a|| ||b||)), degrees
    RMSE  = sqrt(mean (a - b)^2) over the whole cube
    ERGAS = 100 / ratio * sqrt(mean_bands (RMSE_b / mu_b)^2)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DimensionError
from .hsi import HsiCube, add_awgn, bicubic_upsample, cube_to_nchw, nchw_to_cube

_EPS = 1e-12


def _check(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"metric shapes differ: {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    pred, target = _check(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    if peak is None:
        peak = float(target.max())
    return 10.0 * math.log10(peak * peak / mse)


def sam_metric(pred, target, band_axis: int = -1) -> float:
    """Mean spectral angle in degrees; zero-vs-zero spectra count as 0."""
    pred, target = _check(pred, target)
    pred = np.moveaxis(pred, band_axis, -1).reshape(-1, pred.shape[band_axis])
    target = np.moveaxis(target, band_axis, -1).reshape(-1, target.shape[band_axis])
    dot = np.sum(pred * target, axis=1)
    na = np.sqrt(np.sum(pred * pred, axis=1))
    nb = np.sqrt(np.sum(target * target, axis=1))
    both_zero = (na < _EPS) & (nb < _EPS)
    cosv = np.clip(dot / (np.maximum(na, _EPS) * np.maximum(nb, _EPS)), -1.0, 1.0)
    ang = np.degrees(np.arccos(cosv))
    ang[both_zero] = 0.0
    return float(ang.mean())


def rmse_metric(pred, target) -> float:
    pred, target = _check(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def ergas(pred, target, ratio: float, band_axis: int = -1) -> float:
    """Relative dimensionless global error; ``ratio`` is the spatial scale."""
    pred, target = _check(pred, target)
    pred = np.moveaxis(pred, band_axis, -1).reshape(-1, pred.shape[band_axis])
    target = np.moveaxis(target, band_axis, -1).reshape(-1, target.shape[band_axis])
    mse_b = np.mean((pred - target) ** 2, axis=0)
    mu_b = np.maximum(np.abs(target.mean(axis=0)), _EPS)
    return float(100.0 / ratio * np.sqrt(np.mean(mse_b / (mu_b * mu_b))))


@dataclass
class MetricsReport:
    psnr_db: float
    sam_deg: float
    rmse: float
    ergas: float
    context: dict = field(default_factory=dict)


def score_pair(pred: HsiCube, ref: HsiCube, ratio: float, context=None) -> MetricsReport:
    return MetricsReport(
        psnr_db=psnr(pred.data, ref.data, peak=float(ref.data.max())),
        sam_deg=sam_metric(pred.data, ref.data),
        rmse=rmse_metric(pred.data, ref.data),
        ergas=ergas(pred.data, ref.data, ratio),
        context=dict(context or {}),
    )


def _mean_reports(reports: list[MetricsReport], context) -> MetricsReport:
    return MetricsReport(
        psnr_db=float(np.mean([r.psnr_db for r in reports])),
        sam_deg=float(np.mean([r.sam_deg for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        ergas=float(np.mean([r.ergas for r in reports])),
        context=dict(context or {}),
    )


def model_predictor(model):
    """scene -> reconstructed cube, via the fusion model."""
    def predict(xh: HsiCube, xm: HsiCube) -> HsiCube:
        with ad.no_grad():
            out = model(cube_to_nchw(xh), cube_to_nchw(xm))
        return nchw_to_cube(out.data)
    return predict


def bicubic_predictor(scale: int):
    """scene -> bicubic upsampling of X_h (ignores X_m); the model-free baseline."""
    def predict(xh: HsiCube, xm: HsiCube) -> HsiCube:
        return bicubic_upsample(xh, scale)
    return predict


def evaluate(predict, scenes, ratio: float, context=None) -> MetricsReport:
    """Average metrics of ``predict`` over a scene list."""
    reports = [score_pair(predict(s.xh, s.xm), s.y, ratio) for s in scenes]
    return _mean_reports(reports, context)


def noise_bench(model, scenes, snr_list, base_seed: int, ratio: float,
                context=None) -> list[MetricsReport]:
    """Table of averaged metrics with white noise injected into X_h at each
    SNR (dB; inf = clean).  Noise draws are deterministic in
    (base_seed, snr index, scene index)."""
    predict = model_predictor(model)
    rows = []
    root = np.random.SeedSequence(base_seed)
    snr_seqs = root.spawn(len(list(snr_list)))
    for si, snr_db in enumerate(snr_list):
        scene_seqs = snr_seqs[si].spawn(len(scenes))
        reports = []
        for scene, seq in zip(scenes, scene_seqs):
            xh = add_awgn(scene.xh, snr_db, seed=seq)
            reports.append(score_pair(predict(xh, scene.xm), scene.y, ratio))
        ctx = dict(context or {})
        ctx["snr_db"] = snr_db
        rows.append(_mean_reports(reports, ctx))
    return rows


METRIC_COLUMNS = ("snr_db", "psnr", "sam", "rmse", "ergas")


def write_metrics_csv(path, reports: list[MetricsReport], config_hash: str = "") -> None:
    """snr_db,psnr,sam,rmse,ergas rows; a clean row uses snr_db=inf."""
    with open(Path(path), "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in reports:
            w.writerow([
                repr(float(r.context.get("snr_db", math.inf))),
                repr(r.psnr_db), repr(r.sam_deg), repr(r.rmse), repr(r.ergas),
            ])


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(Path(path), newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        rows.append({k: float(v) for k, v in row.items()})
    return rows
