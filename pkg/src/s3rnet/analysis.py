"""Representation analyses: channel energy concentration and CKA similarity.

``energy_distribution`` summarizes how unevenly a feature map spends its
energy across channels (sorted normalized energies, top-fraction mass, Gini
coefficient).  ``cka`` is linear centered kernel alignment between two
activation matrices, computed through n x n Gram matrices so wide layers
stay cheap.  ``branch_cka_matrix`` compares every residual-group output of
the four branches on a probe batch.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .hsi import stack_cubes_nchw


@dataclass
class EnergyDistribution:
    energy: np.ndarray    # sorted descending, sums to 1
    channels: np.ndarray  # original channel index per rank
    gini: float

    def top_mass(self, fraction: float) -> float:
        """Energy share of the ceil(fraction * C) strongest channels."""
        k = max(1, int(np.ceil(fraction * len(self.energy))))
        return float(self.energy[:k].sum())


def gini_coefficient(p: np.ndarray) -> float:
    """Gini of a nonnegative distribution; 0 = uniform, (C-1)/C = one-hot."""
    p = np.sort(np.asarray(p, dtype=np.float64))
    c = len(p)
    total = p.sum()
    if total <= 0:
        return 0.0
    ranks = np.arange(1, c + 1)
    return float((2.0 * np.sum(ranks * p)) / (c * total) - (c + 1) / c)


def energy_distribution(fused) -> EnergyDistribution:
    """Per-channel energies of an (N, C, H, W) activation, normalized to sum 1
    and sorted descending.  All-zero input degrades to uniform with a warning."""
    data = fused.data if isinstance(fused, ad.Tensor) else np.asarray(fused)
    if data.ndim != 4:
        raise UsageError(f"energy_distribution expects (N, C, H, W), got {data.shape}")
    e = np.sum(data.astype(np.float64) ** 2, axis=(0, 2, 3))
    total = e.sum()
    if total <= 0:
        warnings.warn("all-zero activations; reporting a uniform energy distribution")
        e = np.full(data.shape[1], 1.0 / data.shape[1])
        total = 1.0
    e = e / total
    order = np.argsort(-e, kind="stable")
    return EnergyDistribution(energy=e[order], channels=order, gini=gini_coefficient(e))


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between activation matrices (n, p1) and (n, p2):
    ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F) on column-centered data."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise UsageError(f"cka expects 2-D activations, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise UsageError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise UsageError("cka needs at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    kx = xc @ xc.T
    ky = yc @ yc.T
    nx = np.linalg.norm(kx)
    ny = np.linalg.norm(ky)
    if nx == 0.0 or ny == 0.0:
        raise UsageError("cka is undefined for zero-variance activations")
    return float(np.sum(kx * ky) / (nx * ny))


# ---------------------------------------------------------------------------
# model probes
# ---------------------------------------------------------------------------

def capture_activations(model, xh, xm) -> dict[str, np.ndarray]:
    """One recorded forward pass; returns layer name -> activation snapshot."""
    capture: dict[str, np.ndarray] = {}
    with ad.no_grad():
        model(xh, xm, capture=capture)
    return capture


def fused_energy(model, scenes) -> EnergyDistribution:
    """Energy distribution of the fusion-block output over a scene batch."""
    xh = stack_cubes_nchw([s.xh for s in scenes])
    xm = stack_cubes_nchw([s.xm for s in scenes])
    return energy_distribution(capture_activations(model, xh, xm)["ssawb.fused"])


def _group_labels(capture: dict) -> list[str]:
    labels = [k for k in capture if len(k) > 2 and k[0] in "qkvz" and k[1:2] == "." and k[2] == "g"]
    order = {"q": 0, "k": 1, "v": 2, "z": 3}
    return sorted(labels, key=lambda s: (order[s[0]], int(s.split(".g")[1])))


def branch_cka_matrix(model, scenes) -> tuple[list[str], np.ndarray]:
    """CKA between all residual-group outputs, probed on a scene batch.

    Activations flatten to (n_scenes, C*H*W); the matrix is symmetric with a
    unit diagonal, labeled q.g0 ... z.g{N_Z-1}.
    """
    if len(scenes) < 2:
        raise UsageError("branch_cka_matrix needs at least 2 probe scenes")
    xh = stack_cubes_nchw([s.xh for s in scenes])
    xm = stack_cubes_nchw([s.xm for s in scenes])
    capture = capture_activations(model, xh, xm)
    labels = _group_labels(capture)
    flats = [capture[k].reshape(len(scenes), -1) for k in labels]
    n = len(labels)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = cka(flats[i], flats[j])
    return labels, mat


def cross_branch_mean(labels: list[str], mat: np.ndarray) -> float:
    """Mean CKA over pairs of layers living in different branches."""
    vals = [
        mat[i, j]
        for i in range(len(labels))
        for j in range(i + 1, len(labels))
        if labels[i][0] != labels[j][0]
    ]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# CSV emitters (figures ship as data series)
# ---------------------------------------------------------------------------

def write_energy_csv(path, dist: EnergyDistribution, config_hash: str = "") -> None:
    """rank,channel,energy rows, strongest channel first."""
    with open(Path(path), "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(("rank", "channel", "energy"))
        for rank, (ch, e) in enumerate(zip(dist.channels, dist.energy)):
            w.writerow([rank, int(ch), repr(float(e))])


def write_cka_csv(path, labels: list[str], mat: np.ndarray, config_hash: str = "") -> None:
    """Square CKA matrix with header labels on both axes."""
    with open(Path(path), "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["layer"] + labels)
        for i, lab in enumerate(labels):
            w.writerow([lab] + [repr(float(v)) for v in mat[i]])
