"""Loss, optimizer, schedule and the training loop.

The objective is mean absolute error plus a spectral-angle penalty (mean
per-pixel angle between predicted and reference spectra, in radians)
weighted by ``sam_weight``.  Optimization is plain bias-corrected Adam with
per-epoch cosine annealing of the learning rate.  Every source of
randomness (batch order, augmentation) comes from one seeded generator
whose state rides along in checkpoints, so an interrupted run resumed from
disk reproduces the uninterrupted run loss-for-loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DimensionError, NumericalError, UsageError
from .hsi import HsiCube, augment, cube_to_nchw
from .metrics import psnr, sam_metric

SAM_NORM_EPS = 1e-8     # clamp on squared spectrum norms
SAM_COS_MARGIN = 1e-6   # keeps arccos differentiable at float32


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 4
    lr0: float = 1e-4
    sam_weight: float = 0.1
    seed: int = 0
    checkpoint_interval: int = 0    # epochs between checkpoints; 0 = final only
    augment: bool = True
    crop: int | None = None         # HR crop size for augmentation, multiple of scale

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if self.sam_weight < 0:
            raise ConfigError("sam_weight must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _check_loss_shapes(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"loss shapes differ: {pred.shape} vs {target.shape}")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_loss_shapes(pred, target)
    return ad.tmean(ad.absolute(ad.sub(pred, target)))


def sam_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean per-pixel spectral angle in radians over NCHW tensors (bands on
    axis 1).  Squared norms are clamped at SAM_NORM_EPS and the cosine is
    clamped to +-(1 - SAM_COS_MARGIN) so the gradient stays finite."""
    _check_loss_shapes(pred, target)
    dot = ad.tsum(ad.mul(pred, target), axis=1)
    na = ad.sqrt(ad.clamp(ad.tsum(ad.mul(pred, pred), axis=1), lo=SAM_NORM_EPS))
    nb = ad.sqrt(ad.clamp(ad.tsum(ad.mul(target, target), axis=1), lo=SAM_NORM_EPS))
    cosv = ad.clamp(ad.div(dot, ad.mul(na, nb)),
                    lo=-1.0 + SAM_COS_MARGIN, hi=1.0 - SAM_COS_MARGIN)
    return ad.tmean(ad.arccos(cosv))


def fusion_loss(pred: Tensor, target: Tensor, sam_weight: float = 0.1) -> Tensor:
    """L1 + sam_weight * mean spectral angle (radians)."""
    loss = l1_loss(pred, target)
    if sam_weight:
        loss = ad.add(loss, ad.scale(sam_loss(pred, target), sam_weight))
    return loss


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params},
            v={name: np.zeros_like(t.data) for name, t in params},
        )


def adam_step(params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, using populated ``.grad``s."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params:
        if p.grad is None:
            raise UsageError(f"adam_step: parameter {name} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * epoch / total_epochs)) / 2, annealed to 0."""
    if not 0 <= epoch < total_epochs:
        raise UsageError(f"epoch {epoch} outside schedule [0, {total_epochs})")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    l1: float
    sam: float
    val_psnr: float
    val_sam: float


LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_psnr", "val_sam")


def _as_triples(scenes) -> list[tuple[HsiCube, HsiCube, HsiCube]]:
    out = []
    for s in scenes:
        if isinstance(s, tuple):
            xh, xm, y = s
        else:
            xh, xm, y = s.xh, s.xm, s.y
        out.append((xh, xm, y))
    return out


def validate_model(model, scenes) -> tuple[float, float]:
    """(mean PSNR dB, mean SAM degrees) over scenes, peak per reference cube."""
    triples = _as_triples(scenes)
    uniform = len({(xh.data.shape, xm.data.shape) for xh, xm, _ in triples}) == 1
    with ad.no_grad():
        if uniform:
            xh_t = np.stack([cube_to_nchw(xh)[0] for xh, _, _ in triples])
            xm_t = np.stack([cube_to_nchw(xm)[0] for _, xm, _ in triples])
            preds = model(xh_t, xm_t).data
        else:
            preds = [model(cube_to_nchw(xh), cube_to_nchw(xm)).data[0]
                     for xh, xm, _ in triples]
    psnrs, sams = [], []
    for i, (_, _, y) in enumerate(triples):
        pred_cube = HsiCube(np.ascontiguousarray(preds[i].transpose(1, 2, 0)))
        psnrs.append(psnr(pred_cube.data, y.data, peak=float(y.data.max())))
        sams.append(sam_metric(pred_cube.data, y.data))
    return float(np.mean(psnrs)), float(np.mean(sams))


def fit(model, scenes, cfg: TrainConfig, *, val_scenes=None, out_dir=None,
        resume_from=None, config_hash: str = "", log_name: str = "log.csv") -> list[EpochRecord]:
    """Train ``model`` on aligned (X_h, X_m, Y) scenes.

    Writes an append-only CSV log (epoch, lr, train_loss, val_psnr, val_sam)
    and periodic checkpoints into ``out_dir`` when given.  With
    ``resume_from`` pointing at a checkpoint saved by this loop, training
    continues exactly where it stopped (optimizer moments, RNG state and the
    epoch counter all round-trip through the file).
    """
    triples = _as_triples(scenes)
    if not triples:
        raise UsageError("fit: empty dataset")
    val_triples = _as_triples(val_scenes) if val_scenes is not None else triples
    scale = model.config.scale
    params = model.named_params()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        for name, p in params:
            p.data[...] = ck.tensors[name]
        for name, _ in params:
            state.m[name][...] = ck.tensors[f"opt.m.{name}"]
            state.v[name][...] = ck.tensors[f"opt.v.{name}"]
        state.step = int(ck.meta["adam_step"])
        start_epoch = int(ck.meta["epoch_next"])
        rng.bit_generator.state = ck.meta["rng_state"]

    out_path = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_path = out_path / log_name
        if start_epoch == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                if config_hash:
                    fh.write(f"# config_hash={config_hash}\n")
                csv.writer(fh).writerow(LOG_COLUMNS)

    def save(tag: str, epoch_next: int):
        if out_path is None:
            return
        extra = {f"opt.m.{k}": v for k, v in state.m.items()}
        extra.update({f"opt.v.{k}": v for k, v in state.v.items()})
        meta = {
            "adam_step": state.step,
            "epoch_next": epoch_next,
            "rng_state": rng.bit_generator.state,
            "train_config": asdict(cfg),
            "config_hash": config_hash,
        }
        save_checkpoint(out_path / tag, model, extra_tensors=extra, meta=meta)

    n = len(triples)
    history: list[EpochRecord] = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        order = rng.permutation(n)
        losses, l1s, sams = [], [], []
        for b0 in range(0, n, cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            xs_h, xs_m, ys = [], [], []
            for idx in batch:
                xh, xm, y = triples[idx]
                if cfg.augment:
                    xh, xm, y = augment(xh, xm, y, rng, scale, crop_size=cfg.crop)
                xs_h.append(cube_to_nchw(xh)[0])
                xs_m.append(cube_to_nchw(xm)[0])
                ys.append(cube_to_nchw(y)[0])
            xh_t = Tensor(np.stack(xs_h))
            xm_t = Tensor(np.stack(xs_m))
            y_t = Tensor(np.stack(ys))

            pred = model(xh_t, xm_t)
            l1 = l1_loss(pred, y_t)
            loss = l1
            sam = None
            if cfg.sam_weight:
                sam = sam_loss(pred, y_t)
                loss = ad.add(l1, ad.scale(sam, cfg.sam_weight))
            if not np.isfinite(loss.data):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, batch index {b0 // cfg.batch_size}"
                )
            ad.backward(loss)
            adam_step(params, state, lr)
            model.zero_grads()
            losses.append(float(loss.data))
            l1s.append(float(l1.data))
            sams.append(float(sam.data) if sam is not None else 0.0)

        val_psnr, val_sam = validate_model(model, val_triples)
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(losses)),
            l1=float(np.mean(l1s)),
            sam=float(np.mean(sams)),
            val_psnr=val_psnr,
            val_sam=val_sam,
        )
        history.append(rec)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [rec.epoch, repr(rec.lr), repr(rec.train_loss),
                     repr(rec.val_psnr), repr(rec.val_sam)]
                )
        if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            save(f"ckpt_ep{epoch + 1:05d}.ckpt", epoch + 1)

    save("last.ckpt", cfg.epochs)
    return history
