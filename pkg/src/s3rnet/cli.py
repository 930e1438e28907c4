"""Command line front end.

    s3rnet generate    synthesize a dataset of aligned (Y, X_h, X_m) scenes
    s3rnet train       train a model on a generated dataset
    s3rnet eval        metrics of a checkpoint on a dataset
    s3rnet baseline    metrics of the model-free bicubic reference
    s3rnet bench-noise metrics under white noise injected into X_h
    s3rnet analyze     channel energy distribution or branch CKA matrix

Global flags: --config PATH (JSON with {model, train, data, run} sections),
--seed, --out DIR, --threads N (or S3RNET_THREADS).  Flags override the
config file.  Every run echoes its merged config and embeds its hash in all
output files.

Exit codes: 0 ok, 2 config/usage error, 3 artifact error, 4 numerical or
shape failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s3rnet", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", metavar="DIR", help="output directory (default: run.out or '.')")
    p.add_argument("--threads", type=int,
                   help="BLAS thread cap (default: env S3RNET_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a scene dataset")
    g.add_argument("--scenes", type=int, help="number of scenes")
    g.add_argument("--size", type=int, help="HR spatial extent")
    g.add_argument("--bands", type=int, help="hyperspectral band count")
    g.add_argument("--msi-bands", type=int, help="multispectral band count")
    g.add_argument("--scale", type=int, help="HR/LR spatial ratio")

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True, metavar="DIR")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--resume", metavar="CKPT", help="resume from a checkpoint")

    for name, extra in (("eval", ()), ("bench-noise", ("snr",)), ("analyze", ("mode",))):
        s = sub.add_parser(name)
        s.add_argument("--checkpoint", required=True, metavar="CKPT")
        s.add_argument("--data", required=True, metavar="DIR")
        if "snr" in extra:
            s.add_argument("--snr", default="inf,35,15",
                           help="comma-separated SNR dB list; 'inf' = clean")
        if "mode" in extra:
            s.add_argument("mode", choices=("energy", "cka"))

    b = sub.add_parser("baseline", help="bicubic-upsampling reference metrics")
    b.add_argument("--data", required=True, metavar="DIR")

    return p


def _apply_threads(args) -> None:
    n = args.threads
    if n is None:
        env = os.environ.get("S3RNET_THREADS")
        n = int(env) if env else None
    if n is not None and n >= 1:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_run_config(args, flag_overrides: dict | None = None):
    # imports are deferred so thread caps land before numpy starts its pools
    from .config import RunConfig
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.run.out = args.out
    if args.threads is not None:
        cfg.run.threads = args.threads
    for key, value in (flag_overrides or {}).items():
        section, name = key.split(".")
        if value is not None:
            setattr(getattr(cfg, section), name, value)
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.run.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    import numpy as np
    from .config import DataSection
    from .errors import ConfigError
    from .hsc import file_sha256, save_scene
    from .hsi import DegradationConfig, SyntheticSceneSpec, make_scene_triple

    cfg = _load_run_config(args, {
        "data.scenes": args.scenes,
        "data.size": args.size,
        "data.bands": args.bands,
        "data.msi_bands": args.msi_bands,
        "data.scale": args.scale,
    })
    # re-validate after flag overrides
    DataSection(**{k: getattr(cfg.data, k) for k in vars(cfg.data)})
    data = cfg.data
    out = _out_dir(cfg)
    chash = cfg.config_hash()
    cfg.echo(out)

    deg = DegradationConfig.for_scale(data.scale, data.bands, data.msi_bands)
    seeds = np.random.SeedSequence(cfg.run.seed).generate_state(data.scenes, dtype=np.uint64)
    manifest = {"config_hash": chash, "seed": cfg.run.seed, "scenes": []}
    for i, scene_seed in enumerate(int(s) for s in seeds):
        spec = SyntheticSceneSpec(
            num_endmembers=data.endmembers,
            spectral_smoothness=data.spectral_smoothness,
            blob_scale=data.blob_scale,
            seed=scene_seed,
        )
        y, xh, xm = make_scene_triple(spec, data.size, data.size, data.bands, deg)
        sid = f"{i:04d}"
        meta = {
            "scene_id": sid, "seed": scene_seed, "config_hash": chash,
            "hr_size": data.size, "bands": data.bands,
            "msi_bands": data.msi_bands, "scale": data.scale,
            "blur_sigma": deg.blur_sigma, "blur_kernel_size": deg.blur_kernel_size,
        }
        d = save_scene(out, sid, y, xh, xm, meta)
        manifest["scenes"].append({
            "id": sid, "seed": scene_seed,
            "sha256": {name: file_sha256(d / f"{name}.hsc") for name in ("y", "xh", "xm")},
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {data.scenes} scenes to {out} (config {chash})")
    return 0


def _dataset_geometry(scenes):
    y, xh, xm = scenes[0].y, scenes[0].xh, scenes[0].xm
    if y.height % xh.height:
        from .errors import DimensionError
        raise DimensionError(
            f"Y grid {y.height}x{y.width} is not an integer multiple of X_h grid "
            f"{xh.height}x{xh.width}"
        )
    return y.bands, xm.bands, y.height // xh.height


def cmd_train(args) -> int:
    from .hsc import load_dataset
    from .model import S3RNet
    from .training import fit

    cfg = _load_run_config(args, {"train.epochs": args.epochs})
    scenes = load_dataset(args.data)
    bands, msi_bands, scale = _dataset_geometry(scenes)
    model_cfg = cfg.model.to_model_config(bands, msi_bands, scale)
    out = _out_dir(cfg)
    chash = cfg.config_hash()
    cfg.echo(out)

    model = S3RNet(model_cfg, seed=cfg.train.seed)
    history = fit(model, scenes, cfg.train, out_dir=out,
                  resume_from=args.resume, config_hash=chash)
    final = history[-1] if history else None
    if final:
        print(f"trained {len(history)} epochs; final loss {final.train_loss:.6f}, "
              f"val PSNR {final.val_psnr:.2f} dB (config {chash})")
    print(f"checkpoint: {out / 'last.ckpt'}")
    return 0


def _restore(args):
    from .checkpoint import restore_model
    from .hsc import load_dataset

    model, ck = restore_model(args.checkpoint)
    scenes = load_dataset(args.data)
    return model, ck, scenes


def cmd_eval(args) -> int:
    from .metrics import evaluate, model_predictor, write_metrics_csv

    cfg = _load_run_config(args)
    model, _, scenes = _restore(args)
    out = _out_dir(cfg)
    chash = cfg.config_hash()
    cfg.echo(out)
    report = evaluate(model_predictor(model), scenes, ratio=model.config.scale,
                      context={"snr_db": math.inf, "config_hash": chash})
    write_metrics_csv(out / "metrics.csv", [report], chash)
    print(f"PSNR {report.psnr_db:.3f} dB  SAM {report.sam_deg:.3f} deg  "
          f"RMSE {report.rmse:.5f}  ERGAS {report.ergas:.3f}")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def cmd_baseline(args) -> int:
    from .hsc import load_dataset
    from .metrics import bicubic_predictor, evaluate, write_metrics_csv

    cfg = _load_run_config(args)
    scenes = load_dataset(args.data)
    _, _, scale = _dataset_geometry(scenes)
    out = _out_dir(cfg)
    chash = cfg.config_hash()
    report = evaluate(bicubic_predictor(scale), scenes, ratio=scale,
                      context={"snr_db": math.inf, "config_hash": chash})
    write_metrics_csv(out / "baseline_metrics.csv", [report], chash)
    print(f"bicubic baseline: PSNR {report.psnr_db:.3f} dB  SAM {report.sam_deg:.3f} deg")
    print(f"wrote {out / 'baseline_metrics.csv'}")
    return 0


def _parse_snr_list(text: str):
    from .errors import ConfigError
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        try:
            out.append(math.inf if part in ("inf", "+inf", "clean") else float(part))
        except ValueError:
            raise ConfigError(f"bad SNR value {part!r} in --snr") from None
    if not out:
        raise ConfigError("--snr list is empty")
    return out


def cmd_bench_noise(args) -> int:
    from .metrics import noise_bench, write_metrics_csv

    cfg = _load_run_config(args)
    model, _, scenes = _restore(args)
    out = _out_dir(cfg)
    chash = cfg.config_hash()
    cfg.echo(out)
    snrs = _parse_snr_list(args.snr)
    rows = noise_bench(model, scenes, snrs, base_seed=cfg.run.seed,
                       ratio=model.config.scale, context={"config_hash": chash})
    write_metrics_csv(out / "noise_bench.csv", rows, chash)
    for r in rows:
        print(f"SNR {r.context['snr_db']:>6} dB: PSNR {r.psnr_db:.3f}  "
              f"SAM {r.sam_deg:.3f}  ERGAS {r.ergas:.3f}")
    print(f"wrote {out / 'noise_bench.csv'}")
    return 0


def cmd_analyze(args) -> int:
    from .analysis import (branch_cka_matrix, fused_energy, write_cka_csv,
                           write_energy_csv)

    cfg = _load_run_config(args)
    model, _, scenes = _restore(args)
    out = _out_dir(cfg)
    chash = cfg.config_hash()
    cfg.echo(out)
    if args.mode == "energy":
        dist = fused_energy(model, scenes)
        write_energy_csv(out / "energy.csv", dist, chash)
        summary = {
            "config_hash": chash,
            "gini": dist.gini,
            "top_quarter_mass": dist.top_mass(0.25),
            "channels": len(dist.energy),
        }
        (out / "energy_summary.json").write_text(json.dumps(summary, indent=2))
        print(f"top-25% channel mass {summary['top_quarter_mass']:.3f}, "
              f"Gini {dist.gini:.3f}")
        print(f"wrote {out / 'energy.csv'}")
    else:
        labels, mat = branch_cka_matrix(model, scenes)
        write_cka_csv(out / "cka.csv", labels, mat, chash)
        print(f"wrote {out / 'cka.csv'} ({len(labels)}x{len(labels)})")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "bench-noise": cmd_bench_noise,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args)
    from .errors import (CheckpointError, ConfigError, DimensionError,
                         FormatError, NumericalError, UsageError)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FormatError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (DimensionError, NumericalError) as exc:
        print(f"numerical/shape error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
