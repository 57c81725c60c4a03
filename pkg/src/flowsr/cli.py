"""Command-line front end: train, sample, evaluate, benchmark, selfcheck.

Configuration is a flat key=value text file (# comments) merged with
--set overrides; unknown keys are rejected and every command echoes the
resolved configuration before acting.

Exit codes: 0 success, 1 usage/data error, 2 numeric failure,
3 selfcheck failure.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import imaging, sampler, selfcheck, training
from .imaging import (Checkpoint, CheckpointError, ImageFormatError,
                      ManifestError, load_checkpoint, save_checkpoint)
from .network import NetworkConfig, ScoreNetwork, parse_descriptor
from .process import BetaSchedule, ConditionalForwardProcess, T_MIN


class UsageError(ValueError):
    pass


# key -> (type, default)
CONFIG_SCHEMA = {
    "data_kind": (str, "texture-sr"),
    "data_n": (int, 32),
    "hr_size": (int, 32),
    "scale": (int, 4),
    "channels": (int, 1),
    "data_sigma": (float, 0.2),
    "data_seed": (int, 0),
    "manifest": (str, ""),
    "net_channels": (str, "32,64"),
    "net_blocks": (int, 2),
    "lr_channels": (int, 32),
    "lr_blocks": (int, 4),
    "time_dim": (int, 32),
    "beta0": (float, 0.1),
    "beta_t": (float, 20.0),
    "sigma2": (str, "auto"),
    "lr_start": (float, 1e-4),
    "lr_end": (float, 1e-5),
    "batch_size": (int, 8),
    "total_steps": (int, 500),
    "quality_loss_start_fraction": (float, 0.7),
    "quality_loss_weight": (float, 0.1),
    "quality_every": (int, 1),
    "quality_batch_size": (int, 1),
    "quality_solver_steps": (int, 8),
    "quality_adjoint_steps": (int, 8),
    "t_min": (float, T_MIN),
    "c": (float, 1.0),
    "parametrization": (str, "hybrid"),
    "val_fraction": (float, 0.2),
    "seed": (int, 0),
    "method": (str, "adaptive-rk"),
    "atol": (float, 1e-4),
    "rtol": (float, 1e-4),
    "steps": (int, 100),
    "t_end": (float, T_MIN),
    "threads": (int, 1),
    "out_dir": (str, "runs"),
    "checkpoint_every": (int, 200),
    "log_every": (int, 10),
}


def _parse_value(key, raw):
    if key not in CONFIG_SCHEMA:
        raise UsageError(f"unknown config key {key!r}")
    typ, _ = CONFIG_SCHEMA[key]
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"bad value for {key!r}: {raw!r}") from None


def load_config(path=None, overrides=()):
    cfg = {k: d for k, (_, d) in CONFIG_SCHEMA.items()}
    if path:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                cfg[key] = _parse_value(key, raw)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        cfg[key] = _parse_value(key.strip(), raw.strip())
    return cfg


def echo_config(cfg, stream=None):
    for key in sorted(cfg):
        print(f"config {key}={cfg[key]}", file=stream or sys.stdout)


def _net_config(cfg):
    return NetworkConfig(
        img_channels=cfg["channels"],
        channels=tuple(int(c) for c in cfg["net_channels"].split(",")),
        blocks_per_stage=cfg["net_blocks"],
        lr_channels=cfg["lr_channels"],
        lr_blocks=cfg["lr_blocks"],
        time_dim=cfg["time_dim"],
    )


def _make_process(cfg, sigma2):
    scale = cfg["scale"]

    def mu_of_y(y):
        return imaging.bicubic_resize(y, y.shape[-2] * scale, y.shape[-1] * scale)

    return ConditionalForwardProcess(
        BetaSchedule(cfg["beta0"], cfg["beta_t"]), mu_of_y, sigma2)


def _load_or_generate_dataset(cfg, generate, out_dir):
    manifest = cfg["manifest"]
    if manifest and os.path.exists(manifest):
        return imaging.load_manifest_samples(manifest)
    if not generate:
        raise UsageError(
            f"dataset manifest not found: {manifest or '(unset)'} "
            f"(pass --generate to synthesize one)"
        )
    samples = imaging.make_synthetic_dataset(
        cfg["data_kind"], cfg["data_n"], cfg["hr_size"], cfg["scale"],
        cfg["data_seed"], channels=cfg["channels"], sigma=cfg["data_sigma"],
    )
    img_dir = os.path.join(out_dir, "data")
    os.makedirs(img_dir, exist_ok=True)
    ext = ".pgm" if cfg["channels"] == 1 else ".ppm"
    rows = []
    for i, s in enumerate(samples):
        hr_path = os.path.join(img_dir, f"hr_{i:04d}{ext}")
        lr_path = os.path.join(img_dir, f"lr_{i:04d}{ext}")
        imaging.write_image(hr_path, np.clip(s.hr, 0.0, 1.0))
        imaging.write_image(lr_path, np.clip(s.lr, 0.0, 1.0))
        rows.append((hr_path, lr_path, s.scale))
    man_path = manifest or os.path.join(out_dir, "manifest.txt")
    imaging.write_manifest(man_path, rows)
    cfg["manifest"] = man_path
    return samples


def _checkpoint_from(net, cfg, sigma2, step):
    descriptor = net.config.to_descriptor(
        scale=cfg["scale"], parametrization=cfg["parametrization"])
    return Checkpoint(
        descriptor=descriptor, params=net.param_vector(),
        beta0=cfg["beta0"], beta_t=cfg["beta_t"], sigma2=sigma2,
        c=cfg["c"], step=step,
    )


def _restore(ckpt_path):
    """Rebuild (net, process, extras) from a checkpoint file."""
    ckpt = load_checkpoint(ckpt_path)
    net_cfg, extra = parse_descriptor(ckpt.descriptor)
    net = ScoreNetwork(net_cfg, seed=0)
    net.set_param_vector(ckpt.params)
    scale = int(extra.get("scale", 4))

    def mu_of_y(y):
        return imaging.bicubic_resize(y, y.shape[-2] * scale, y.shape[-1] * scale)

    process = ConditionalForwardProcess(
        BetaSchedule(ckpt.beta0, ckpt.beta_t), mu_of_y, ckpt.sigma2)
    extra = dict(extra, scale=scale, c=ckpt.c)
    return net, process, extra


def _train_config(cfg):
    return training.TrainConfig(
        lr_start=cfg["lr_start"], lr_end=cfg["lr_end"],
        batch_size=cfg["batch_size"], total_steps=cfg["total_steps"],
        quality_loss_start_fraction=cfg["quality_loss_start_fraction"],
        quality_loss_weight=cfg["quality_loss_weight"],
        t_min=cfg["t_min"], c=cfg["c"], seed=cfg["seed"],
        parametrization=cfg["parametrization"],
        val_fraction=cfg["val_fraction"],
        quality_every=cfg["quality_every"],
        quality_batch_size=cfg["quality_batch_size"],
        quality_solver_steps=cfg["quality_solver_steps"],
        quality_adjoint_steps=cfg["quality_adjoint_steps"],
    )


def cmd_train(args):
    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["total_steps"] = args.steps
    if args.out:
        cfg["out_dir"] = args.out
    echo_config(cfg)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    dataset = _load_or_generate_dataset(cfg, args.generate, out_dir)

    train_set, _ = training.split_dataset(dataset, cfg["val_fraction"])
    if cfg["sigma2"] == "auto":
        scale = cfg["scale"]
        est = training.estimate_sigma2(
            train_set,
            lambda y: imaging.bicubic_resize(y, y.shape[-2] * scale,
                                             y.shape[-1] * scale))
        sigma2 = max(est, training.SIGMA2_USE_FLOOR)
    else:
        sigma2 = float(cfg["sigma2"])
    print(f"sigma2={sigma2:.6g}")

    process = _make_process(cfg, sigma2)
    net = ScoreNetwork(_net_config(cfg), seed=cfg["seed"])
    tcfg = _train_config(cfg)

    save_checkpoint(os.path.join(out_dir, "init.ckpt"),
                    _checkpoint_from(net, cfg, sigma2, 0))

    def on_step(step, _loss):
        if cfg["checkpoint_every"] and step and step % cfg["checkpoint_every"] == 0:
            save_checkpoint(os.path.join(out_dir, f"step_{step:06d}.ckpt"),
                            _checkpoint_from(net, cfg, sigma2, step))

    log_path = os.path.join(out_dir, "metrics.log")
    rows = training.train(net, process, dataset, tcfg, log_path=log_path,
                          log_every=cfg["log_every"], on_step=on_step)
    save_checkpoint(os.path.join(out_dir, "final.ckpt"),
                    _checkpoint_from(net, cfg, sigma2, tcfg.total_steps))
    if rows:
        print(f"final score_loss={rows[-1]['score_loss']:.6g}")
    return 0


def cmd_sample(args):
    cfg = load_config(args.config, args.set or [])
    for key, val in (("method", args.method), ("steps", args.steps),
                     ("atol", args.atol), ("rtol", args.rtol)):
        if val is not None:
            cfg[key] = val
    seed = args.seed if args.seed is not None else cfg["seed"]
    echo_config(cfg)
    net, process, extra = _restore(args.checkpoint)
    y = imaging.read_image(args.lr_image)
    scfg = sampler.SamplerConfig(
        method=cfg["method"], atol=cfg["atol"], rtol=cfg["rtol"],
        steps=cfg["steps"], t_end=cfg["t_end"],
        parametrization=extra.get("parametrization", "hybrid"),
        c=float(extra["c"]),
    )
    result = sampler.sample(net, process, y, scfg, seed=seed)
    imaging.write_image(args.out, np.clip(result.image, 0.0, 1.0))
    if args.report_nfe:
        print(f"nfe={result.nfe} wall_time={result.wall_time:.3f}")
    return 0


def _evaluate_rows(net, process, extra, samples, scfg, seed, F):
    model_rows = []
    for i, s in enumerate(samples):
        res = sampler.sample(net, process, s.lr, scfg, seed=seed + i)
        sr = np.clip(res.image, 0.0, 1.0)
        model_rows.append({
            "psnr": imaging.psnr(sr, s.hr),
            "ssim": imaging.ssim(sr, s.hr),
            "feature_distance": training.feature_distance(F, sr, s.hr),
            "nfe": res.nfe,
        })
    return model_rows


def cmd_evaluate(args):
    cfg = load_config(args.config, args.set or [])
    seed = args.seed if args.seed is not None else cfg["seed"]
    echo_config(cfg)
    net, process, extra = _restore(args.checkpoint)
    samples = imaging.load_manifest_samples(args.manifest)
    F = training.FeatureExtractor(img_channels=samples[0].hr.shape[0])
    scfg = sampler.SamplerConfig(
        method=cfg["method"], atol=cfg["atol"], rtol=cfg["rtol"],
        steps=cfg["steps"], t_end=cfg["t_end"],
        parametrization=extra.get("parametrization", "hybrid"),
        c=float(extra["c"]),
    )
    rows = _evaluate_rows(net, process, extra, samples, scfg, seed, F)

    baseline = []
    for s in samples:
        up = np.clip(imaging.bicubic_resize(
            s.lr, s.hr.shape[-2], s.hr.shape[-1]), 0.0, 1.0)
        baseline.append({
            "psnr": imaging.psnr(up, s.hr),
            "ssim": imaging.ssim(up, s.hr),
            "feature_distance": training.feature_distance(F, up, s.hr),
            "nfe": 0,
        })

    def summarize(name, rs):
        return {
            "method": name,
            "psnr": np.mean([r["psnr"] for r in rs]),
            "ssim": np.mean([r["ssim"] for r in rs]),
            "feature_distance": np.mean([r["feature_distance"] for r in rs]),
            "mean_nfe": np.mean([r["nfe"] for r in rs]),
        }

    table = [summarize("model", rows), summarize("bicubic", baseline)]
    print(f"{'method':<10} {'psnr':>8} {'ssim':>8} {'feat_dist':>10} {'mean_nfe':>9}")
    for row in table:
        print(f"{row['method']:<10} {row['psnr']:>8.3f} {row['ssim']:>8.4f} "
              f"{row['feature_distance']:>10.4f} {row['mean_nfe']:>9.1f}")
    out_csv = args.out or (args.manifest + ".eval.csv")
    with open(out_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["method", "psnr", "ssim",
                                          "feature_distance", "mean_nfe"])
        w.writeheader()
        w.writerows(table)
    print(f"wrote {out_csv}")
    return 0


def cmd_benchmark(args):
    cfg = load_config(args.config, args.set or [])
    seed = args.seed if args.seed is not None else cfg["seed"]
    echo_config(cfg)
    net, process, extra = _restore(args.checkpoint)
    samples = imaging.load_manifest_samples(args.manifest)[:args.images]
    par = extra.get("parametrization", "hybrid")
    c = float(extra["c"])

    configs = [
        ("adaptive-rk", "1e-2", sampler.SamplerConfig(atol=1e-2, rtol=1e-2,
                                                      parametrization=par, c=c)),
        ("adaptive-rk", "1e-3", sampler.SamplerConfig(atol=1e-3, rtol=1e-3,
                                                      parametrization=par, c=c)),
        ("adaptive-rk", "1e-4", sampler.SamplerConfig(atol=1e-4, rtol=1e-4,
                                                      parametrization=par, c=c)),
        ("rk4-fixed", "50", sampler.SamplerConfig(method="rk4-fixed", steps=50,
                                                  parametrization=par, c=c)),
        ("rk4-fixed", "200", sampler.SamplerConfig(method="rk4-fixed", steps=200,
                                                   parametrization=par, c=c)),
        ("reverse-sde", "1000", sampler.SamplerConfig(method="reverse-sde",
                                                      steps=1000,
                                                      parametrization=par, c=c)),
    ]
    ref_cfg = sampler.SamplerConfig(method="rk4-fixed", steps=2000,
                                    parametrization=par, c=c)
    rows = []
    for method, knob, scfg in configs:
        nfes, walls, psnrs = [], [], []
        for i, s in enumerate(samples):
            ref = sampler.sample(net, process, s.lr, ref_cfg, seed=seed + i).image
            res = sampler.sample(net, process, s.lr, scfg, seed=seed + i)
            nfes.append(res.nfe)
            walls.append(res.wall_time)
            psnrs.append(imaging.psnr(np.clip(res.image, 0, 1), np.clip(ref, 0, 1)))
        rows.append({
            "method": method, "steps_or_tol": knob,
            "nfe": np.mean(nfes), "wall_time": np.mean(walls),
            "psnr_vs_reference": np.mean(psnrs),
        })
        print(f"{method:<12} {knob:>6} nfe={rows[-1]['nfe']:.0f} "
              f"wall={rows[-1]['wall_time']:.3f}s "
              f"psnr_vs_ref={rows[-1]['psnr_vs_reference']:.2f}")
    out_csv = args.out or "benchmark.csv"
    with open(out_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["method", "steps_or_tol", "nfe",
                                          "wall_time", "psnr_vs_reference"])
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {out_csv}")
    return 0


def cmd_selfcheck(args):
    cfg = load_config(args.config, args.set or [])
    echo_config(cfg)
    t0 = time.perf_counter()
    results = selfcheck.run_all(quick=args.quick, corrupt_drift=args.corrupt_drift)
    failed = []
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    print(f"selfcheck finished in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed checks: " + ", ".join(failed))
        return 3
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowsr",
        description="Conditional diffusion super-resolution engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--generate", action="store_true",
                   help="synthesize the dataset if the manifest is missing")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="super-resolve one LR image")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("lr_image")
    p.add_argument("--out", required=True)
    p.add_argument("--method", default=None,
                   choices=["adaptive-rk", "rk4-fixed", "reverse-sde"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--atol", type=float, default=None)
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--report-nfe", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="compare sampler settings")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--images", type=int, default=2)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("selfcheck", help="run the oracle verification suite")
    common(p)
    p.add_argument("--quick", action="store_true")
    p.add_argument("--corrupt-drift", action="store_true",
                   help="debug: flip the forward drift sign to verify the "
                        "harness detects it")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, CheckpointError, ImageFormatError, ManifestError,
            FileNotFoundError, PermissionError, IsADirectoryError,
            NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except training.NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
