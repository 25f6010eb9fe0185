"""Command-line interface.

Exit codes: 0 success, 2 usage or config error, 3 data or checkpoint integrity
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from .config import ConfigError, help_config, load_config
from .data import (
    ImageFormatError,
    list_images,
    load_dataset,
    preprocess_batch,
    read_image,
    synthetic_images,
    to_uint8,
    write_image,
)
from .gradcheck import format_report, run_suite
from .metrics import count_flops, default_bandwidths, mmd_permutation_se, mmd_rbf, psnr_per_image, ssim_per_image
from .model import REFERENCE_PRESETS, LiteVAE, ModelConfig, ReferenceEncoder, latent_distribution
from .nn import DECODER_PRESETS, Decoder, feature_balance
from .tensor import no_grad, precision, tensor
from .train import NonFiniteLossError, load_model, train
from .wavelet import WaveletPyramid, dwt2, idwt2

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
BAND_NAMES = ("L", "H", "V", "D")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_manifest(path: Path, command: str, out: Path, started: float, config: str | None = None,
                   seed: int | None = None, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config_path": config,
        "seed": seed,
        "git_describe": git_describe(),
        "output": str(out),
        "wall_clock_seconds": round(time.time() - started, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def prepare_out_dir(out: Path, force: bool) -> Path:
    if out.exists():
        if not out.is_dir():
            raise CliError(f"--out {out} exists and is not a directory", EXIT_USAGE)
        if any(out.iterdir()) and not force:
            raise CliError(f"--out {out} is not empty; pass --force to overwrite", EXIT_USAGE)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint(path: str):
    try:
        return ckpt_mod.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {path}", EXIT_DATA) from exc
    except ckpt_mod.CheckpointError as exc:
        raise CliError(f"corrupt checkpoint {path}: {exc}", EXIT_DATA) from exc


def _load_model(path: str):
    ck = _load_checkpoint(path)
    try:
        return load_model(ck)
    except (KeyError, ValueError, TypeError, ckpt_mod.CheckpointError) as exc:
        raise CliError(f"checkpoint {path} does not match its config snapshot: {exc}", EXIT_DATA) from exc


def _read(path: Path) -> np.ndarray:
    try:
        return read_image(path)
    except FileNotFoundError as exc:
        raise CliError(f"image not found: {path}", EXIT_USAGE) from exc
    except ImageFormatError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_DATA) from exc


def _band_preview(plane: np.ndarray) -> np.ndarray:
    """(C, h, w) coefficients -> (h, w, C) uint8 by per-band min-max scaling; constant bands are flat."""
    lo, hi = float(plane.min()), float(plane.max())
    if hi - lo < 1e-12:
        fill = 0 if abs(hi) < 1e-12 else 128
        return np.full(plane.shape[1:] + (plane.shape[0],), fill, dtype=np.uint8)
    scaled = (plane - lo) / (hi - lo)
    return np.round(scaled.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def cmd_dwt(args) -> int:
    started = time.time()
    if args.inverse:
        src = Path(args.input)
        coef = src / "coefficients.lvae" if src.is_dir() else src
        ck = _load_checkpoint(str(coef))
        level = int(ck.config["level"])
        bands = ck.tensors["bands"]
        details = [ck.tensors[f"details.{i}"] for i in range(level - 1)]
        with precision("f64" if bands.dtype == np.float64 else "f32"):
            p = WaveletPyramid(level, tensor(bands), 1.0, [tensor(d) for d in details])
            img = idwt2(p).data[0]
        out = Path(args.out)
        if out.exists() and not args.force:
            raise CliError(f"--out {out} exists; pass --force to overwrite", EXIT_USAGE)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_image(out, np.clip(np.round(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8))
        write_manifest(out.with_name(out.name + ".manifest.json"), "dwt --inverse", out, started)
        return EXIT_OK

    img = _read(Path(args.input))
    h, w = img.shape[:2]
    f = 2**args.level
    if h % f or w % f:
        raise CliError(f"image is {h}x{w}; level {args.level} needs extents divisible by {f}", EXIT_USAGE)
    out = prepare_out_dir(Path(args.out), args.force)
    x = img.transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    with precision("f32"):
        p = dwt2(tensor(x), args.level)
    bands = p.bands.data[0]
    c = img.shape[2]
    lines = ["# band\tlevel\tmin\tmax"]
    for b, name in enumerate(BAND_NAMES):
        plane = bands[b * c:(b + 1) * c]
        write_image(out / f"level{args.level}_{name}.ppm", _band_preview(plane))
        lines.append(f"{name}\t{args.level}\t{float(plane.min())!r}\t{float(plane.max())!r}")
    for i, d in enumerate(p.details):
        lvl = i + 1
        for b, name in enumerate(BAND_NAMES[1:]):
            plane = d.data[0, b * c:(b + 1) * c]
            write_image(out / f"level{lvl}_{name}.ppm", _band_preview(plane))
            lines.append(f"{name}\t{lvl}\t{float(plane.min())!r}\t{float(plane.max())!r}")
    (out / "bands.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    tensors = {"bands": p.bands.data}
    tensors.update({f"details.{i}": d.data for i, d in enumerate(p.details)})
    ckpt_mod.save_checkpoint(out / "coefficients.lvae",
                             ckpt_mod.Checkpoint(0, {"level": args.level, "source": str(args.input)}, tensors))
    write_manifest(out / "manifest.json", "dwt", out, started)
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    try:
        config = load_config(args.config)
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {args.config}", EXIT_USAGE) from exc
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_USAGE) from exc
    if not Path(args.data).is_dir():
        raise CliError(f"data directory not found: {args.data}", EXIT_USAGE)
    try:
        dataset = load_dataset(args.data)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    except ImageFormatError as exc:
        raise CliError(f"bad image in {args.data}: {exc}", EXIT_DATA) from exc
    resume = _load_checkpoint(args.resume) if args.resume else None
    out = prepare_out_dir(Path(args.out), args.force)
    try:
        result = train(config, dataset, resume=resume, out_dir=out)
    except NonFiniteLossError as exc:
        (out / "diagnostic.txt").write_text(f"{exc}\n", encoding="utf-8")
        write_manifest(out / "manifest.json", "train", out, started, args.config, config.seed, {"status": "nonfinite"})
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    except ckpt_mod.CheckpointError as exc:
        raise CliError(f"resume checkpoint mismatch: {exc}", EXIT_DATA) from exc
    final_psnr = [v for _, k, v in result.log if k == "probe/psnr"]
    write_manifest(out / "manifest.json", "train", out, started, args.config, config.seed,
                   {"steps": result.checkpoint.step, "final_probe_psnr": final_psnr[-1] if final_psnr else None,
                    "latent_std": float(result.checkpoint.tensors["stats.latent_std"])})
    print(f"trained {result.checkpoint.step} steps; checkpoint {out / 'final.lvae'}")
    return EXIT_OK


def _input_images(inputs: list[str]) -> list[Path]:
    paths = []
    for s in inputs:
        p = Path(s)
        if p.is_dir():
            paths.extend(list_images(p))
        elif p.exists():
            paths.append(p)
        else:
            raise CliError(f"input not found: {p}", EXIT_USAGE)
    if not paths:
        raise CliError("no input images", EXIT_USAGE)
    return paths


def reconstruct_images(model: LiteVAE, images: list[np.ndarray], resolution: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Return (inputs, reconstructions) as (N, C, r, r) arrays in [-1, 1]."""
    x = preprocess_batch(images, resolution, dtype)
    with no_grad():
        rec = model.reconstruct(tensor(x)).data
    return x, rec


def cmd_reconstruct(args) -> int:
    started = time.time()
    model, cfg = _load_model(args.checkpoint)
    paths = _input_images(args.input)
    images = [_read(p) for p in paths]
    resolutions = args.resolution or [cfg.res_stage2]
    for r in resolutions:
        if r <= 0 or r % 8:
            raise CliError(f"--resolution {r} must be a positive multiple of 8", EXIT_USAGE)
    out = prepare_out_dir(Path(args.out), args.force)
    rows = ["image\tresolution\tpsnr\tssim"]
    summary = []
    with precision(cfg.precision):
        dtype = np.float32 if cfg.precision == "f32" else np.float64
        for r in resolutions:
            x, rec = reconstruct_images(model, images, r, dtype)
            a, b = (x + 1.0) / 2.0, (rec + 1.0) / 2.0
            ps, ss = psnr_per_image(a, b), ssim_per_image(a, b)
            for p, img, pv, sv in zip(paths, rec, ps, ss):
                write_image(out / f"{p.stem}_{r}.ppm", to_uint8(img))
                rows.append(f"{p.name}\t{r}\t{float(pv)!r}\t{float(sv)!r}")
            rows.append(f"MEAN\t{r}\t{float(ps.mean())!r}\t{float(ss.mean())!r}")
            summary.append((r, float(ps.mean()), float(ss.mean())))
    (out / "metrics.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_manifest(out / "manifest.json", "reconstruct", out, started, seed=cfg.seed,
                   extra={"checkpoint": args.checkpoint, "resolutions": resolutions})
    for r, p, s in summary:
        print(f"resolution {r}: mean PSNR {p:.3f} dB, mean SSIM {s:.4f}")
    return EXIT_OK


def encode_latents(model: LiteVAE, images: list[np.ndarray], resolution: int, dtype) -> np.ndarray:
    x = preprocess_batch(images, resolution, dtype)
    with no_grad():
        raw = model.encode(tensor(x))
        if model.config.stochastic:
            raw = latent_distribution(raw).mode()
    return raw.data.reshape(len(images), -1).astype(np.float64)


def _analyze_mmd(args, lines: list[str]) -> int:
    if not args.checkpoint or not args.data:
        raise CliError("--mmd needs --checkpoint and --data", EXIT_USAGE)
    model, cfg = _load_model(args.checkpoint)
    images = _dataset(args.data)
    with precision(cfg.precision):
        z = encode_latents(model, images, args.resolution or cfg.res_stage2,
                           np.float32 if cfg.precision == "f32" else np.float64)
    rng = np.random.default_rng(args.seed)
    g = rng.standard_normal(z.shape)
    bw = default_bandwidths(z.shape[1])
    est = mmd_rbf(z, g, bw)
    se = mmd_permutation_se(z, g, bw, n_perm=args.permutations, rng=rng)
    lines.append("bandwidth\tmmd2\tperm_se")
    for s, e, d in zip(bw, est, se):
        lines.append(f"{float(s)!r}\t{float(e)!r}\t{float(d)!r}")
    return EXIT_OK if np.all(np.isfinite(est)) else EXIT_NUMERIC


def _dataset(path: str) -> list[np.ndarray]:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    except ImageFormatError as exc:
        raise CliError(f"bad image in {path}: {exc}", EXIT_DATA) from exc


def params_table(resolution: int = 256, latent_dim: int = 4) -> list[str]:
    """Parameter and FLOP counts of the LiteVAE encoder presets, the reference encoder and decoder."""
    lines = ["model\tcomponent\tparams\tgflops"]
    shape = (1, 3, resolution, resolution)
    with precision("f32"):
        for name in ("S", "B", "M", "L"):
            m = LiteVAE(ModelConfig(latent_dim=latent_dim, size_preset=name, decoder_preset="micro"))
            enc = m.encoder
            ext = sum(e.num_params() for e in enc.extractors())
            lines.append(f"litevae-{name}\tfeature_extractors\t{ext}\t")
            lines.append(f"litevae-{name}\tfeature_aggregator\t{enc.feature_aggregator.num_params()}\t")
            down = enc.downsample_block_L1.num_params() + enc.downsample_block_L2.num_params()
            lines.append(f"litevae-{name}\tdownsample\t{down}\t")
            lines.append(f"litevae-{name}\tencoder_total\t{enc.num_params()}\t{count_flops(enc, shape) / 1e9:.3f}")
        ref = ReferenceEncoder(latent_dim, REFERENCE_PRESETS["paper"])
        lines.append(f"reference-paper\tencoder_total\t{ref.num_params()}\t{count_flops(ref, shape) / 1e9:.3f}")
        dec = Decoder(latent_dim, 3, DECODER_PRESETS["paper"])
        zshape = (1, latent_dim, resolution // 8, resolution // 8)
        lines.append(f"decoder-paper\tdecoder_total\t{dec.num_params()}\t{count_flops(dec, zshape) / 1e9:.3f}")
    return lines


def _analyze_feature_balance(args, lines: list[str]) -> int:
    if args.checkpoint:
        model, cfg = _load_model(args.checkpoint)
        mcfg, prec, seed = cfg.model, cfg.precision, cfg.seed
    else:
        model, mcfg, prec, seed = None, ModelConfig(size_preset="tiny", decoder_preset="micro"), "f32", args.seed
    res = args.resolution or 64
    lines.append("variant\tblock\tmax_over_mean_channel_rms")
    with precision(prec):
        dtype = np.float32 if prec == "f32" else np.float64
        if args.data:
            x = preprocess_batch(_dataset(args.data)[:8], res, dtype)
        else:
            x = preprocess_batch(synthetic_images(4, res, seed=args.seed), res, dtype)
        for smc in (False, True):
            m = model if model is not None and mcfg.decoder_smc == smc else LiteVAE(replace(mcfg, decoder_smc=smc), seed)
            m.decoder.record_features = True
            with no_grad():
                m.reconstruct(tensor(x))
            stats = feature_balance(m.decoder.features)
            m.decoder.record_features = False
            variant = "smc" if smc else "groupnorm"
            trained = " (checkpoint)" if m is model else " (init)"
            for block, v in stats.items():
                lines.append(f"{variant}{trained}\t{block}\t{v!r}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    started = time.time()
    modes = [m for m in ("mmd", "gradcheck", "params", "feature_balance") if getattr(args, m)]
    if len(modes) != 1:
        raise CliError("choose exactly one of --mmd, --gradcheck, --params, --feature-balance", EXIT_USAGE)
    out = prepare_out_dir(Path(args.out), args.force) if args.out else None
    lines: list[str] = []
    code = EXIT_OK
    mode = modes[0]
    if mode == "mmd":
        code = _analyze_mmd(args, lines)
    elif mode == "gradcheck":
        results = run_suite(args.instances, args.seed)
        lines.extend(format_report(results, args.tol).rstrip("\n").split("\n"))
        if not all(r.passed(args.tol) for r in results):
            code = EXIT_NUMERIC
    elif mode == "params":
        lines.extend(params_table(args.flops_resolution))
    else:
        code = _analyze_feature_balance(args, lines)
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out is not None:
        (out / f"{mode}.tsv").write_text(text, encoding="utf-8")
        write_manifest(out / "manifest.json", f"analyze --{mode.replace('_', '-')}", out, started, seed=args.seed,
                       extra={"checkpoint": args.checkpoint, "exit_code": code})
    return code


def cmd_synth(args) -> int:
    started = time.time()
    out = prepare_out_dir(Path(args.out), args.force)
    for i, img in enumerate(synthetic_images(args.count, args.size, args.seed)):
        write_image(out / f"synth_{i:04d}.ppm", img)
    write_manifest(out / "manifest.json", "synth", out, started, seed=args.seed)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="litevae", description="Wavelet VAE toolkit: transforms, training, analysis.")
    parser.add_argument("--help-config", action="store_true", help="list training config keys and defaults")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("dwt", help="multi-level Haar transform of an image, or its inverse")
    p.add_argument("--input", required=True, help="image file, or band directory with --inverse")
    p.add_argument("--level", type=int, default=1, choices=(1, 2, 3))
    p.add_argument("--inverse", action="store_true", help="reconstruct an image from a band directory")
    p.add_argument("--out", required=True, help="band directory, or image file with --inverse")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_dwt)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory of .ppm/.pgm/.png images")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct images and report PSNR/SSIM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, nargs="+", help="image files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, nargs="+", help="one or more evaluation resolutions")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("analyze", help="latent MMD, gradient checks, parameter tables, feature balance")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--mmd", action="store_true")
    mode.add_argument("--gradcheck", action="store_true")
    mode.add_argument("--params", action="store_true")
    mode.add_argument("--feature-balance", action="store_true")
    p.add_argument("--out", help="optional directory for the report and manifest")
    p.add_argument("--resolution", type=int)
    p.add_argument("--flops-resolution", type=int, default=256)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--permutations", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="write deterministic synthetic training images")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.help_config:
        sys.stdout.write(help_config())
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
