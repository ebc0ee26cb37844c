"""Command-line surface: train, dehaze, eval, priors, synth.

Config files are flat ``key = value`` text addressing every TrainConfig
field; unknown keys are hard errors so typos cannot silently fall back to
defaults.  Every subcommand exits 0 on success and nonzero with a message
on stderr otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from hazenet import data, network, priors, trainer
from hazenet import tensor as T

__all__ = ["main", "parse_config"]


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")


def _parse_value(raw: str, key: str, ftype) -> object:
    if ftype is bool:
        return _parse_bool(raw, key)
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is str:
        return raw
    # remaining fields are int tuples like "2,2,2"
    return tuple(int(p) for p in raw.split(","))


def parse_config(path) -> trainer.TrainConfig:
    """Read a flat key=value file into a TrainConfig; unknown keys error."""
    fields = {f.name: f for f in dataclasses.fields(trainer.TrainConfig)}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ValueError(f"{path}:{lineno}: duplicate config key {key!r}")
            ftype = types.get(fields[key].type, fields[key].type)
            try:
                values[key] = _parse_value(raw, key, ftype)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return trainer.TrainConfig(**values)


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)

    def echo(row: trainer.LogRow) -> None:
        if row.iteration % args.log_every == 0 or row.iteration + 1 == cfg.iters:
            print(
                f"iter {row.iteration:6d}  lr {row.lr:.3e}  total {row.total:.5f}  "
                f"spatial {row.spatial:.5f}  freq {row.frequency:.5f}  ssim {row.ssim:.5f}"
            )

    result = trainer.train(cfg, resume_from=args.resume, on_log=echo if args.log_every else None)
    print(f"finished {cfg.iters} iterations in {result.seconds:.1f}s")
    print(f"final checkpoint: {os.path.join(cfg.out_dir, 'final.pgh2')}")
    print(f"best train PSNR: {result.best_psnr:.2f} dB")
    return 0


def _cmd_dehaze(args) -> int:
    state = network.load(args.model)
    hazy = data.load_ppm(args.input)
    with T.no_grad():
        pred = network.forward(state, hazy)[0]
    data.save_ppm(np.clip(pred.data, 0.0, 1.0), args.output)
    print(f"wrote {args.output}")
    return 0


def _cmd_eval(args) -> int:
    state = network.load(args.model)
    items = []
    for clean_path, hazy_path in data.load_manifest(args.manifest):
        items.append((os.path.basename(hazy_path), data.load_ppm(clean_path), data.load_ppm(hazy_path)))
    rows, mean_p, mean_s = trainer.evaluate(state, items)
    with open(args.report, "w", encoding="utf-8") as f:
        f.write("image,psnr_db,ssim\n")
        for name, p, s in rows:
            f.write(f"{name},{p:.4f},{s:.6f}\n")
        f.write(f"mean,{mean_p:.4f},{mean_s:.6f}\n")
    print(f"evaluated {len(rows)} images: mean PSNR {mean_p:.2f} dB, mean SSIM {mean_s:.4f}")
    return 0


def _cmd_priors(args) -> int:
    img = data.load_ppm(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    window = priors.PriorWindow(3)
    with T.no_grad():
        dark = priors.dark_channel(img, window).data
        bright = priors.bright_channel(img, window).data
    eq = priors.equalize_image(img.data, 256)
    for tag, arr in (
        ("dark", np.repeat(dark, 3, axis=1)),
        ("bright", np.repeat(bright, 3, axis=1)),
        ("equalized", eq),
    ):
        out = os.path.join(args.out_dir, f"{stem}_{tag}.ppm")
        data.save_ppm(arr, out)
        print(f"wrote {out}")
    return 0


def _cmd_synth(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    for k in range(args.count):
        sample = data.make_sample([args.seed, k], args.size, args.size)
        clean_path = os.path.join(args.out_dir, f"pair_{k:03d}_clean.ppm")
        hazy_path = os.path.join(args.out_dir, f"pair_{k:03d}_hazy.ppm")
        data.save_ppm(sample.clean, clean_path)
        data.save_ppm(sample.hazy, hazy_path)
    print(f"wrote {args.count} pairs to {args.out_dir}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hazenet", description="Prior-guided CPU dehazing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("dehaze", help="restore one hazy image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_dehaze)

    p = sub.add_parser("eval", help="score restorations against a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("priors", help="write dark/bright/equalized maps of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_priors)

    p = sub.add_parser("synth", help="synthesize hazy/clean pairs")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=_cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, T.ShapeError, trainer.TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
