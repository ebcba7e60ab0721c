"""Batch command-line front end.

Subcommands: synth (dataset generation), fuse (feature-channel export),
pretrain, train, infer (keypoints + overlays), eval. Exit codes: 0 ok,
2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import evaluate, fusion, model, synth, train as training
from .config import ConfigError, RunConfig, apply_setting, load_config
from .pgm import read_pgm, write_pgm
from .synth import DatasetError
from .tensor import Tensor, save_tensors

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _run_config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    cfg = RunConfig()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        apply_setting(cfg, key.strip(), value.strip())
    return cfg.validate()


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    video, truth = synth.generate(cfg.scene)
    synth.save_dataset(video, truth, args.out)
    print(f"wrote {len(video)} frames to {args.out}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _run_config(args)
    frame = read_pgm(args.infile)
    a = args.tga if args.tga is not None else (
        cfg.fusion.attenuation_a if cfg.train.use_tga else None)
    prepared = fusion.prepare_frame(frame, cfg.model.input_size, a)
    if args.mode == "norm":
        stack = fusion.norm_stack(prepared, cfg.model.input_channels)
    else:
        stack = fusion.fuse(prepared, cfg.fusion)
    os.makedirs(args.out, exist_ok=True)
    for i, channel in enumerate(stack):
        write_pgm(os.path.join(args.out, f"channel_{i:02d}.pgm"),
                  fusion.minmax_normalize(channel))
    save_tensors(os.path.join(args.out, "stack.lusk"),
                 {f"channel_{i:02d}": ch for i, ch in enumerate(stack)})
    print(f"wrote {len(stack)} channels to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    frames = synth.load_frames(args.data)
    stacks = training.compute_stacks([frames], cfg.model, cfg.fusion, cfg.train)[0]
    enc_params, losses = training.pretrain_encoder(stacks, cfg.model, cfg.train)
    model.save_model(args.out, enc_params, cfg.model)
    print(f"pretrained encoder: loss {losses[0]:.6f} -> {losses[-1]:.6f}, wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    frames = synth.load_frames(args.data)
    init = None
    if args.init:
        init, init_cfg = model.load_model(args.init)
        model.check_config_match(init_cfg, cfg.model)
    result = training.train([frames], cfg.model, cfg.fusion, cfg.train,
                            cfg.pair_count, init=init, checkpoint_path=args.out)
    training.write_loss_csv(os.path.splitext(args.out)[0] + "_loss.csv",
                            result.losses, result.lrs)
    print(f"trained {cfg.train.epochs} epochs: loss {result.losses[0]:.6f} "
          f"-> {result.losses[-1]:.6f}, wrote {args.out}")
    return 0


def _overlay(frame: np.ndarray, coords: np.ndarray) -> np.ndarray:
    out = frame.copy()
    h, w = out.shape
    for row, col in coords:
        r, c = int(round(row)), int(round(col))
        out[max(r - 1, 0):min(r + 2, h), max(c - 1, 0):min(c + 2, w)] = 1.0
    return out


def cmd_infer(args) -> int:
    params, model_cfg = model.load_model(args.ckpt)
    if args.config:
        cfg = _run_config(args)
        model.check_config_match(model_cfg, cfg.model)
    else:
        cfg = RunConfig()
        cfg.model = model_cfg
        cfg.validate()
        cfg.model.cbam_enabled = model_cfg.cbam_enabled
    frames = synth.load_frames(args.data)
    os.makedirs(args.out, exist_ok=True)
    scale = frames.shape[1] / model_cfg.input_size
    with open(os.path.join(args.out, "keypoints.csv"), "w", encoding="utf-8") as f:
        f.write("frame,slot,row,col\n")
        for t, frame in enumerate(frames):
            coords = model.infer_keypoints(
                frame, params, model_cfg, cfg.fusion,
                use_tga=cfg.train.use_tga, input_mode=cfg.train.input_mode) * scale
            for slot, (row, col) in enumerate(coords):
                f.write(f"{t},{slot},{float(row)!r},{float(col)!r}\n")
            write_pgm(os.path.join(args.out, f"overlay_{t:05d}.pgm"),
                      _overlay(frame, coords))
    print(f"wrote keypoints for {len(frames)} frames to {args.out}")
    return 0


def read_keypoints_csv(path) -> np.ndarray:
    rows: dict[int, dict[int, tuple]] = {}
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "frame,slot,row,col":
            raise DatasetError(f"{path}: unexpected header {header!r}")
        for line in f:
            t, slot, r, c = line.strip().split(",")
            rows.setdefault(int(t), {})[int(slot)] = (float(r), float(c))
    if not rows:
        raise DatasetError(f"{path}: no keypoints")
    frames = sorted(rows)
    k = len(rows[frames[0]])
    out = np.zeros((len(frames), k, 2))
    for i, t in enumerate(frames):
        for slot, rc in rows[t].items():
            out[i, slot] = rc
    return out


def cmd_eval(args) -> int:
    keypoints = read_keypoints_csv(os.path.join(args.pred, "keypoints.csv"))
    truth_path = os.path.join(args.truth, "truth.txt")
    if not os.path.exists(truth_path):
        raise DatasetError(f"missing truth file {truth_path}")
    truth = synth.load_truth(truth_path)
    report = evaluate.evaluate(keypoints, truth, delta=args.delta)
    evaluate.write_report(args.out, report)
    evaluate.write_frame_csv(os.path.splitext(args.out)[0] + "_frames.csv",
                             keypoints, truth, args.delta)
    print(f"pleura accuracy {report.pleura_accuracy:.4f} "
          f"({report.frames_pleura_correct}/{report.frames_total}, delta={args.delta})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lusk",
                                     description="unsupervised ultrasound keypoints")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override (repeatable, later wins)")
        p.add_argument("--seed", type=int, help="override the global seed")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fuse", help="export feature channels for one frame")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tga", type=float, default=None, help="attenuation factor")
    p.add_argument("--mode", choices=("fused", "norm"), default="fused")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("pretrain", help="autoencoder pretraining of the encoder")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="main transporter training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="initial checkpoint (e.g. pretrained encoder)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="per-frame keypoints plus overlays")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--delta", type=float, default=evaluate.DEFAULT_DELTA)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, training.PairSamplingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
