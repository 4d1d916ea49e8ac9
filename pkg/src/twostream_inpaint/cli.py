"""Command-line interface.

Subcommands: ``train``, ``inpaint``, ``eval``, ``make-masks``, ``viz-gates``,
``viz-pyramid``. Exit codes: 0 on success, 2 for configuration/usage
problems, 3 for runtime failures (diverged training, impossible mask
request, corrupt checkpoint).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import (
    MASK_BINS,
    InpaintingDataset,
    generate_irregular_mask,
    load_image,
    load_mask,
    parse_bin,
    save_image,
    save_mask,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    InputError,
    MaskGenerationError,
    TrainingError,
)
from .metrics import evaluate, pooled_features
from .training import TrainConfig, load_generator, make_extractor, train_loop

ABLATIONS = ("none", "ms_only", "no_gu", "no_afblk")


def _set_nested(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if k not in cur or not isinstance(cur[k], dict):
            raise ConfigurationError(f"unknown config section {k!r} in --set {dotted}")
        cur = cur[k]
    if keys[-1] not in cur:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    cur[keys[-1]] = value


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _apply_ablation(cfg_dict: dict, ablation: str) -> None:
    if ablation == "ms_only":
        cfg_dict["network"]["structure_stream"] = False
    elif ablation == "no_gu":
        cfg_dict["network"]["gated_units"] = False
    elif ablation == "no_afblk":
        cfg_dict["network"]["fusion"] = "concat"
    elif ablation != "none":
        raise ConfigurationError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")


def _resolve_train_config(args) -> TrainConfig:
    cfg_dict = TrainConfig().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        with open(path) as f:
            loaded = json.load(f)
        for key, val in loaded.items():
            if key not in cfg_dict:
                raise ConfigurationError(f"unknown config key {key!r} in {path}")
            if isinstance(cfg_dict[key], dict) and isinstance(val, dict):
                for sub, sv in val.items():
                    if sub not in cfg_dict[key]:
                        raise ConfigurationError(f"unknown config key {key}.{sub!r} in {path}")
                    cfg_dict[key][sub] = sv
            else:
                cfg_dict[key] = val
    for item in args.set or []:
        key, val = _parse_override(item)
        _set_nested(cfg_dict, key, val)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.out is not None:
        cfg_dict["out_dir"] = args.out
    if args.max_steps is not None:
        cfg_dict["steps"] = args.max_steps
    _apply_ablation(cfg_dict, args.ablation)
    try:
        return TrainConfig.from_dict(cfg_dict)
    except TypeError as exc:
        raise ConfigurationError(f"bad config: {exc}") from exc


def cmd_train(args) -> int:
    if args.resume:
        state, _ = train_loop(resume_path=args.resume, steps=args.max_steps, quiet=args.quiet)
    else:
        config = _resolve_train_config(args)
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        state, _ = train_loop(config, quiet=args.quiet)
    print(f"finished at step {state.step}; checkpoints in {state.config.out_dir}")
    return 0


def _load_pair(args, config) -> tuple[torch.Tensor, torch.Tensor]:
    size = tuple(config.network.input_size)
    image = load_image(args.image)
    if tuple(image.shape[1:]) != size:
        raise ConfigurationError(
            f"image is {tuple(image.shape[1:])} but the checkpoint was trained on "
            f"{size}; resize the input or retrain"
        )
    mask = load_mask(args.mask)
    if tuple(mask.shape[1:]) != size:
        raise ConfigurationError(
            f"mask is {tuple(mask.shape[1:])} but the checkpoint expects {size}"
        )
    return image, mask


def cmd_inpaint(args) -> int:
    generator, config = load_generator(args.checkpoint)
    image, mask = _load_pair(args, config)
    with torch.no_grad():
        result = generator(image[None], mask[None])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(result.composited[0], out_dir / "result.png")
    save_image(result.final_image[0], out_dir / "raw.png")
    written = ["result.png", "raw.png"]
    if result.structure_pyramid:  # absent on ms_only checkpoints
        save_image(result.structure_pyramid[0][0], out_dir / "structure.png")
        written.append("structure.png")
    print(f"wrote {', '.join(written)} to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    generator, config = load_generator(args.checkpoint)
    dataset = InpaintingDataset(
        source=args.data,
        size=tuple(config.network.input_size),
        seed=args.seed,
        augment=False,
        n_synthetic=max(args.samples_per_bin, 2),
    )
    bins = {name: parse_bin(name) for name in (args.bins or sorted(MASK_BINS))}
    feature_fn = None
    if args.fid:
        extractor = make_extractor(config)
        feature_fn = lambda imgs: pooled_features(extractor, imgs)  # noqa: E731
    report = evaluate(
        generator, dataset, bins=bins,
        samples_per_bin=args.samples_per_bin, seed=args.seed, feature_fn=feature_fn,
    )
    print(report.table())
    if args.json:
        Path(args.json).write_text(report.to_json())
        print(f"wrote {args.json}")
    return 0


def cmd_make_masks(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(MASK_BINS) if args.bin == "all" else [args.bin]
    for name in names:
        lo, hi = parse_bin(name)
        bin_idx = sorted(MASK_BINS).index(name)
        for i in range(args.count):
            rng = np.random.default_rng([args.seed, 31, bin_idx, i])
            mask = generate_irregular_mask(args.size, args.size, (lo, hi), rng)
            save_mask(mask, out_dir / f"mask_{name}_{i:03d}.png")
    print(f"wrote {len(names) * args.count} masks to {out_dir}")
    return 0


def cmd_viz_gates(args) -> int:
    generator, config = load_generator(args.checkpoint)
    image, mask = _load_pair(args, config)
    with torch.no_grad():
        result = generator(image[None], mask[None])
    if not result.gate_maps:
        raise ConfigurationError("this checkpoint has no gated units; nothing to visualize")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for level, gate in enumerate(result.gate_maps, start=1):
        m = gate[0].mean(dim=0).cpu().numpy()
        span = m.max() - m.min()
        if span < 1e-12:
            vis = np.full(m.shape, 128, dtype=np.uint8)
        else:
            vis = np.round((m - m.min()) / span * 255.0).astype(np.uint8)
        Image.fromarray(vis, mode="L").save(out_dir / f"gate_l{level}.png")
    print(f"wrote {len(result.gate_maps)} gate maps to {out_dir}")
    return 0


def cmd_viz_pyramid(args) -> int:
    generator, config = load_generator(args.checkpoint)
    image, mask = _load_pair(args, config)
    with torch.no_grad():
        result = generator(image[None], mask[None])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for level, pred in enumerate(result.detailed_pyramid, start=1):
        save_image(pred[0].clamp(-1.0, 1.0), out_dir / f"detail_l{level}.png")
        count += 1
    for level, pred in enumerate(result.structure_pyramid, start=1):
        save_image(pred[0].clamp(-1.0, 1.0), out_dir / f"structure_l{level}.png")
        count += 1
    print(f"wrote {count} pyramid images to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsinpaint",
        description="Two-stream structure-guided image inpainting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train (or resume) a model")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set network.levels=3")
    p.add_argument("--out", help="output directory (checkpoints + logs)")
    p.add_argument("--max-steps", type=int, help="target step count")
    p.add_argument("--seed", type=int, help="seed for weights, masks, batches")
    p.add_argument("--ablation", choices=ABLATIONS, default="none")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true", help="suppress per-step progress")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inpaint", help="fill the holes of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True,
                   help="receives result.png, raw.png and (if the model has a "
                        "structure stream) structure.png")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="per-bin L1/PSNR/SSIM (and optional FID)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synthetic", help="image directory or 'synthetic'")
    p.add_argument("--samples-per-bin", type=int, default=8)
    p.add_argument("--bins", nargs="*", choices=sorted(MASK_BINS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fid", action="store_true")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-masks", help="generate irregular hole masks")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--bin", default="all", choices=["all", *sorted(MASK_BINS)])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_masks)

    p = sub.add_parser("viz-gates", help="save gate activation maps per level")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_viz_gates)

    p = sub.add_parser("viz-pyramid", help="save both streams' multi-scale outputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_viz_pyramid)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, MaskGenerationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
