"""Command line: ``dagan {train,eval,predict,ablate,synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import VARIANTS, ConfigError, ExperimentConfig, apply_overrides, profile
from .generator import count_parameters
from .metrics import ConfusionMatrix, accumulate, color_map, write_per_image_csv, write_report
from .trainer import (FingerprintMismatch, NumericalError, load_checkpoint, predict, predict_tiled,
                      read_checkpoint, run_experiment)

log = logging.getLogger("dagan")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class DataError(Exception):
    pass


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else profile(args.profile or "desk")
    overrides = list(args.overrides or [])
    if args.variant:
        overrides.append(f"model.variant={json.dumps(args.variant)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides)


def load_manifests(cfg: ExperimentConfig, root) -> dict:
    """Read ``<root>`` (using ``<root>/manifest.jsonl`` when present), tile and split."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    manifest = root / "manifest.jsonl"
    try:
        if manifest.exists():
            groups = D.read_manifest(manifest, root)
            return {k: _tiled(v, cfg.data.tile_size) for k, v in groups.items()}
        samples = D.load_dataset(root)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"no image pairs found under {root}")
    train, val, test = D.split_dataset(samples, cfg.data.split, seed=cfg.seed)
    return {m.split: _tiled(m, cfg.data.tile_size) for m in (train, val, test)}


def _tiled(manifest: D.DatasetManifest, tile: int) -> D.DatasetManifest:
    samples = manifest.samples
    if samples and any(s.mask.shape != (tile, tile) for s in samples):
        try:
            samples = D.tile_pairs(samples, tile)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    return D.DatasetManifest(samples, manifest.split, tile)


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    if args.data is None:
        raise DataError("--data is required")
    manifests = load_manifests(cfg, args.data)
    if not manifests["train"].samples:
        raise DataError(f"training split under {args.data} is empty")
    out.mkdir(parents=True, exist_ok=True)
    D.write_manifest(out / "manifest.jsonl", manifests.values())
    state, report = run_experiment(cfg, manifests, out)
    report["params_generator"] = count_parameters(state.generator)
    report["params_discriminator"] = count_parameters(state.discriminator)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("train F1 %.4f; outputs in %s", report.get("train", {}).get("f1", float("nan")), out)
    return 0


def _checkpoint_config(args) -> ExperimentConfig:
    if args.config or args.profile or args.variant or args.overrides:
        return build_config(args)
    return ExperimentConfig.from_dict(read_checkpoint(args.checkpoint)["config"])


def _restore(args):
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint {args.checkpoint} does not exist")
    cfg = _checkpoint_config(args)
    state = load_checkpoint(args.checkpoint, cfg, restore_rng=False)
    return cfg, state


def cmd_eval(args) -> int:
    cfg, state = _restore(args)
    root = Path(args.data)
    groups = D.read_manifest(args.manifest, root) if args.manifest else None
    if groups is None:
        if not root.exists():
            raise DataError(f"dataset root {root} does not exist")
        try:
            samples = D.load_dataset(root)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc
    else:
        samples = [s for split, m in groups.items() if args.split in ("all", split) for s in m.samples]
    if not samples:
        raise DataError("nothing to evaluate: the manifest is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps_dir = out / "maps"
    if args.maps:
        maps_dir.mkdir(exist_ok=True)
    tile = cfg.data.tile_size
    cm, rows = ConfusionMatrix(), []
    for s in samples:
        if s.mask.shape == (tile, tile):
            prob = predict(state.generator, [s])[0]
        else:
            prob = predict_tiled(state.generator, s, tile)
        one = accumulate(ConfusionMatrix(), prob, s.mask)
        rows.append((s.id, one))
        cm = cm + one
        if args.maps:
            D._write_png(maps_dir / f"{s.id}.png", color_map(prob, s.mask))
    report = write_report(out / "metrics.json", cm, {"n_images": len(samples)})
    write_per_image_csv(out / "per_image.csv", rows)
    log.info("F1 %.4f IoU %.4f kappa %.4f", report["f1"], report["iou"], report["kappa"])
    return 0


def cmd_predict(args) -> int:
    cfg, state = _restore(args)
    try:
        pair = D.load_pair(args.t1, args.t2, sample_id="pair")
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    h, w = pair.mask.shape
    tile = cfg.data.tile_size
    if h % tile == 0 and w % tile == 0:
        prob = predict_tiled(state.generator, pair, tile)
    elif h % 64 == 0 and w % 64 == 0:
        prob = predict(state.generator, [pair])[0]
    else:
        raise DataError(f"image size {h}x{w} is neither a multiple of the tile size {tile} nor of 64")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D._write_png(out / "change_mask.png", np.where(prob >= 0.5, 255, 0).astype(np.uint8))
    D._write_png(out / "probability.png", np.round(prob * 255).astype(np.uint8))
    np.save(out / "probability.npy", prob.astype(np.float32))
    log.info("changed pixels: %.2f%%", 100 * float((prob >= 0.5).mean()))
    return 0


def cmd_ablate(args) -> int:
    base_out = Path(args.out)
    summary = {}
    for variant in args.variants:
        sub = argparse.Namespace(**{**vars(args), "variant": variant, "out": str(base_out / variant)})
        cmd_train(sub)
        report = json.loads((base_out / variant / "report.json").read_text())
        summary[variant] = {k: report.get(k) for k in
                            ("params_generator", "params_discriminator", "train", "val", "test")}
    (base_out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_synth(args) -> int:
    samples = D.make_synthetic_dataset(args.n, args.size, seed=args.seed or 0)
    D.save_dataset(samples, args.out)
    ratios = json.loads(args.split) if args.split else [0.7, 0.1, 0.2]
    manifests = D.split_dataset(samples, ratios, seed=args.seed or 0)
    D.write_manifest(Path(args.out) / "manifest.jsonl", manifests, root=Path(args.out))
    log.info("wrote %d pairs to %s", len(samples), args.out)
    return 0


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--profile", choices=("desk", "paper"))
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/latest")
    common.add_argument("overrides", nargs="*", metavar="section.key=value")

    parser = argparse.ArgumentParser(prog="dagan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", parents=[common], help="train one variant")
    p.add_argument("--data", required=True, help="dataset root with A/, B/, label/")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", help="manifest.jsonl restricting the images")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--maps", action="store_true", help="write color-coded error maps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="predict one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", parents=[common], help="train every ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", help="JSON list of train/val/test ratios")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FingerprintMismatch) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
