"""Command-line entry point: ``mvjar <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .benchmark_splits import (
    SplitResult,
    diversity_report,
    sample_sequence_splits,
    sample_uniform_frame_split,
)
from .config import ConfigError, RunConfig
from .gradcheck import TOLERANCE, run_gradcheck
from .mask_sampler import build_mask_plan
from .nn_core import ShapeMismatchError
from .pointcloud_io import (
    PointCloudError,
    SceneManifest,
    generate_synthetic_frame,
    load_manifest,
    load_manifest_frames,
    read_frame,
    write_frame_bin,
    write_manifest,
)
from .pretrain_harness import FrameError, evaluate, mean_shape_offset, pretrain
from .voxel_grid import EmptyFrameError, voxelize

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("mvjar")


class NumericError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the seed of this command")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--strategy", choices=["rfvs", "fvs", "random"], help="mask sampling strategy")
    p.add_argument("--rp", type=float, help="jigsaw masking ratio")
    p.add_argument("--rs", type=float, help="shape masking ratio")
    p.add_argument("--alpha", type=float, help="jigsaw loss weight")
    p.add_argument("--beta", type=float, help="reconstruction loss weight")
    p.add_argument("--threads", type=int, help="data-preparation threads")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.epochs=5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvjar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic frames and a manifest")
    _common(p)

    p = sub.add_parser("voxelize", help="voxelize one frame and dump it as text")
    _common(p)
    p.add_argument("frame", help=".bin or text point file")

    p = sub.add_parser("mask-preview", help="mask counts and serialized plan for one frame")
    _common(p)
    p.add_argument("frame", help=".bin or text point file")

    p = sub.add_parser("pretrain", help="joint jigsaw + reconstruction pre-training")
    _common(p)
    p.add_argument("--manifest", required=True, help="sequence manifest of training frames")
    p.add_argument("--epoch-checkpoints", action="store_true", help="also save after every epoch")
    p.add_argument("--timing", action="store_true", help="write wall-clock seconds into metrics")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    _common(p)
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("splits", help="sample sequence-based fine-tuning splits")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--percents", help="comma-separated ratios, e.g. 0.05,0.1,0.2,0.5")
    p.add_argument("--uniform", type=float, metavar="P",
                   help="also report the legacy every-k-th-frame split at ratio P")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    flag_keys = {
        "strategy": "train.strategy", "rp": "train.r_p", "rs": "train.r_s",
        "alpha": "train.alpha", "beta": "train.beta", "threads": "train.threads",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        seed_key = {"synth": "synth.scene.seed", "splits": "splits.seed"}.get(args.command, "train.seed")
        overrides[seed_key] = args.seed
    return config_mod.override(cfg, overrides) if overrides else cfg


def _frame_seed(base: int, seq: int, frame: int) -> int:
    ss = np.random.SeedSequence([int(base), int(seq), int(frame)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out or "synth_data")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    from dataclasses import replace

    seqs = {}
    for s in range(cfg.synth.sequences):
        sid = f"seq_{s:04d}"
        paths = []
        for f in range(cfg.synth.frames_per_sequence):
            scene = replace(cfg.synth.scene, seed=_frame_seed(cfg.synth.scene.seed, s, f))
            frame = generate_synthetic_frame(scene, sid, f)
            rel = f"{sid}/{f:06d}.bin"
            try:
                (out / sid).mkdir(exist_ok=True)
                write_frame_bin(frame, out / rel)
            except OSError as exc:
                raise DataError(f"cannot write {out / rel}: {exc}") from exc
            paths.append(rel)
        seqs[sid] = paths
    write_manifest(SceneManifest(seqs), out / "manifest.txt")
    (out / "config.yaml").write_text(config_mod.dumps(cfg), encoding="utf-8")
    print(f"wrote {sum(len(v) for v in seqs.values())} frames in {len(seqs)} sequences to {out}")
    return EXIT_OK


def cmd_voxelize(args, cfg: RunConfig) -> int:
    vf = voxelize(read_frame(args.frame), cfg.grid)
    text = vf.dumps()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"{len(vf)} voxels -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_mask_preview(args, cfg: RunConfig) -> int:
    vf = voxelize(read_frame(args.frame), cfg.grid)
    t = cfg.train
    plan = build_mask_plan(vf, t.strategy, t.r_p, t.r_s, t.seed)
    print(f"voxels {len(vf)} kept {len(plan.kept)} jigsaw {len(plan.jigsaw_masked)} "
          f"shape {len(plan.shape_masked)}")
    text = plan.dumps()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_frames(manifest_path, threads):
    manifest = load_manifest(manifest_path)
    return load_manifest_frames(manifest, Path(manifest_path).parent, threads)


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out or "pretrain_out")
    frames = _load_frames(args.manifest, cfg.train.threads)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config_mod.dumps(cfg), encoding="utf-8")

    def report(m):
        if not (math.isfinite(m.loss) and math.isfinite(m.mvj) and math.isfinite(m.mvr)):
            raise NumericError(f"non-finite loss at epoch {m.epoch}")
        print(m.to_json(timing=True), flush=True)

    pretrain(
        frames, cfg.train, cfg.grid, cfg.window,
        checkpoint_path=out / "checkpoint.bin",
        metrics_path=out / "metrics.jsonl",
        per_epoch_checkpoints=args.epoch_checkpoints,
        timing_in_metrics=args.timing,
        on_epoch=report,
    )
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    frames = _load_frames(args.manifest, cfg.train.threads)
    const = mean_shape_offset(frames, cfg.grid)
    m = evaluate(args.checkpoint, frames, cfg.train, cfg.grid, cfg.window,
                 constant_prediction=const)
    text = m.to_json(timing=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    summary = run_gradcheck(h=args.h, seed=seed, corrupt=args.corrupt_backward)
    for label, rep in summary.reports.items():
        print(f"{label:6s} max_rel_error={rep.max_rel_error:.3e} worst={rep.worst_param} "
              f"checked={rep.num_checked}")
    status = "PASS" if summary.passed else "FAIL"
    print(f"{status} max_rel_error={summary.max_rel_error:.3e} tolerance={TOLERANCE:g} h={args.h:g}")
    return EXIT_OK if summary.passed else EXIT_NUMERIC


def cmd_splits(args, cfg: RunConfig) -> int:
    from dataclasses import replace

    manifest = load_manifest(args.manifest)
    spec = cfg.splits
    if args.percents:
        try:
            percents = tuple(float(p) for p in args.percents.split(","))
            spec = replace(spec, percents=percents)
        except ValueError as exc:
            raise ConfigError(f"--percents: {exc}") from None
    result = sample_sequence_splits(manifest, spec)
    text = result.dumps()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    for b in result.blocks:
        rep = diversity_report(manifest, sequence_ids=b.sequence_ids)
        print(f"percent={b.percent:g} subset={b.subset_index} sequences={len(b.sequence_ids)} "
              f"frames={rep.num_frames} coverage={rep.coverage:.4f}")
    if args.uniform is not None:
        paths = sample_uniform_frame_split(manifest, args.uniform, spec.seed)
        rep = diversity_report(manifest, frame_paths=paths)
        print(f"uniform percent={args.uniform:g} frames={rep.num_frames} "
              f"sequences={rep.sequences_touched} coverage={rep.coverage:.4f}")
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "voxelize": cmd_voxelize,
    "mask-preview": cmd_mask_preview,
    "pretrain": cmd_pretrain,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "splits": cmd_splits,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(cfg.train.threads)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PointCloudError, EmptyFrameError, FrameError, DataError, ShapeMismatchError,
            FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
