"""Joint jigsaw + reconstruction pre-training loop and checkpoint evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .mask_sampler import build_mask_plan, epoch_seed
from .nn_core import (
    MVJARModel,
    ModelConfig,
    batched_chamfer_l2,
    build_optimizer,
    adamw_step,
    cosine_lr,
    frame_losses,
    load_checkpoint,
    save_checkpoint,
)
from .pointcloud_io import Frame
from .task_targets import MaskedBatch, WindowConfig, assemble_masked_batch
from .voxel_grid import GridConfig, VoxelizedFrame, voxelize

logger = logging.getLogger(__name__)

# keeps evaluation masks disjoint from any training epoch's masks
EVAL_STREAM = 1 << 20


class FrameError(RuntimeError):
    """A frame could not be prepared; carries its identity."""


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    mvj: float
    mvr: float
    accuracy: float
    jigsaw_voxels: int
    shape_voxels: int
    lr: float
    seconds: float = 0.0
    baseline_mvr: float | None = None

    def to_json(self, timing: bool = False) -> str:
        rec = asdict(self)
        if not timing:
            rec.pop("seconds")
        if rec["baseline_mvr"] is None:
            rec.pop("baseline_mvr")
        return json.dumps(rec, sort_keys=True)


def model_config(cfg: TrainConfig, window: WindowConfig) -> ModelConfig:
    return ModelConfig(
        num_classes=window.num_classes,
        point_hidden=cfg.point_hidden,
        dim=cfg.dim,
        num_blocks=cfg.num_blocks,
        num_heads=cfg.num_heads,
        ffn_mult=cfg.ffn_mult,
        head_hidden=cfg.head_hidden,
        num_recon_points=cfg.num_recon_points,
    )


def voxelize_all(frames: Sequence[Frame], grid: GridConfig) -> list[VoxelizedFrame]:
    out = []
    for f in frames:
        try:
            out.append(voxelize(f, grid))
        except ValueError as exc:
            raise FrameError(f"frame {f.sequence_id!r}#{f.frame_index}: {exc}") from exc
    return out


def prepare_batches(vfs, indices, cfg: TrainConfig, window: WindowConfig, epoch: int,
                    pool: ThreadPoolExecutor | None = None) -> list[MaskedBatch]:
    """Mask and assemble frames ``indices`` for ``epoch``; output follows ``indices`` order."""

    def one(i):
        vf = vfs[i]
        plan = build_mask_plan(vf, cfg.strategy, cfg.r_p, cfg.r_s, epoch_seed(cfg.seed, epoch, i))
        return assemble_masked_batch(vf, plan, window)

    if pool is not None:
        return list(pool.map(one, indices))
    return [one(i) for i in indices]


class _Accumulator:
    def __init__(self):
        self.loss = self.mvj = self.mvr = 0.0
        self.frames = self.correct = self.jig = self.shp = 0
        self.baseline = 0.0

    def add(self, fl, alpha, beta):
        mvj = fl.mvj.value.item()
        mvr = fl.mvr.value.item()
        self.loss += alpha * mvj + beta * mvr
        self.mvj += mvj
        self.mvr += mvr
        self.frames += 1
        self.correct += fl.correct
        self.jig += fl.mvj.count
        self.shp += fl.mvr.count

    def metrics(self, epoch, lr, seconds, baseline=None) -> EpochMetrics:
        n = max(self.frames, 1)
        return EpochMetrics(
            epoch=epoch,
            loss=self.loss / n,
            mvj=self.mvj / n,
            mvr=self.mvr / n,
            accuracy=self.correct / self.jig if self.jig else 0.0,
            jigsaw_voxels=self.jig,
            shape_voxels=self.shp,
            lr=lr,
            seconds=seconds,
            baseline_mvr=baseline,
        )


@dataclass
class PretrainResult:
    model: MVJARModel
    history: list[EpochMetrics]
    checkpoint: Path | None = None


def pretrain(frames: Sequence[Frame], cfg: TrainConfig, grid: GridConfig, window: WindowConfig,
             checkpoint_path=None, metrics_path=None, per_epoch_checkpoints: bool = False,
             timing_in_metrics: bool = False,
             on_epoch: Callable[[EpochMetrics], None] | None = None) -> PretrainResult:
    """Pre-train a fresh model on ``frames`` with the joint loss.

    Masks are re-drawn each epoch from ``(seed, epoch, frame position)``.
    Per-frame losses are averaged uniformly within a batch.
    """
    if not frames:
        raise ValueError("pretrain needs at least one frame")
    torch.manual_seed(cfg.seed)
    vfs = voxelize_all(frames, grid)
    model = MVJARModel(model_config(cfg, window), seed=cfg.seed)
    optimizer = build_optimizer(model, cfg.lr_max, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(vfs) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    metrics_fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x5F]))
            order = rng.permutation(len(vfs))
            acc = _Accumulator()
            lr = cfg.lr_max
            for s in range(0, len(order), cfg.batch_size):
                idx = [int(i) for i in order[s:s + cfg.batch_size]]
                batches = prepare_batches(vfs, idx, cfg, window, epoch, pool)
                outs = model.forward_many(batches)
                total_loss = 0.0
                for out, b in zip(outs, batches):
                    fl = frame_losses(out, b, cfg.alpha, cfg.beta)
                    acc.add(fl, cfg.alpha, cfg.beta)
                    total_loss = total_loss + fl.total
                total_loss = total_loss / len(batches)
                optimizer.zero_grad(set_to_none=True)
                total_loss.backward()
                lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)
                adamw_step(optimizer, lr)
                step += 1
            m = acc.metrics(epoch, lr, time.perf_counter() - t0)
            history.append(m)
            if metrics_fh:
                metrics_fh.write(m.to_json(timing_in_metrics) + "\n")
                metrics_fh.flush()
            if on_epoch:
                on_epoch(m)
            if per_epoch_checkpoints and checkpoint_path:
                p = Path(checkpoint_path)
                save_checkpoint(model, p.with_name(f"{p.stem}.epoch{epoch}{p.suffix}"),
                                {"epoch": epoch})
    finally:
        if metrics_fh:
            metrics_fh.close()
        if pool:
            pool.shutdown()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, {"epoch": cfg.epochs - 1})
    return PretrainResult(model, history, Path(checkpoint_path) if checkpoint_path else None)


def mean_shape_offset(frames: Sequence[Frame], grid: GridConfig) -> np.ndarray:
    """Mean normalized voxel-center offset over every point of every voxel."""
    total = np.zeros(3)
    count = 0
    half = np.asarray(grid.voxel_size) / 2.0
    for vf in voxelize_all(frames, grid):
        offs = np.clip(vf.features[..., 6:9] / half, -1.0, 1.0)[vf.point_mask]
        total += offs.sum(axis=0)
        count += offs.shape[0]
    return total / max(count, 1)


@torch.no_grad()
def evaluate(model_or_checkpoint, frames: Sequence[Frame], cfg: TrainConfig, grid: GridConfig,
             window: WindowConfig, seed: int | None = None,
             constant_prediction=None) -> EpochMetrics:
    """Losses and jigsaw accuracy on fresh masks; parameters are not touched.

    With ``constant_prediction`` (a normalized offset) the Chamfer of predicting
    that point for every reconstructed slot is reported as ``baseline_mvr``.
    """
    if not frames:
        raise ValueError("evaluate needs at least one frame")
    if isinstance(model_or_checkpoint, MVJARModel):
        model = model_or_checkpoint
    else:
        model, _ = load_checkpoint(model_or_checkpoint)
    was_training = model.training
    model.eval()
    vfs = voxelize_all(frames, grid)
    seed = cfg.seed if seed is None else seed
    acc = _Accumulator()
    baseline_sum, baseline_frames = 0.0, 0
    t0 = time.perf_counter()
    for i, vf in enumerate(vfs):
        plan = build_mask_plan(vf, cfg.strategy, cfg.r_p, cfg.r_s, epoch_seed(seed, EVAL_STREAM, i))
        b = assemble_masked_batch(vf, plan, window)
        fl = frame_losses(model(b), b, cfg.alpha, cfg.beta)
        acc.add(fl, cfg.alpha, cfg.beta)
        if constant_prediction is not None:
            if len(b.shape):
                pred = torch.as_tensor(np.asarray(constant_prediction, dtype=np.float64))
                pred = pred.expand(len(b.shape), model.cfg.num_recon_points, 3)
                baseline_sum += batched_chamfer_l2(pred, b.shape_targets, b.shape_target_mask).mean().item()
            baseline_frames += 1
    model.train(was_training)
    baseline = baseline_sum / baseline_frames if constant_prediction is not None else None
    return acc.metrics(-1, 0.0, time.perf_counter() - t0, baseline)
