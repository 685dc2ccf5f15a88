"""Finite-difference verification of the model gradients on a tiny problem."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .mask_sampler import build_mask_plan
from .nn_core import (
    GradCheckReport,
    MVJARModel,
    ModelConfig,
    frame_losses,
    gradcheck,
)
from .pointcloud_io import Frame
from .task_targets import MaskedBatch, WindowConfig, assemble_masked_batch
from .voxel_grid import GridConfig, voxelize

TOLERANCE = 1e-4

TINY_MODEL = ModelConfig(
    num_classes=4, point_hidden=8, dim=8, num_blocks=1, num_heads=2,
    ffn_mult=2, head_hidden=8, num_recon_points=4,
)


def tiny_problem(seed: int = 0) -> tuple[MVJARModel, MaskedBatch]:
    """Six voxels with up to four points each, two of them shape-masked and three jigsaw-masked."""
    rng = np.random.default_rng(seed)
    grid = GridConfig((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.25, 0.25, 1.0), max_points=4)
    cells = rng.choice(16, size=6, replace=False)
    rows = []
    for c in cells:
        i, j = c % 4, c // 4
        for _ in range(rng.integers(2, 5)):
            rows.append((
                0.25 * (i + rng.uniform(0.05, 0.95)),
                0.25 * (j + rng.uniform(0.05, 0.95)),
                rng.uniform(0.05, 0.95),
                0.0,
            ))
    vf = voxelize(Frame(np.array(rows), "gradcheck", 0), grid)
    plan = build_mask_plan(vf, "rfvs", 0.34, 0.34, seed)
    batch = assemble_masked_batch(vf, plan, WindowConfig(2, 2, 1))
    return MVJARModel(TINY_MODEL, seed=seed), batch


class GradCheckSummary(NamedTuple):
    reports: dict
    max_rel_error: float
    passed: bool


def run_gradcheck(h: float = 1e-5, seed: int = 0, corrupt: bool = False,
                  tolerance: float = TOLERANCE) -> GradCheckSummary:
    """Check MVJ alone, MVR alone and the joint loss over every parameter.

    ``corrupt`` perturbs one analytic gradient entry to show the check can fail.
    """
    model, batch = tiny_problem(seed)
    hook = None
    if corrupt:
        def hook(name, g):
            if name == "mask_token_p":
                g = g.clone()
                g[0] = g[0] * 1.01 + 1e-3
            return g

    reports: dict[str, GradCheckReport] = {}
    for label, (alpha, beta) in {"mvj": (1.0, 0.0), "mvr": (0.0, 1.0), "joint": (1.0, 1.0)}.items():
        def loss_fn(m, alpha=alpha, beta=beta):
            return frame_losses(m(batch), batch, alpha, beta).total

        reports[label] = gradcheck(model, loss_fn, h=h, grad_hook=hook)
    worst = max(r.max_rel_error for r in reports.values())
    return GradCheckSummary(reports, worst, worst < tolerance)
