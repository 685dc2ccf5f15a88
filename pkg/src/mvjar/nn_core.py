"""Voxel encoder, window attention backbone, task heads, losses and optimisation helpers.

Everything runs in float64 on CPU so finite-difference gradient checks are
meaningful and training is reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .task_targets import MaskedBatch, window_id

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"MVJARCK1"
CHECKPOINT_VERSION = 1


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 144
    point_hidden: int = 32
    dim: int = 32
    num_blocks: int = 2
    num_heads: int = 4
    ffn_mult: int = 2
    head_hidden: int = 32
    num_recon_points: int = 15

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError("dim must be divisible by num_heads")
        if min(self.num_classes, self.point_hidden, self.dim, self.num_heads,
               self.ffn_mult, self.head_hidden, self.num_recon_points) < 1 or self.num_blocks < 0:
            raise ValueError("model sizes must be positive")


class ForwardOutput(NamedTuple):
    logits: torch.Tensor  # (R_p, C)
    recon: torch.Tensor  # (R_s, n, 3)


class LossTerm(NamedTuple):
    """A task loss and how many voxels it averaged over; ``count == 0`` means absent."""

    value: torch.Tensor
    count: int


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_mask):
        # x: (W, L, d); key_mask: (W, L) True for real voxels
        W, L, d = x.shape
        h = self.num_heads

        def split(t):
            return t.view(W, L, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(W, L, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block with attention restricted to one window."""

    def __init__(self, dim: int, num_heads: int, ffn_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim)
        )

    def forward(self, x, key_mask):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.ffn(self.norm2(x))


class MVJARModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(int(seed))
        self.point_mlp = nn.Sequential(
            nn.Linear(9, cfg.point_hidden), nn.GELU(), nn.Linear(cfg.point_hidden, cfg.dim)
        )
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.num_heads, cfg.ffn_mult) for _ in range(cfg.num_blocks)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.jigsaw_head = nn.Sequential(
            nn.Linear(cfg.dim, cfg.head_hidden), nn.GELU(), nn.Linear(cfg.head_hidden, cfg.num_classes)
        )
        self.recon_head = nn.Sequential(
            nn.Linear(cfg.dim, cfg.head_hidden), nn.GELU(),
            nn.Linear(cfg.head_hidden, 3 * cfg.num_recon_points),
        )
        self.mask_token_v = nn.Parameter(torch.zeros(3))
        self.mask_token_p = nn.Parameter(torch.zeros(9))
        self.to(DTYPE)
        self._init_weights(gen)

    def _init_weights(self, gen):
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("mask_token"):
                    p.normal_(0.0, 0.02, generator=gen)
                elif p.ndim == 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.uniform_(-bound, bound, generator=gen)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def substitute_tokens(self, feats, vtok, ptok):
        absolute = torch.where(vtok[..., None], self.mask_token_v.expand_as(feats[..., :3]), feats[..., :3])
        x = torch.cat([absolute, feats[..., 3:]], dim=-1)
        return torch.where(ptok[..., None], self.mask_token_p.expand_as(x), x)

    def encode_voxels(self, x, point_mask):
        h = self.point_mlp(x)
        h = h.masked_fill(~point_mask[..., None], float("-inf"))
        return h.max(dim=1).values

    def backbone(self, h, groups):
        index, valid = groups
        if not self.blocks:
            return self.norm(h)
        flat = index[valid]
        for blk in self.blocks:
            xw = h[index] * valid[..., None]
            out = blk(xw, valid)
            h = h.index_put((flat,), out[valid])
        return self.norm(h)

    def forward(self, batch, groups=None) -> ForwardOutput:
        """Run one frame (``MaskedBatch``) or a list of frames batched together."""
        if not isinstance(batch, MaskedBatch):
            return self.forward_many(batch)
        return self.forward_many([batch])[0]

    def forward_many(self, batches: Sequence[MaskedBatch]) -> list[ForwardOutput]:
        if not batches:
            return []
        for b in batches:
            check_batch(b, self.cfg)
        feats = torch.from_numpy(np.concatenate([b.features for b in batches])).to(DTYPE)
        pmask = torch.from_numpy(np.concatenate([b.point_mask for b in batches]))
        vtok = torch.from_numpy(np.concatenate([b.vtoken_mask for b in batches]))
        ptok = torch.from_numpy(np.concatenate([b.ptoken_mask for b in batches]))
        x = self.substitute_tokens(feats, vtok, ptok)
        h = self.encode_voxels(x, pmask)
        h = self.backbone(h, window_groups(batches))

        outs = []
        offset = 0
        n = self.cfg.num_recon_points
        for b in batches:
            jig = torch.from_numpy(b.jigsaw + offset)
            shp = torch.from_numpy(b.shape + offset)
            logits = self.jigsaw_head(h[jig])
            recon = torch.tanh(self.recon_head(h[shp])).view(-1, n, 3)
            outs.append(ForwardOutput(logits, recon))
            offset += b.num_voxels
        return outs


def check_batch(batch: MaskedBatch, cfg: ModelConfig) -> None:
    if batch.features.ndim != 3 or batch.features.shape[2] != 9:
        raise ShapeMismatchError(f"features must be (N, T, 9), got {batch.features.shape}")
    if batch.window.num_classes != cfg.num_classes:
        raise ShapeMismatchError(
            f"window has {batch.window.num_classes} classes but the model predicts "
            f"{cfg.num_classes}; rebuild the model or fix the window size"
        )


def window_groups(batches: Sequence[MaskedBatch]):
    """Padded ``(W, L)`` voxel index table per non-empty window, and its validity mask."""
    keys = []
    for f, b in enumerate(batches):
        wid = window_id(b.coords, b.window)
        keys.append(np.column_stack([np.full(len(wid), f), wid]))
    keys = np.concatenate(keys)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(order)) - starts[inverse[order]]
    index = np.zeros((len(counts), counts.max()), dtype=np.int64)
    valid = np.zeros_like(index, dtype=bool)
    index[inverse[order], slot] = order
    valid[inverse[order], slot] = True
    return torch.from_numpy(index), torch.from_numpy(valid)


def mvj_loss(logits, labels) -> LossTerm:
    """Mean cross-entropy over position-masked voxels."""
    logits = torch.as_tensor(logits, dtype=DTYPE)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if logits.shape[0] == 0:
        return LossTerm(logits.sum() * 0.0, 0)
    logp = torch.log_softmax(logits, dim=-1)
    return LossTerm(-logp.gather(1, labels[:, None]).mean(), int(logits.shape[0]))


def _pairwise_sq(a, b):
    return ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(-1)


def chamfer_l2(pred, target) -> torch.Tensor:
    """Symmetric L2 Chamfer distance between two point sets of shape ``(n, 3)`` and ``(t, 3)``."""
    pred = torch.as_tensor(pred, dtype=DTYPE).reshape(-1, 3)
    target = torch.as_tensor(target, dtype=DTYPE).reshape(-1, 3)
    if pred.shape[0] == 0 or target.shape[0] == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    d = _pairwise_sq(pred, target)
    return d.min(dim=1).values.mean() + d.min(dim=0).values.mean()


def batched_chamfer_l2(pred, target, target_mask) -> torch.Tensor:
    """Per-voxel Chamfer for ``pred (R, n, 3)`` against padded ``target (R, T, 3)``."""
    target = torch.as_tensor(target, dtype=DTYPE)
    tmask = torch.as_tensor(target_mask)
    if (tmask.sum(dim=1) == 0).any():
        raise ValueError("chamfer distance needs non-empty target sets")
    d = _pairwise_sq(pred, target)  # (R, n, T)
    to_target = d.masked_fill(~tmask[:, None, :], float("inf")).min(dim=2).values.mean(dim=1)
    to_pred = d.min(dim=1).values
    to_pred = (to_pred * tmask).sum(dim=1) / tmask.sum(dim=1)
    return to_target + to_pred


def mvr_loss(recon, targets, target_mask=None) -> LossTerm:
    """Mean Chamfer over shape-masked voxels.

    ``targets`` is either a padded ``(R, T, 3)`` array with ``target_mask`` or a
    list of ``(t_i, 3)`` arrays.
    """
    recon = torch.as_tensor(recon, dtype=DTYPE)
    if target_mask is None:
        targets = list(targets)
        if len(targets) != recon.shape[0]:
            raise ValueError(f"{recon.shape[0]} reconstructions for {len(targets)} targets")
        if not targets:
            return LossTerm(recon.sum() * 0.0, 0)
        per = torch.stack([chamfer_l2(p, t) for p, t in zip(recon, targets)])
        return LossTerm(per.mean(), len(targets))
    if recon.shape[0] != np.shape(targets)[0]:
        raise ValueError(f"{recon.shape[0]} reconstructions for {np.shape(targets)[0]} targets")
    if recon.shape[0] == 0:
        return LossTerm(recon.sum() * 0.0, 0)
    return LossTerm(batched_chamfer_l2(recon, targets, target_mask).mean(), int(recon.shape[0]))


def joint_loss(mvj, mvr, alpha: float = 1.0, beta: float = 1.0):
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    mvj = mvj.value if isinstance(mvj, LossTerm) else mvj
    mvr = mvr.value if isinstance(mvr, LossTerm) else mvr
    return alpha * mvj + beta * mvr


class FrameLosses(NamedTuple):
    total: torch.Tensor
    mvj: LossTerm
    mvr: LossTerm
    correct: int


def frame_losses(out: ForwardOutput, batch: MaskedBatch, alpha=1.0, beta=1.0) -> FrameLosses:
    """Both task losses for one frame; a task whose weight is 0 is switched off and reports 0."""
    if alpha:
        j = mvj_loss(out.logits, batch.jigsaw_labels)
    else:
        j = LossTerm(out.logits.sum() * 0.0, 0)
    if beta:
        r = mvr_loss(out.recon, batch.shape_targets, batch.shape_target_mask)
    else:
        r = LossTerm(out.recon.sum() * 0.0, 0)
    correct = 0
    if j.count:
        pred = out.logits.detach().argmax(dim=1).numpy()
        correct = int((pred == batch.jigsaw_labels).sum())
    return FrameLosses(joint_loss(j, r, alpha, beta), j, r, correct)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total <= 0 or not 0 <= step <= total:
        raise ValueError(f"need 0 <= step <= total and total > 0, got step={step} total={total}")
    if lr_max < 0 or lr_min < 0:
        raise ValueError("learning rates must be non-negative")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def build_optimizer(model: nn.Module, lr: float, weight_decay: float = 0.0,
                    betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.AdamW:
    if lr < 0 or weight_decay < 0 or eps <= 0 or not all(0 <= b < 1 for b in betas):
        raise ValueError("invalid AdamW hyperparameters")
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=tuple(betas), eps=eps,
                             weight_decay=weight_decay)


def adamw_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    """Apply one decoupled-weight-decay update at learning rate ``lr``."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def save_checkpoint(model: MVJARModel, path, extra: dict | None = None) -> None:
    """Versioned binary dump: magic, JSON header, then raw little-endian float64 values."""
    names, shapes, chunks = [], [], []
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f8")
        names.append(name)
        shapes.append(list(arr.shape))
        chunks.append(arr.tobytes())
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "model": asdict(model.cfg),
            "params": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
            "extra": extra or {},
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[MVJARModel, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    model = MVJARModel(ModelConfig(**header["model"]))
    offset = 16 + hlen
    state = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    model.load_state_dict(state)
    return model, header.get("extra", {})


class GradCheckReport(NamedTuple):
    max_rel_error: float
    worst_param: str
    num_checked: int
    per_param: dict


def relative_error(analytic, numeric, floor: float = 1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(model: MVJARModel, loss_fn, h: float = 1e-5, grad_hook=None,
              floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients with central finite differences on every parameter.

    ``loss_fn(model)`` must return a scalar tensor and be deterministic.
    ``grad_hook(name, grad)`` may alter the analytic gradient (used to prove the
    check can fail).
    """
    model.zero_grad(set_to_none=True)
    loss_fn(model).backward()
    analytic = {}
    for name, p in model.named_parameters():
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if grad_hook is not None:
            g = grad_hook(name, g)
        analytic[name] = g.numpy().reshape(-1)
    model.zero_grad(set_to_none=True)

    worst, worst_name, checked, per = 0.0, "", 0, {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            numeric = np.empty(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = loss_fn(model).item()
                flat[i] = orig - h
                fm = loss_fn(model).item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
            err = float(relative_error(analytic[name], numeric, floor).max(initial=0.0))
            per[name] = err
            checked += flat.numel()
            if err > worst:
                worst, worst_name = err, name
    return GradCheckReport(worst, worst_name, checked, per)
