"""Choose which non-empty voxels to mask and split them between the two pretext tasks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels


class SamplingStrategy(str, enum.Enum):
    RFVS = "rfvs"  # furthest-sampled voxels are kept, the rest masked
    FVS = "fvs"  # furthest-sampled voxels are masked
    RANDOM = "random"

    @classmethod
    def parse(cls, value) -> "SamplingStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", ""))
        except ValueError:
            raise ValueError(
                f"unknown sampling strategy {value!r}; expected one of rfvs, fvs, random"
            ) from None


def _ratio(value) -> Fraction:
    # exact decimal semantics: 0.1 + 0.05 must give 3/20, not 0.15000000000000002
    return Fraction(str(value))


def mask_counts(n: int, r_p, r_s) -> tuple[int, int, int]:
    """Return ``(kept, jigsaw, shape)`` sizes for ``n`` voxels."""
    rp, rs = _ratio(r_p), _ratio(r_s)
    if rp < 0 or rs < 0:
        raise ValueError("masking ratios must be non-negative")
    if rp + rs >= 1:
        raise ValueError(f"r_p + r_s must be < 1, got {float(rp + rs)}")
    kept = math.floor(n * (1 - rp - rs))
    masked = n - kept
    jigsaw = min(math.ceil(n * rp), masked)
    return kept, jigsaw, masked - jigsaw


def lexicographic_start(coords: np.ndarray) -> int:
    """Index of the coordinate with the smallest ``(k, j, i)``; lowest index on ties."""
    c = np.asarray(coords)
    order = np.lexsort((np.arange(len(c)), c[:, 0], c[:, 1], c[:, 2]))
    return int(order[0])


def furthest_voxel_sampling(coords, k: int) -> np.ndarray:
    """Greedy furthest sampling over voxel grid coordinates.

    Starts from the lexicographically smallest ``(k, j, i)`` voxel and returns
    indices in selection order. Distances are Euclidean in index space.
    """
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = c.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= N={n}, got {k}")
    return kernels.furthest_sampling(c, int(k), lexicographic_start(c))


@dataclass(frozen=True)
class MaskPlan:
    kept: np.ndarray
    jigsaw_masked: np.ndarray
    shape_masked: np.ndarray
    strategy: SamplingStrategy
    r_p: float
    r_s: float
    seed: int

    @property
    def num_voxels(self) -> int:
        return len(self.kept) + len(self.jigsaw_masked) + len(self.shape_masked)

    @property
    def masked(self) -> np.ndarray:
        return np.sort(np.concatenate([self.jigsaw_masked, self.shape_masked]))

    def dumps(self) -> str:
        def ids(a):
            return " ".join(str(int(v)) for v in a)

        return (
            f"strategy: {self.strategy.value}\n"
            f"seed: {self.seed}\n"
            f"r_p: {self.r_p!r}\n"
            f"r_s: {self.r_s!r}\n"
            f"num_voxels: {self.num_voxels}\n"
            f"kept: {ids(self.kept)}\n"
            f"jigsaw: {ids(self.jigsaw_masked)}\n"
            f"shape: {ids(self.shape_masked)}\n"
        )

    @classmethod
    def loads(cls, text: str) -> "MaskPlan":
        fields = {}
        for line in text.splitlines():
            if ":" in line:
                key, _, val = line.partition(":")
                fields[key.strip()] = val.strip()

        def arr(key):
            return np.array([int(v) for v in fields[key].split()], dtype=np.int64)

        return cls(
            arr("kept"), arr("jigsaw"), arr("shape"),
            SamplingStrategy.parse(fields["strategy"]),
            float(fields["r_p"]), float(fields["r_s"]), int(fields["seed"]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return self.dumps() == other.dumps()


def build_mask_plan(vf_or_coords, strategy="rfvs", r_p=0.1, r_s=0.05, seed: int = 0) -> MaskPlan:
    """Partition voxel indices into kept, jigsaw-masked and shape-masked sets.

    Accepts a ``VoxelizedFrame`` or an ``(N, 3)`` coordinate array.
    """
    strategy = SamplingStrategy.parse(strategy)
    coords = getattr(vf_or_coords, "coords", vf_or_coords)
    coords = np.asarray(coords).reshape(-1, 3)
    n = coords.shape[0]
    if n == 0:
        raise ValueError("cannot build a mask plan for an empty frame")
    n_kept, n_jig, _ = mask_counts(n, r_p, r_s)
    n_masked = n - n_kept
    rng = np.random.default_rng(seed)

    if n_masked == 0:
        masked = np.empty(0, dtype=np.int64)
    elif strategy is SamplingStrategy.RFVS:
        keep = furthest_voxel_sampling(coords, n_kept) if n_kept else np.empty(0, np.int64)
        is_masked = np.ones(n, dtype=bool)
        is_masked[keep] = False
        masked = np.flatnonzero(is_masked)
    elif strategy is SamplingStrategy.FVS:
        masked = np.sort(furthest_voxel_sampling(coords, n_masked))
    else:
        masked = np.sort(rng.choice(n, size=n_masked, replace=False))

    is_kept = np.ones(n, dtype=bool)
    is_kept[masked] = False
    shuffled = rng.permutation(masked)
    return MaskPlan(
        kept=np.flatnonzero(is_kept).astype(np.int64),
        jigsaw_masked=np.sort(shuffled[:n_jig]).astype(np.int64),
        shape_masked=np.sort(shuffled[n_jig:]).astype(np.int64),
        strategy=strategy,
        r_p=float(r_p),
        r_s=float(r_s),
        seed=int(seed),
    )


def epoch_seed(base_seed: int, epoch: int, frame: int) -> int:
    """Mask seed for one frame in one epoch."""
    ss = np.random.SeedSequence([int(base_seed), int(epoch), int(frame)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
