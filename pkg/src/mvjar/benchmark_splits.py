"""Sequence-based fine-tuning splits and the legacy uniform-frame sampler.

Sequence splits are nested prefixes of one seeded shuffle of the sequence
ids, so every larger split contains the smaller ones. The uniform sampler
keeps every k-th frame of every sequence; the diversity report makes the
difference in scene coverage between the two explicit.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .pointcloud_io import SceneManifest

logger = logging.getLogger(__name__)

DEFAULT_PERCENTS = (0.05, 0.10, 0.20, 0.50)


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def split_size(percent: float, num_sequences: int) -> int:
    return round_half_up(Fraction(str(percent)) * num_sequences)


def manifest_hash(manifest: SceneManifest) -> str:
    return hashlib.sha256(manifest.dumps().encode()).hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    percents: tuple[float, ...] = DEFAULT_PERCENTS
    subset_count: int = 3
    repeated: int = 2  # how many of the smallest percents get extra subsets
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "percents", tuple(float(p) for p in self.percents))
        if not self.percents:
            raise ValueError("at least one percent is required")
        if list(self.percents) != sorted(self.percents):
            raise ValueError("percents must be sorted ascending")
        if any(not 0 < p <= 1 for p in self.percents):
            raise ValueError("percents must lie in (0, 1]")
        if self.subset_count < 1:
            raise ValueError("subset_count must be >= 1")
        if self.repeated < 0:
            raise ValueError("repeated must be >= 0")


@dataclass(frozen=True)
class SplitBlock:
    percent: float
    subset_index: int
    sequence_ids: tuple[str, ...]


@dataclass
class SplitResult:
    blocks: list[SplitBlock]
    seed: int
    manifest_hash: str
    num_sequences: int = 0

    def main_chain(self) -> list[SplitBlock]:
        return [b for b in self.blocks if b.subset_index == 0]

    def block(self, percent: float, subset_index: int = 0) -> SplitBlock:
        for b in self.blocks:
            if b.subset_index == subset_index and math.isclose(b.percent, percent):
                return b
        raise KeyError((percent, subset_index))

    def dumps(self) -> str:
        out = [
            f"# seed: {self.seed}",
            f"# manifest_sha256: {self.manifest_hash}",
            f"# num_sequences: {self.num_sequences}",
        ]
        for b in self.blocks:
            out.append(f"[percent={b.percent!r} subset={b.subset_index} count={len(b.sequence_ids)}]")
            out.extend(b.sequence_ids)
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SplitResult":
        meta, blocks, cur = {}, [], None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
            elif line.startswith("["):
                fields = dict(kv.split("=") for kv in line.strip("[]").split())
                cur = [float(fields["percent"]), int(fields["subset"]), []]
                blocks.append(cur)
            else:
                if cur is None:
                    raise ValueError("sequence id before any block header")
                cur[2].append(line)
        return cls(
            [SplitBlock(p, s, tuple(ids)) for p, s, ids in blocks],
            int(meta.get("seed", 0)),
            meta.get("manifest_sha256", ""),
            int(meta.get("num_sequences", 0)),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, SplitResult) and self.dumps() == other.dumps()


def _shuffled(ids: list[str], seed: int, stream: int) -> list[str]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))
    return [ids[i] for i in rng.permutation(len(ids))]


def sample_sequence_splits(manifest: SceneManifest, spec: SplitSpec = SplitSpec()) -> SplitResult:
    ids = manifest.sequence_ids
    if not ids:
        raise ValueError("manifest has no sequences")
    position = {sid: i for i, sid in enumerate(ids)}

    def normalized(chosen):
        return tuple(sorted(chosen, key=position.__getitem__))

    sizes = []
    for p in spec.percents:
        size = split_size(p, len(ids))
        if size == 0:
            raise ValueError(f"split would be empty: {p:g} of {len(ids)} sequences")
        sizes.append(size)

    main = _shuffled(ids, spec.seed, 0)
    blocks = [SplitBlock(p, 0, normalized(main[:n])) for p, n in zip(spec.percents, sizes)]
    for rank, (p, n) in enumerate(zip(spec.percents, sizes)):
        if rank >= spec.repeated:
            break
        for sub in range(1, spec.subset_count):
            order = _shuffled(ids, spec.seed, 1000 * (rank + 1) + sub)
            blocks.append(SplitBlock(p, sub, normalized(order[:n])))
    return SplitResult(blocks, spec.seed, manifest_hash(manifest), len(ids))


def sample_uniform_frame_split(manifest: SceneManifest, p: float, seed: int = 0,
                               offset: int | None = None) -> list[str]:
    """Every k-th frame of every sequence, ``k = round(1 / p)``.

    The start offset is drawn from ``seed`` unless given. Sequences shorter
    than the offset still contribute one frame.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    k = max(1, round_half_up(1 / Fraction(str(p))))
    if offset is None:
        offset = int(np.random.default_rng(seed).integers(k))
    if not 0 <= offset < k:
        raise ValueError(f"offset must lie in [0, {k})")
    out = []
    short = []
    for sid, paths in manifest.sequences.items():
        picked = paths[offset::k]
        if not picked:
            short.append(sid)
            picked = [paths[offset % len(paths)]]
        out.extend(picked)
    if short:
        warnings.warn(
            f"stride {k} exceeds the length of {len(short)} sequence(s); "
            "each contributes one frame",
            stacklevel=2,
        )
    return out


def sequence_split_frames(manifest: SceneManifest, sequence_ids) -> list[str]:
    unknown = [s for s in sequence_ids if s not in manifest.sequences]
    if unknown:
        raise KeyError(f"unknown sequence ids: {unknown[:5]}")
    return [p for s in sequence_ids for p in manifest.sequences[s]]


@dataclass
class DiversityReport:
    sequences_touched: int
    num_frames: int
    frames_per_sequence: dict[int, int] = field(default_factory=dict)
    coverage: float = 0.0

    def dumps(self) -> str:
        hist = " ".join(f"{k}:{v}" for k, v in sorted(self.frames_per_sequence.items()))
        return (
            f"sequences_touched: {self.sequences_touched}\n"
            f"frames: {self.num_frames}\n"
            f"coverage: {self.coverage:.6f}\n"
            f"frames_per_sequence: {hist}\n"
        )


def diversity_report(manifest: SceneManifest, sequence_ids=None, frame_paths=None) -> DiversityReport:
    """Scene coverage of a split given either its sequence ids or its frame paths."""
    if (sequence_ids is None) == (frame_paths is None):
        raise ValueError("pass exactly one of sequence_ids or frame_paths")
    if sequence_ids is not None:
        unknown = [s for s in sequence_ids if s not in manifest.sequences]
        if unknown:
            raise KeyError(f"unknown sequence ids: {unknown[:5]}")
        per_seq = Counter({s: len(manifest.sequences[s]) for s in set(sequence_ids)})
    else:
        owner = {}
        for sid, paths in manifest.sequences.items():
            for p in paths:
                owner.setdefault(p, sid)
        unknown = [p for p in frame_paths if p not in owner]
        if unknown:
            raise KeyError(f"unknown frame paths: {unknown[:5]}")
        per_seq = Counter(owner[p] for p in frame_paths)
    hist = Counter(per_seq.values())
    touched = len(per_seq)
    return DiversityReport(
        sequences_touched=touched,
        num_frames=sum(per_seq.values()),
        frames_per_sequence=dict(sorted(hist.items())),
        coverage=touched / len(manifest),
    )
