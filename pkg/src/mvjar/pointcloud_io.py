"""Point-cloud frames: binary/text readers, synthetic scenes and sequence manifests."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_BIN_DTYPE = np.dtype("<f4")
_BIN_RECORD = 16


class PointCloudError(ValueError):
    """Raised for malformed point files or manifests."""


@dataclass(frozen=True)
class RawPoint:
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True, eq=False)
class Frame:
    """One LiDAR sweep.

    ``points`` is an ``(n, 4)`` float64 array of ``x, y, z, intensity`` in the
    order the points were read. The array is made read-only on construction.
    """

    points: np.ndarray
    sequence_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise PointCloudError(f"non-finite value in point record {bad}")
        if self.frame_index < 0:
            raise PointCloudError("frame_index must be non-negative")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.sequence_id == other.sequence_id
            and self.frame_index == other.frame_index
            and self.points.shape == other.points.shape
            and self.points.tobytes() == other.points.tobytes()
        )

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def raw_points(self) -> list[RawPoint]:
        return [RawPoint(*map(float, row)) for row in self.points]

    @classmethod
    def from_points(cls, points, sequence_id: str = "", frame_index: int = 0) -> "Frame":
        """Build a frame from ``RawPoint``s or rows of 3 or 4 numbers."""
        rows = []
        for p in points:
            if isinstance(p, RawPoint):
                rows.append((p.x, p.y, p.z, p.intensity))
            else:
                p = tuple(p)
                rows.append(p if len(p) == 4 else (*p, 0.0))
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
        return cls(arr, sequence_id, frame_index)


def read_frame_bin(path, seq: str = "", idx: int = 0) -> Frame:
    """Read a KITTI-style ``.bin`` file of little-endian float32 ``x, y, z, i`` records."""
    data = Path(path).read_bytes()
    if len(data) % _BIN_RECORD:
        raise PointCloudError(
            f"{path}: length {len(data)} not multiple of {_BIN_RECORD}"
        )
    arr = np.frombuffer(data, dtype=_BIN_DTYPE).reshape(-1, 4)
    finite = np.isfinite(arr).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise PointCloudError(f"{path}: non-finite value in record {bad}")
    return Frame(arr.astype(np.float64), seq, idx)


def write_frame_bin(frame: Frame, path) -> None:
    """Write ``frame`` as float32 records. Values are rounded to float32."""
    Path(path).write_bytes(frame.points.astype(_BIN_DTYPE).tobytes())


def read_frame_text(path, seq: str = "", idx: int = 0) -> Frame:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) not in (3, 4):
                raise PointCloudError(
                    f"{path}: line {lineno}: expected 3 or 4 numbers, got {len(parts)}"
                )
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise PointCloudError(f"{path}: line {lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise PointCloudError(f"{path}: line {lineno}: non-finite value")
            if len(vals) == 3:
                vals.append(0.0)
            rows.append(vals)
    return Frame(np.asarray(rows, dtype=np.float64).reshape(-1, 4), seq, idx)


def read_frame(path, seq: str = "", idx: int = 0) -> Frame:
    """Dispatch on extension: ``.bin`` is binary, anything else is text."""
    if str(path).endswith(".bin"):
        return read_frame_bin(path, seq, idx)
    return read_frame_text(path, seq, idx)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a synthetic scene: a noisy ground plane plus axis-aligned boxes.

    ``ground_points`` is the number of ground samples; their xy positions are
    uniform over the range. Box surfaces receive ``points_per_box`` samples
    spread over the four walls and the roof in proportion to area.
    """

    x_range: tuple[float, float] = (0.0, 10.24)
    y_range: tuple[float, float] = (0.0, 10.24)
    z_range: tuple[float, float] = (-2.0, 4.0)
    ground_z: float = -1.5
    num_boxes: int = 4
    box_size_min: tuple[float, float, float] = (0.5, 0.5, 0.5)
    box_size_max: tuple[float, float, float] = (2.0, 2.0, 2.0)
    points_per_box: int = 300
    ground_points: int = 3000
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be increasing, got {(lo, hi)}")
        if not self.z_range[0] <= self.ground_z < self.z_range[1]:
            raise ValueError("ground_z must lie inside z_range")
        if self.num_boxes < 0:
            raise ValueError("num_boxes must be >= 0")
        if any(a <= 0 or b < a for a, b in zip(self.box_size_min, self.box_size_max)):
            raise ValueError("box sizes must satisfy 0 < min <= max")
        if self.ground_points <= 0 or self.points_per_box <= 0:
            raise ValueError("point densities must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _box_surface(rng, lo, hi, count):
    size = hi - lo
    # four walls and the roof; the floor sits on the ground and is not visible
    areas = np.array([
        size[1] * size[2], size[1] * size[2],
        size[0] * size[2], size[0] * size[2],
        size[0] * size[1],
    ])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    uvw = rng.random((count, 3))
    pts = lo + uvw * size
    pts[face == 0, 0] = lo[0]
    pts[face == 1, 0] = hi[0]
    pts[face == 2, 1] = lo[1]
    pts[face == 3, 1] = hi[1]
    pts[face == 4, 2] = hi[2]
    return pts


def generate_synthetic_frame(cfg: SynthConfig, sequence_id: str = "synth", frame_index: int = 0) -> Frame:
    """Deterministic synthetic frame; a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    (x0, x1), (y0, y1), (_, z1) = cfg.x_range, cfg.y_range, cfg.z_range
    ground = np.empty((cfg.ground_points, 3))
    ground[:, 0] = rng.uniform(x0, x1, cfg.ground_points)
    ground[:, 1] = rng.uniform(y0, y1, cfg.ground_points)
    ground[:, 2] = cfg.ground_z
    parts = [ground]

    smin, smax = np.asarray(cfg.box_size_min), np.asarray(cfg.box_size_max)
    for _ in range(cfg.num_boxes):
        size = rng.uniform(smin, smax)
        size[0] = min(size[0], x1 - x0)
        size[1] = min(size[1], y1 - y0)
        size[2] = min(size[2], z1 - cfg.ground_z)
        lo = np.array([
            rng.uniform(x0, x1 - size[0]),
            rng.uniform(y0, y1 - size[1]),
            cfg.ground_z,
        ])
        parts.append(_box_surface(rng, lo, lo + size, cfg.points_per_box))

    xyz = np.concatenate(parts)
    if cfg.noise_sigma > 0:
        xyz = xyz + rng.normal(0.0, cfg.noise_sigma, xyz.shape)
    pts = np.zeros((xyz.shape[0], 4))
    pts[:, :3] = xyz
    # round through float32 so a .bin round trip is exact
    pts = pts.astype(np.float32).astype(np.float64)
    return Frame(pts, sequence_id, frame_index)


@dataclass
class SceneManifest:
    """Ordered mapping of sequence id to its ordered frame paths."""

    sequences: "OrderedDict[str, list[str]]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        self.sequences = OrderedDict((k, list(v)) for k, v in self.sequences.items())
        for sid, paths in self.sequences.items():
            if not paths:
                raise PointCloudError(f"sequence {sid!r} is empty")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def sequence_ids(self) -> list[str]:
        return list(self.sequences)

    @property
    def num_frames(self) -> int:
        return sum(len(v) for v in self.sequences.values())

    def frames(self) -> list[tuple[str, int, str]]:
        return [
            (sid, i, p) for sid, paths in self.sequences.items() for i, p in enumerate(paths)
        ]

    def dumps(self) -> str:
        lines = []
        for sid, paths in self.sequences.items():
            lines.append(f"{sid}:")
            lines.extend(f"  {p}" for p in paths)
        return "\n".join(lines) + "\n"


def parse_manifest(text: str, source: str = "<manifest>") -> SceneManifest:
    """Parse ``seq_id:`` headers followed by indented frame paths.

    Blank lines and ``#`` comments are ignored.
    """
    seqs: OrderedDict[str, list[str]] = OrderedDict()
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if line[0] in " \t":
            if current is None:
                raise PointCloudError(f"{source}: line {lineno}: frame path before any sequence id")
            seqs[current].append(line.strip())
            continue
        sid = line.strip()
        if not sid.endswith(":"):
            raise PointCloudError(f"{source}: line {lineno}: sequence id must end with ':'")
        sid = sid[:-1].strip()
        if not sid:
            raise PointCloudError(f"{source}: line {lineno}: empty sequence id")
        if sid in seqs:
            raise PointCloudError(f"{source}: duplicate sequence id {sid!r}")
        seqs[sid] = []
        current = sid
    for sid, paths in seqs.items():
        if not paths:
            raise PointCloudError(f"{source}: sequence {sid!r} is empty")
    return SceneManifest(seqs)


def load_manifest(path) -> SceneManifest:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PointCloudError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(text, str(path))


def write_manifest(manifest: SceneManifest, path) -> None:
    Path(path).write_text(manifest.dumps(), encoding="utf-8")


def load_manifest_frames(manifest: SceneManifest, root=None, threads: int = 1) -> list[Frame]:
    """Read every frame of ``manifest`` in manifest order.

    Relative paths resolve against ``root``. With ``threads > 1`` files are
    read concurrently; the result order still follows the manifest.
    """
    base = Path(root) if root is not None else Path(".")
    jobs = [(sid, i, p if Path(p).is_absolute() else base / p) for sid, i, p in manifest.frames()]

    def load(job):
        sid, i, p = job
        return read_frame(p, sid, i)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(load, jobs))
    return [load(j) for j in jobs]
