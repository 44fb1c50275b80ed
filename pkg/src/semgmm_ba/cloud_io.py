"""Scan/label/trajectory file handling and per-label layer splitting.

File conventions follow the common KITTI odometry layout so real captures
can be ingested unmodified:

  - scans:      *.bin, 4 little-endian float32 per point (x, y, z, intensity)
  - labels:     *.label, 1 little-endian uint32 per point, low 16 bits = class
  - trajectory: plain text, 12 reals per line, row-major 3x4 [R|t]
  - label map:  text, one "id name stable|excluded" triple per line, '#' comments
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, orthonormalize

log = logging.getLogger(__name__)

DEFAULT_MAX_RANGE = 120.0

RECORD_BYTES = 16  # 4 x float32
LABEL_BYTES = 4  # 1 x uint32


class FormatError(Exception):
    """A file does not follow its declared binary or text layout."""


@dataclass(frozen=True)
class LabeledPoint:
    position: np.ndarray
    label: int


@dataclass(frozen=True)
class Scan:
    """One LiDAR scan: point positions plus per-point semantic class ids.

    ``source_indices`` maps each retained point back to its record index in
    the originating file so label files (one record per raw point) can be
    paired even when unreadable records were skipped.
    """

    index: int
    positions: np.ndarray  # (N, 3) float64, sensor frame
    labels: np.ndarray  # (N,) uint16 class ids
    source_indices: np.ndarray = None
    raw_count: int = -1

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        lab = np.asarray(self.labels, dtype=np.uint16).reshape(-1)
        if len(pos) != len(lab):
            raise ValueError(f"{len(pos)} positions vs {len(lab)} labels")
        src = self.source_indices
        src = np.arange(len(pos)) if src is None else np.asarray(src, dtype=np.int64)
        raw = len(pos) if self.raw_count < 0 else self.raw_count
        for a in (pos, lab, src):
            a.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "source_indices", src)
        object.__setattr__(self, "raw_count", raw)

    @property
    def point_count(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return len(self.positions)

    def point(self, i: int) -> LabeledPoint:
        return LabeledPoint(self.positions[i], int(self.labels[i]))

    def label_indices(self, label: int) -> np.ndarray:
        """Indices of the points carrying ``label`` (memoized)."""
        cache = getattr(self, "_label_idx_cache", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_label_idx_cache", cache)
        if label not in cache:
            cache[label] = np.flatnonzero(self.labels == label)
        return cache[label]


@dataclass(frozen=True)
class SemanticLayer:
    """Indices of the points of one scan (or aggregate cloud) sharing a label."""

    label: int
    point_refs: np.ndarray

    def __len__(self) -> int:
        return len(self.point_refs)


@dataclass(frozen=True)
class LabelMap:
    """name <-> class-id table with a stable/excluded flag per class."""

    entries: dict = field(default_factory=dict)  # id -> (name, stable)

    def __post_init__(self):
        names = [name for name, _ in self.entries.values()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names in label map")

    @property
    def ids(self) -> list:
        return sorted(self.entries)

    def name_of(self, label_id: int) -> str:
        return self.entries[label_id][0]

    def id_of(self, name: str) -> int:
        for label_id, (n, _) in self.entries.items():
            if n == name:
                return label_id
        raise KeyError(f"unknown class name {name!r}")

    def is_stable(self, label_id: int) -> bool:
        entry = self.entries.get(label_id)
        return entry is not None and entry[1]

    def stable_ids(self) -> list:
        return sorted(i for i, (_, stable) in self.entries.items() if stable)

    def resolve(self, names) -> list:
        """Class ids for a list of names; unknown names raise KeyError."""
        return [self.id_of(n) for n in names]


def default_label_map() -> LabelMap:
    """SemanticKITTI-style classes; dynamic classes excluded."""
    stable = {
        10: "car",
        40: "road",
        44: "parking",
        48: "sidewalk",
        50: "building",
        51: "fence",
        60: "lane-marking",
        70: "vegetation",
        71: "trunk",
        72: "terrain",
        80: "pole",
        81: "traffic-sign",
    }
    excluded = {
        30: "person",
        31: "bicyclist",
        32: "motorcyclist",
        252: "moving-car",
        253: "moving-bicyclist",
        254: "moving-person",
        255: "moving-motorcyclist",
        256: "moving-on-rails",
        257: "moving-bus",
        258: "moving-truck",
        259: "moving-other-vehicle",
    }
    entries = {i: (n, True) for i, n in stable.items()}
    entries.update({i: (n, False) for i, n in excluded.items()})
    return LabelMap(entries)


def parse_label_map(text: str) -> LabelMap:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("stable", "excluded"):
            raise FormatError(
                f"label map line {lineno}: expected 'id name stable|excluded', got {raw!r}"
            )
        label_id = int(parts[0])
        if label_id in entries:
            raise FormatError(f"label map line {lineno}: duplicate id {label_id}")
        entries[label_id] = (parts[1], parts[2] == "stable")
    return LabelMap(entries)


def read_label_map(path) -> LabelMap:
    with open(path, "r", encoding="utf-8") as f:
        return parse_label_map(f.read())


def write_label_map(path, label_map: LabelMap) -> None:
    lines = ["# id name stable|excluded"]
    for label_id in label_map.ids:
        name, stable = label_map.entries[label_id]
        lines.append(f"{label_id} {name} {'stable' if stable else 'excluded'}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_scan(path, index: int = 0, max_range: float = DEFAULT_MAX_RANGE) -> Scan:
    """Read a *.bin point file; labels default to 0 until paired.

    Records with non-finite floats are skipped; points beyond ``max_range``
    are dropped; both counts are reported via logging.
    """
    nbytes = os.path.getsize(path)
    if nbytes % RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: truncated record at byte offset {nbytes - nbytes % RECORD_BYTES} "
            f"(file holds {nbytes} bytes, not a multiple of {RECORD_BYTES})"
        )
    records = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    positions = records[:, :3].astype(float)

    finite = np.all(np.isfinite(positions), axis=1)
    n_nonfinite = int(np.count_nonzero(~finite))
    if n_nonfinite:
        log.warning("%s: skipped %d records with non-finite coordinates", path, n_nonfinite)
    in_range = finite.copy()
    in_range[finite] &= np.linalg.norm(positions[finite], axis=1) <= max_range
    n_far = int(np.count_nonzero(finite & ~in_range))
    if n_far:
        log.info("%s: dropped %d points beyond %.1f m", path, n_far, max_range)

    keep = np.flatnonzero(in_range)
    return Scan(
        index=index,
        positions=positions[keep],
        labels=np.zeros(len(keep), dtype=np.uint16),
        source_indices=keep.astype(np.int64),
        raw_count=len(records),
    )


def read_labels(path, scan: Scan) -> Scan:
    """Attach semantic class ids from a *.label file positionally."""
    raw = np.fromfile(path, dtype="<u4")
    if raw.size != scan.raw_count:
        raise FormatError(
            f"{path}: {raw.size} label records vs {scan.raw_count} scan records"
        )
    class_ids = (raw & 0xFFFF).astype(np.uint16)  # high 16 bits = instance id
    return Scan(
        index=scan.index,
        positions=scan.positions,
        labels=class_ids[scan.source_indices],
        source_indices=scan.source_indices,
        raw_count=scan.raw_count,
    )


def write_scan(path, scan: Scan) -> None:
    records = np.zeros((scan.point_count, 4), dtype="<f4")
    records[:, :3] = scan.positions
    records.tofile(path)


def write_labels(path, scan: Scan) -> None:
    scan.labels.astype("<u4").tofile(path)


def read_poses(path) -> list:
    """Read a KITTI-style trajectory: 12 reals per line, row-major 3x4 [R|t].

    Rotations are re-orthonormalized (polar decomposition); a warning is
    emitted when the raw matrix deviates from orthonormal by more than 1e-3.
    """
    poses = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
            try:
                vals = np.array([float(t) for t in tokens])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            M = vals.reshape(3, 4)
            R = M[:, :3]
            deviation = np.max(np.abs(R.T @ R - np.eye(3)))
            if deviation > 1e-3:
                log.warning(
                    "%s:%d: rotation deviates from orthonormal by %.2e, re-orthonormalizing",
                    path,
                    lineno,
                    deviation,
                )
            poses.append(Pose(orthonormalize(R), M[:, 3]))
    return poses


def write_poses(path, poses) -> None:
    lines = []
    for pose in poses:
        M = np.hstack([pose.rotation, pose.translation.reshape(3, 1)])
        lines.append(" ".join(f"{v:.17g}" for v in M.reshape(-1)))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def split_layers(scan: Scan, label_map: LabelMap) -> list:
    """Partition a labeled scan into per-class layers.

    Points whose class is excluded or absent from the map land in no layer.
    """
    layers = []
    for label_id in np.unique(scan.labels):
        if not label_map.is_stable(int(label_id)):
            continue
        refs = np.flatnonzero(scan.labels == label_id)
        layers.append(SemanticLayer(label=int(label_id), point_refs=refs))
    return layers
