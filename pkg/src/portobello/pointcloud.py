"""Point-cloud storage, file I/O, voxel downsampling, spatial index, map building.

File formats
------------
Map file: three ASCII header lines (``portobello-map v1``, ``count N``,
``fields x y z [i]``) followed by ``N`` binary little-endian float32 records
in declared field order.

Scan file: same header scheme with magic ``portobello-scans v1``; ``count``
is the number of scan records.  Each record is ``stamp`` (u64 LE nanoseconds),
``point count`` (u32 LE), then float32 LE values per point in field order.

A reader for the common PCD subset (ASCII and binary, fields x y z intensity)
is provided for interchange; see :func:`load_pcd`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .frames import RigidTransform, Timestamp

MAP_MAGIC = "portobello-map v1"
SCANS_MAGIC = "portobello-scans v1"


class FormatError(Exception):
    """Malformed cloud/scan file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset


class RegistrationDiverged(Exception):
    """Scan-to-map alignment exceeded the fitness threshold during mapping."""

    def __init__(self, scan_index: int, fitness: float):
        super().__init__(f"registration diverged at scan {scan_index}: fitness {fitness:.4f}")
        self.scan_index = scan_index
        self.fitness = fitness


@dataclass
class PointCloud:
    """Ordered points (N, 3) float64, optional per-point intensity (N,)."""

    points: np.ndarray
    intensity: np.ndarray | None = None
    frame: str = "map"

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.intensity is not None:
            self.intensity = np.ascontiguousarray(np.asarray(self.intensity, dtype=np.float64).reshape(-1))
            if len(self.intensity) != len(self.points):
                raise ValueError("intensity length must match point count")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, t: RigidTransform, frame: str | None = None) -> "PointCloud":
        return PointCloud(
            t.apply(self.points),
            None if self.intensity is None else self.intensity.copy(),
            frame if frame is not None else self.frame,
        )


def transform_cloud(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    return cloud.transformed(t)


class SpatialIndex:
    """Exact nearest-neighbor index over one cloud's points (kd-tree backed)."""

    def __init__(self, points: np.ndarray):
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if len(pts) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, q) -> tuple[np.ndarray, float]:
        d, i = self._tree.query(np.asarray(q, dtype=np.float64))
        return self.points[int(i)], float(d)

    def nearest_batch(self, qs: np.ndarray, max_distance: float = np.inf):
        """Distances and indices for a batch of queries; misses get index == len(self)."""
        return self._tree.query(qs, distance_upper_bound=max_distance)

    def radius_search(self, q, r: float) -> list[tuple[int, float]]:
        """(index, distance) pairs within r of q, sorted ascending by distance."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        idx = self._tree.query_ball_point(np.asarray(q, dtype=np.float64), r)
        d = np.linalg.norm(self.points[idx] - np.asarray(q, dtype=np.float64), axis=1) if idx else np.empty(0)
        order = np.argsort(d, kind="stable")
        return [(int(idx[k]), float(d[k])) for k in order]


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel, at the centroid of that voxel's members."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.empty((0, 3)), None, cloud.frame)
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    intensity = None
    if cloud.intensity is not None:
        isum = np.zeros(len(uniq))
        np.add.at(isum, inverse, cloud.intensity)
        intensity = isum / counts
    return PointCloud(centroids, intensity, cloud.frame)


# ---------------------------------------------------------------------------
# Native file formats


def _write_header(fh, magic: str, count: int, with_intensity: bool) -> None:
    fields = "x y z i" if with_intensity else "x y z"
    fh.write(f"{magic}\ncount {count}\nfields {fields}\n".encode("ascii"))


def _read_header(fh, magic: str, path) -> tuple[int, bool, int]:
    """Returns (count, has_intensity, header_byte_length)."""
    consumed = 0
    lines = []
    for _ in range(3):
        line = fh.readline()
        if not line:
            raise FormatError(f"{path}: truncated header", consumed)
        consumed += len(line)
        lines.append(line.decode("ascii", errors="replace").rstrip("\n"))
    if lines[0] != magic:
        raise FormatError(f"{path}: bad magic {lines[0]!r}, expected {magic!r}", 0)
    if not lines[1].startswith("count "):
        raise FormatError(f"{path}: missing count line", len(lines[0]) + 1)
    try:
        count = int(lines[1].split(" ", 1)[1])
    except ValueError:
        raise FormatError(f"{path}: unparseable count {lines[1]!r}", len(lines[0]) + 1)
    if lines[2] == "fields x y z":
        has_i = False
    elif lines[2] == "fields x y z i":
        has_i = True
    else:
        raise FormatError(f"{path}: unsupported fields {lines[2]!r}", consumed - len(lines[2]) - 1)
    return count, has_i, consumed


def save_cloud(cloud: PointCloud, path) -> None:
    data = cloud.points.astype("<f4")
    if cloud.intensity is not None:
        data = np.c_[data, cloud.intensity.astype("<f4")]
    with open(path, "wb") as fh:
        _write_header(fh, MAP_MAGIC, len(cloud), cloud.intensity is not None)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_cloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        count, has_i, header_len = _read_header(fh, MAP_MAGIC, path)
        width = 4 if has_i else 3
        raw = fh.read()
    expected = count * width * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: body holds {len(raw)} bytes, header declares {expected}",
            header_len + min(len(raw), expected),
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(count, width).astype(np.float64)
    return PointCloud(arr[:, :3], arr[:, 3] if has_i else None)


def save_scans(scans: list[tuple[Timestamp, PointCloud]], path) -> None:
    with_i = any(c.intensity is not None for _, c in scans)
    with open(path, "wb") as fh:
        _write_header(fh, SCANS_MAGIC, len(scans), with_i)
        for stamp, cloud in scans:
            fh.write(struct.pack("<QI", int(stamp), len(cloud)))
            data = cloud.points.astype("<f4")
            if with_i:
                inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
                data = np.c_[data, inten.astype("<f4")]
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_scans(path) -> list[tuple[Timestamp, PointCloud]]:
    with open(path, "rb") as fh:
        count, has_i, offset = _read_header(fh, SCANS_MAGIC, path)
        width = 4 if has_i else 3
        out: list[tuple[Timestamp, PointCloud]] = []
        for k in range(count):
            head = fh.read(12)
            if len(head) != 12:
                raise FormatError(f"{path}: truncated scan record {k}", offset)
            stamp, n = struct.unpack("<QI", head)
            offset += 12
            body = fh.read(n * width * 4)
            if len(body) != n * width * 4:
                raise FormatError(f"{path}: truncated scan record {k}", offset + len(body))
            offset += len(body)
            arr = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(np.float64)
            out.append((stamp, PointCloud(arr[:, :3], arr[:, 3] if has_i else None, frame="vehicle")))
        trailing = fh.read(1)
    if trailing:
        raise FormatError(f"{path}: trailing bytes after {count} declared records", offset)
    return out


def load_pcd(path) -> PointCloud:
    """Reader for the common PCD subset: ascii or binary, fields x y z [intensity]."""
    with open(path, "rb") as fh:
        header: dict[str, list[str]] = {}
        offset = 0
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: missing DATA line", offset)
            offset += len(line)
            text = line.decode("ascii", errors="replace").strip()
            if not text or text.startswith("#"):
                continue
            key, *rest = text.split()
            header[key.upper()] = rest
            if key.upper() == "DATA":
                break
        for req in ("FIELDS", "POINTS", "DATA"):
            if req not in header:
                raise FormatError(f"{path}: PCD header missing {req}", offset)
        fields = [f.lower() for f in header["FIELDS"]]
        for axis in ("x", "y", "z"):
            if axis not in fields:
                raise FormatError(f"{path}: PCD lacks field {axis}", offset)
        count = int(header["POINTS"][0])
        mode = header["DATA"][0].lower()
        sizes = [int(s) for s in header.get("SIZE", ["4"] * len(fields))]
        types = [t.lower() for t in header.get("TYPE", ["f"] * len(fields))]
        if mode == "ascii":
            rows = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=count)
            if rows.shape[0] != count or rows.shape[1] != len(fields):
                raise FormatError(f"{path}: PCD ascii body shape mismatch", offset)
        elif mode == "binary":
            fmt_map = {("f", 4): "f4", ("f", 8): "f8", ("u", 1): "u1", ("u", 2): "u2", ("u", 4): "u4", ("i", 1): "i1", ("i", 2): "i2", ("i", 4): "i4"}
            dtype = np.dtype([(f, "<" + fmt_map[(ty, sz)]) for f, ty, sz in zip(fields, types, sizes)])
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise FormatError(f"{path}: PCD binary body truncated", offset + len(raw))
            rec = np.frombuffer(raw, dtype=dtype)
            rows = np.column_stack([rec[f].astype(np.float64) for f in fields])
        else:
            raise FormatError(f"{path}: unsupported PCD data mode {mode!r}", offset)
    xyz = np.column_stack([rows[:, fields.index(a)] for a in ("x", "y", "z")])
    inten = rows[:, fields.index("intensity")] if "intensity" in fields else None
    return PointCloud(xyz, inten)


def cloud_digest(cloud: PointCloud) -> str:
    """Stable content hash of a cloud, used to pin scenarios to their map."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cloud.points.astype("<f4")).tobytes())
    if cloud.intensity is not None:
        h.update(np.ascontiguousarray(cloud.intensity.astype("<f4")).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Incremental scan-to-map building


@dataclass
class MapBuildConfig:
    voxel_size: float = 0.2
    keyframe_distance: float = 1.0
    keyframe_angle: float = 0.17
    icp: "IcpConfig | None" = None  # defaults resolved in build_map

    def __post_init__(self):
        if self.voxel_size <= 0 or self.keyframe_distance <= 0 or self.keyframe_angle <= 0:
            raise ValueError("map build parameters must be positive")


@dataclass
class PointCloudMap:
    """Immutable built map: cloud + spatial index + registration trajectory."""

    cloud: PointCloud
    index: SpatialIndex
    trajectory: list[RigidTransform] = field(default_factory=list)
    keyframe_indices: list[int] = field(default_factory=list)

    @property
    def digest(self) -> str:
        return cloud_digest(self.cloud)

    @staticmethod
    def from_cloud(cloud: PointCloud, trajectory: list[RigidTransform] | None = None) -> "PointCloudMap":
        return PointCloudMap(cloud, SpatialIndex(cloud.points), trajectory or [])


def _trim_frontier(scan: PointCloud, fraction: float = 0.8) -> PointCloud:
    """Drop the scan's farthest points before alignment.

    The accumulated map ends slightly behind the sensor's forward horizon, so
    far points would match backward onto the map boundary and drag the pose.
    Trimming to a fraction of the scan's own range keeps every aligned point
    inside mapped territory; the full scan is still appended to the map.
    """
    r = np.linalg.norm(scan.points, axis=1)
    keep = r <= fraction * float(r.max())
    if keep.sum() < 16:
        return scan
    return PointCloud(scan.points[keep], None, scan.frame)


def build_map(scans, cfg: MapBuildConfig | None = None) -> PointCloudMap:
    """Register a sequence of ``(PointCloud, prior_delta)`` into one map.

    The first scan defines the map origin.  Each subsequent scan is seeded at
    ``previous_pose . prior`` and refined against the accumulated map; it is
    kept as a keyframe only after sufficient motion.  Raises
    :class:`RegistrationDiverged` when a refined alignment's fitness exceeds
    the ICP threshold.
    """
    from .localization import IcpConfig, NoCorrespondences, icp_align  # late import, avoids cycle

    cfg = cfg or MapBuildConfig()
    icp_cfg = cfg.icp or IcpConfig()

    map_points: list[np.ndarray] = []
    trajectory: list[RigidTransform] = []
    keyframes: list[int] = []
    index: SpatialIndex | None = None
    pose = RigidTransform.identity()
    last_key: RigidTransform | None = None

    for k, (scan, prior) in enumerate(scans):
        if len(scan) == 0:
            raise ValueError(f"scan {k} is empty")
        if index is None:
            pose = RigidTransform.identity()
        else:
            guess = pose.compose(prior)
            try:
                aligned, fitness, _, _ = icp_align(_trim_frontier(scan), index, guess, icp_cfg)
            except NoCorrespondences:
                raise RegistrationDiverged(k, float("inf"))
            if fitness > icp_cfg.fitness_threshold:
                raise RegistrationDiverged(k, fitness)
            pose = aligned
        trajectory.append(pose)

        if last_key is None:
            take = True
        else:
            delta = last_key.inverse().compose(pose)
            take = (
                float(np.linalg.norm(delta.translation)) >= cfg.keyframe_distance
                or delta.rotation_angle() >= cfg.keyframe_angle
            )
        if take:
            reduced = voxel_downsample(scan, cfg.voxel_size)
            map_points.append(pose.apply(reduced.points))
            merged = voxel_downsample(PointCloud(np.vstack(map_points)), cfg.voxel_size)
            index = SpatialIndex(merged.points)
            last_key = pose
            keyframes.append(k)

    if index is None:
        raise ValueError("no scans provided")
    final = voxel_downsample(PointCloud(np.vstack(map_points)), cfg.voxel_size)
    return PointCloudMap(final, SpatialIndex(final.points), trajectory, keyframes)
