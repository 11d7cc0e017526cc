"""Coordinate-frame tree with timestamped, interpolated transform lookup.

Conventions used throughout the package:

* A ``RigidTransform`` stores a unit quaternion ``(w, x, y, z)`` plus a
  translation in meters.  ``a.compose(b)`` applies ``b`` first, then ``a``,
  i.e. it equals the 4x4 matrix product ``A @ B``.
* An edge ``parent -> child`` in the tree stores the pose of the child frame
  expressed in the parent frame, so chaining edges down from a common root
  gives root->frame poses, and ``lookup(target, source, t)`` returns the
  transform mapping source-frame coordinates into the target frame.
* Timestamps are integer nanoseconds on a monotonic run clock.

Quaternions are canonicalized to ``w >= 0`` on construction so that equal
rotations compare equal.  Edge buffers are replaced copy-on-write, which keeps
lookups safe against one concurrent writer without readers taking a lock.
"""

from __future__ import annotations

import math
import threading
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

Timestamp = int  # nanoseconds

NANOS_PER_SEC = 1_000_000_000

# Unit-norm drift tolerated after construction or composition.
_NORM_TOL = 1e-9


def sec_to_nanos(seconds: float) -> Timestamp:
    return int(round(seconds * NANOS_PER_SEC))


def nanos_to_sec(nanos: Timestamp) -> float:
    return nanos / NANOS_PER_SEC


class FrameTreeError(Exception):
    pass


class CycleError(FrameTreeError):
    """Inserting the edge would create a cycle in the frame graph."""


class ReparentError(FrameTreeError):
    """The child frame already has a different parent."""


class UnknownFrame(FrameTreeError):
    """A queried frame id is not present in the tree."""


class ExtrapolationError(FrameTreeError):
    """Query time falls outside an edge's buffer beyond the allowed slack."""


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # v' = v + 2*u x (u x v + w*v), u = quaternion vector part
    u = q[1:]
    w = q[0]
    uv = np.cross(u, v)
    return v + 2.0 * np.cross(u, uv + w * v)


def _canonical(q: np.ndarray) -> np.ndarray:
    d = float(np.dot(q, q))
    if d == 0.0 or not math.isfinite(d):
        raise ValueError("quaternion has zero or non-finite norm")
    # Skip the division when already unit-norm so construction is idempotent
    # at the bit level (file round-trips reproduce values exactly).
    if abs(d - 1.0) > 1e-14:
        q = q / math.sqrt(d)
    if q[0] < 0.0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) pose: unit quaternion ``(w, x, y, z)`` and translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self) -> int:
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __post_init__(self):
        q = _canonical(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0.0:
            if angle != 0.0:
                raise ValueError("zero axis with nonzero angle")
            return RigidTransform(np.array([1.0, 0, 0, 0]), np.asarray(translation))
        axis = axis / n
        h = 0.5 * angle
        q = np.concatenate(([math.cos(h)], math.sin(h) * axis))
        return RigidTransform(q, np.asarray(translation, dtype=np.float64))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform.from_axis_angle((0.0, 0.0, 1.0), yaw, translation)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        """Build from a 4x4 (or 3x4) homogeneous matrix. Used mainly by oracles."""
        m = np.asarray(m, dtype=np.float64)
        r = m[:3, :3]
        t = m[:3, 3]
        # Shepperd's method, numerically stable for all quadrant signs.
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = np.array(
                [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
            )
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
        return RigidTransform(q, t)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        w, x, y, z = self.rotation
        r = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Apply ``other`` first, then ``self``."""
        q = _quat_mul(self.rotation, other.rotation)
        t = self.translation + _quat_rotate(self.rotation, other.translation)
        return RigidTransform(q, t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        qc = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(qc, -_quat_rotate(qc, self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        w, x, y, z = self.rotation
        r = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return pts @ r.T + self.translation

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]; atan2 form stays accurate near 0."""
        v = float(np.linalg.norm(self.rotation[1:]))
        w = abs(float(self.rotation[0]))
        return 2.0 * math.atan2(v, w)

    def rotation_axis_angle(self) -> tuple[np.ndarray, float]:
        angle = self.rotation_angle()
        u = self.rotation[1:]
        n = np.linalg.norm(u)
        if n < 1e-15:
            return np.array([0.0, 0.0, 1.0]), 0.0
        return u / n, angle

    def yaw(self) -> float:
        """Heading about +Z extracted from the rotation."""
        w, x, y, z = self.rotation
        return math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))

    def is_normalized(self, tol: float = _NORM_TOL) -> bool:
        return abs(float(np.dot(self.rotation, self.rotation)) - 1.0) <= tol

    def approx_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        d = self.inverse().compose(other)
        return float(np.linalg.norm(d.translation)) <= tol and d.rotation_angle() <= tol

    def to_json(self) -> dict:
        return {"q": [float(v) for v in self.rotation], "t": [float(v) for v in self.translation]}

    @staticmethod
    def from_json(obj: dict) -> "RigidTransform":
        return RigidTransform(np.asarray(obj["q"], dtype=np.float64), np.asarray(obj["t"], dtype=np.float64))


def slerp(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions, shortest path."""
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    dot = min(1.0, dot)
    theta = math.acos(dot)
    if theta < 1e-10:
        out = (1.0 - alpha) * a + alpha * b
        return out / np.linalg.norm(out)
    s = math.sin(theta)
    return (math.sin((1.0 - alpha) * theta) / s) * a + (math.sin(alpha * theta) / s) * b


def interpolate(a: RigidTransform, b: RigidTransform, alpha: float) -> RigidTransform:
    """Linear translation / spherical rotation blend, alpha in [0, 1]."""
    t = (1.0 - alpha) * a.translation + alpha * b.translation
    return RigidTransform(slerp(a.rotation, b.rotation, alpha), t)


@dataclass(frozen=True)
class StampedTransform:
    parent: str
    child: str
    stamp: Timestamp
    transform: RigidTransform

    def __post_init__(self):
        if self.parent == self.child:
            raise ValueError("parent and child frames must differ")
        if self.stamp < 0:
            raise ValueError("stamp must be non-negative")


class FrameTree:
    """Single-root-per-component frame graph with time-buffered edges.

    One writer may call :meth:`set_transform` while other threads call
    :meth:`lookup`; buffers are swapped whole so a reader never sees a
    half-inserted edge.
    """

    def __init__(self, retention_sec: float = 10.0, extrapolation_slack_sec: float = 0.1):
        self.retention = sec_to_nanos(retention_sec)
        self.slack = sec_to_nanos(extrapolation_slack_sec)
        self._parent_of: dict[str, str] = {}
        self._buffers: dict[tuple[str, str], tuple[StampedTransform, ...]] = {}
        self._write_lock = threading.Lock()

    def frames(self) -> set[str]:
        out = set(self._parent_of)
        out.update(self._parent_of.values())
        return out

    def set_transform(self, st: StampedTransform) -> None:
        with self._write_lock:
            existing = self._parent_of.get(st.child)
            if existing is not None and existing != st.parent:
                raise ReparentError(f"frame {st.child!r} already has parent {existing!r}")
            if existing is None and self._would_cycle(st.parent, st.child):
                raise CycleError(f"edge {st.parent!r}->{st.child!r} would close a cycle")
            key = (st.parent, st.child)
            buf = list(self._buffers.get(key, ()))
            stamps = [e.stamp for e in buf]
            i = bisect_left(stamps, st.stamp)
            if i < len(buf) and buf[i].stamp == st.stamp:
                buf[i] = st
            else:
                buf.insert(i, st)
            horizon = buf[-1].stamp - self.retention
            while buf and buf[0].stamp < horizon:
                buf.pop(0)
            # Publish atomically: register the child before the buffer so a
            # concurrent lookup never finds an edge without data.
            self._buffers[key] = tuple(buf)
            self._parent_of[st.child] = st.parent

    def _would_cycle(self, parent: str, child: str) -> bool:
        node = parent
        while node is not None:
            if node == child:
                return True
            node = self._parent_of.get(node)
        return False

    def _ancestry(self, frame: str) -> list[str]:
        chain = [frame]
        node = frame
        while node in self._parent_of:
            node = self._parent_of[node]
            chain.append(node)
        return chain

    def _edge_at(self, parent: str, child: str, at: Timestamp) -> RigidTransform:
        buf = self._buffers[(parent, child)]
        stamps = [e.stamp for e in buf]
        i = bisect_left(stamps, at)
        if i < len(buf) and buf[i].stamp == at:
            return buf[i].transform
        if i == 0:
            if buf[0].stamp - at > self.slack:
                raise ExtrapolationError(
                    f"{parent}->{child}: t={at} precedes buffer start {buf[0].stamp}"
                )
            return buf[0].transform
        if i == len(buf):
            if at - buf[-1].stamp > self.slack:
                raise ExtrapolationError(
                    f"{parent}->{child}: t={at} beyond buffer end {buf[-1].stamp}"
                )
            return buf[-1].transform
        lo, hi = buf[i - 1], buf[i]
        alpha = (at - lo.stamp) / (hi.stamp - lo.stamp)
        return interpolate(lo.transform, hi.transform, alpha)

    def lookup(self, target: str, source: str, at: Timestamp) -> RigidTransform:
        """Transform taking source-frame coordinates into the target frame."""
        known = self.frames()
        if target not in known:
            raise UnknownFrame(target)
        if source not in known:
            raise UnknownFrame(source)
        if target == source:
            return RigidTransform.identity()

        up_t = self._ancestry(target)
        up_s = self._ancestry(source)
        common = None
        in_t = set(up_t)
        for node in up_s:
            if node in in_t:
                common = node
                break
        if common is None:
            raise UnknownFrame(f"no path between {target!r} and {source!r}")

        def chain_to(frame_chain: list[str]) -> RigidTransform:
            # Compose common->frame by walking down the parent edges.
            out = RigidTransform.identity()
            idx = frame_chain.index(common)
            for k in range(idx, 0, -1):
                out = out.compose(self._edge_at(frame_chain[k], frame_chain[k - 1], at))
            return out

        t_common_target = chain_to(up_t)
        t_common_source = chain_to(up_s)
        return t_common_target.inverse().compose(t_common_source)
