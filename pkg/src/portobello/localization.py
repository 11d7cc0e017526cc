"""Scan-to-map pose estimation with constant-velocity prediction.

The estimator is deliberately plain: point-to-point ICP where each iteration
matches scan points to their nearest map point within a gating distance and
solves the rigid least-squares alignment in closed form (SVD on the centered
correlation matrix, reflection-corrected).  Between scans a constant-velocity
model carries the pose forward; velocities live in the map frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frames import RigidTransform, Timestamp, nanos_to_sec
from .pointcloud import PointCloud, SpatialIndex, voxel_downsample


class NoCorrespondences(Exception):
    """No scan point found a map neighbor within the gating distance."""


class InitializationFailed(Exception):
    """No initialization candidate produced a converged alignment."""


@dataclass
class IcpConfig:
    max_iterations: int = 30
    max_correspondence_distance: float = 1.0
    convergence_translation: float = 1e-4
    convergence_rotation: float = 1e-4
    fitness_threshold: float = 0.25  # mean squared distance, m^2

    def __post_init__(self):
        if min(self.max_iterations, self.max_correspondence_distance,
               self.convergence_translation, self.convergence_rotation,
               self.fitness_threshold) <= 0:
            raise ValueError("ICP parameters must be positive")


@dataclass(frozen=True)
class PoseEstimate:
    stamp: Timestamp
    map_to_vehicle: RigidTransform
    fitness: float
    iterations_used: int
    converged: bool


@dataclass(frozen=True)
class MotionState:
    pose: RigidTransform
    linear_velocity: np.ndarray  # m/s, map frame
    angular_velocity: np.ndarray  # rad/s, map frame
    stamp: Timestamp


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping src onto dst."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    diag = np.diag([1.0, 1.0, d])
    r = vt.T @ diag @ u.T
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = cd - r @ cs
    return RigidTransform.from_matrix(m)


def icp_align(
    scan: PointCloud,
    map_index: SpatialIndex,
    guess: RigidTransform,
    cfg: IcpConfig | None = None,
    fitness_trace: list[float] | None = None,
) -> tuple[RigidTransform, float, int, bool]:
    """Align a vehicle-frame scan to the map; returns (pose, fitness, iters, converged).

    Fitness is the mean squared distance over the final inlier correspondences.
    ``converged`` requires both hitting the motion thresholds before running
    out of iterations and a final fitness at or below the threshold.  When
    ``fitness_trace`` is given, per-iteration fitness values are appended.
    """
    cfg = cfg or IcpConfig()
    if len(scan) == 0:
        raise ValueError("scan is empty")
    pts = scan.points

    pose = guess
    fitness = math.inf
    thresholds_met = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        moved = pose.apply(pts)
        dists, idx = map_index.nearest_batch(moved, cfg.max_correspondence_distance)
        inliers = np.isfinite(dists)
        if not np.any(inliers):
            raise NoCorrespondences(f"no inliers within {cfg.max_correspondence_distance} m of guess")
        src = moved[inliers]
        dst = map_index.points[idx[inliers]]
        delta = _kabsch(src, dst)
        pose = delta.compose(pose)
        fitness = float(np.mean(np.sum((delta.apply(src) - dst) ** 2, axis=1)))
        if fitness_trace is not None:
            fitness_trace.append(fitness)
        if (
            float(np.linalg.norm(delta.translation)) < cfg.convergence_translation
            and delta.rotation_angle() < cfg.convergence_rotation
        ):
            thresholds_met = True
            break

    converged = thresholds_met and fitness <= cfg.fitness_threshold
    return pose, fitness, iterations, converged


def predict(state: MotionState, to: Timestamp) -> RigidTransform:
    """Constant-velocity extrapolation of the pose to a later stamp."""
    if to < state.stamp:
        raise ValueError("prediction target precedes state stamp")
    dt = nanos_to_sec(to - state.stamp)
    t = state.pose.translation + state.linear_velocity * dt
    w = state.angular_velocity
    angle = float(np.linalg.norm(w)) * dt
    if angle < 1e-12:
        rot = state.pose.rotation
        return RigidTransform(rot, t)
    step = RigidTransform.from_axis_angle(w, angle)
    return RigidTransform(step.compose(state.pose).rotation, t)


class Localizer:
    """Tracks one vehicle against a prebuilt map from successive range scans."""

    #: exponential smoothing factor applied to finite-difference velocities
    VELOCITY_SMOOTHING = 0.5

    def __init__(self, map_index: SpatialIndex, cfg: IcpConfig | None = None, scan_voxel: float = 0.3):
        self.map_index = map_index
        self.cfg = cfg or IcpConfig()
        self.scan_voxel = scan_voxel  # bounds per-update cost; 0 disables
        self.state: MotionState | None = None

    def _reduce(self, scan: PointCloud) -> PointCloud:
        if self.scan_voxel > 0 and len(scan) > 64:
            return voxel_downsample(scan, self.scan_voxel)
        return scan

    def initialize(
        self,
        pose: RigidTransform,
        stamp: Timestamp = 0,
        scan: PointCloud | None = None,
        yaw_search: tuple[float, float] | None = None,
    ) -> MotionState:
        """Set the starting pose, optionally refining it against a first scan.

        ``yaw_search`` is ``(span, step)`` in radians: candidate headings at
        ``pose`` offset by every multiple of ``step`` within ``±span`` are
        scored by ICP fitness and the best kept.  Raises
        :class:`InitializationFailed` when no candidate aligns.  Runs on the
        full-resolution scan; this happens once, so cost is not a concern.
        """
        if scan is None:
            if yaw_search is not None:
                raise ValueError("yaw search requires a scan")
            self.state = MotionState(pose, np.zeros(3), np.zeros(3), stamp)
            return self.state

        offsets = [0.0]
        if yaw_search is not None:
            span, step = yaw_search
            if span <= 0 or step <= 0:
                raise ValueError("yaw search span and step must be positive")
            n = int(math.floor(span / step))
            offsets = [k * step for k in range(-n, n + 1)]

        best: tuple[float, RigidTransform] | None = None
        for off in offsets:
            candidate = RigidTransform(
                RigidTransform.from_yaw(off).compose(pose).rotation, pose.translation
            )
            try:
                aligned, fitness, _, converged = icp_align(scan, self.map_index, candidate, self.cfg)
            except NoCorrespondences:
                continue
            if converged and (best is None or fitness < best[0]):
                best = (fitness, aligned)
        if best is None:
            raise InitializationFailed("no yaw candidate converged against the map")
        self.state = MotionState(best[1], np.zeros(3), np.zeros(3), stamp)
        return self.state

    def update(self, scan: PointCloud, stamp: Timestamp) -> PoseEstimate:
        """Predict, align, and re-estimate velocities for one incoming scan.

        A failed or unconverged alignment holds the predicted pose and flags
        the estimate instead of raising, so a live pipeline keeps publishing.
        """
        if self.state is None:
            raise RuntimeError("localizer not initialized")
        prev = self.state
        guess = predict(prev, stamp)
        try:
            aligned, fitness, iters, converged = icp_align(
                self._reduce(scan), self.map_index, guess, self.cfg
            )
        except NoCorrespondences:
            aligned, fitness, iters, converged = guess, math.inf, 0, False

        dt = nanos_to_sec(stamp - prev.stamp)
        if converged:
            pose = aligned
            if dt > 0:
                v_meas = (pose.translation - prev.pose.translation) / dt
                rel = RigidTransform(pose.compose(prev.pose.inverse()).rotation, np.zeros(3))
                axis, angle = rel.rotation_axis_angle()
                w_meas = axis * (angle / dt)
                a = self.VELOCITY_SMOOTHING
                lin = a * prev.linear_velocity + (1 - a) * v_meas
                ang = a * prev.angular_velocity + (1 - a) * w_meas
            else:
                lin, ang = prev.linear_velocity, prev.angular_velocity
        else:
            # hold the prediction; decay velocities so a lost track coasts to
            # a stop instead of extrapolating without bound
            pose = guess
            lin = prev.linear_velocity * 0.5
            ang = prev.angular_velocity * 0.5

        self.state = MotionState(pose, lin, ang, stamp)
        return PoseEstimate(stamp, pose, fitness, iters, converged)
