"""Shared fixtures: small structured 3-D scenes for registration tests."""

import numpy as np
import pytest

from portobello.frames import RigidTransform
from portobello.pointcloud import PointCloud, PointCloudMap


def make_scene(seed=0, half=25.0, n_ground=6000, n_wall=1500, n_posts=24) -> np.ndarray:
    """Ground plane, four boundary walls, and vertical posts.

    The posts break translational symmetry so scan matching is constrained in
    every direction; everything is sampled deterministically from the seed.
    """
    rng = np.random.default_rng(seed)
    ground = np.c_[rng.uniform(-half, half, (n_ground, 2)), np.zeros(n_ground)]
    walls = []
    for axis, sign in ((0, -1), (0, 1), (1, -1), (1, 1)):
        u = rng.uniform(-half, half, n_wall)
        z = rng.uniform(0, 3.0, n_wall)
        w = np.empty((n_wall, 3))
        w[:, axis] = sign * half
        w[:, 1 - axis] = u
        w[:, 2] = z
        walls.append(w)
    posts = []
    for _ in range(n_posts):
        base = rng.uniform(-half * 0.8, half * 0.8, 2)
        z = rng.uniform(0, 2.5, 60)
        jitter = rng.normal(0, 0.02, (60, 2))
        posts.append(np.c_[base + jitter, z])
    return np.concatenate([ground] + walls + posts)


def sample_scan(map_points: np.ndarray, pose: RigidTransform, rng, n=2000,
                max_range=50.0, noise=0.0) -> PointCloud:
    """Vehicle-frame scan: map points within range of the pose, inverse-mapped."""
    rel = map_points - pose.translation
    mask = np.einsum("ij,ij->i", rel, rel) <= max_range * max_range
    candidates = np.flatnonzero(mask)
    if len(candidates) > n:
        candidates = rng.choice(candidates, size=n, replace=False)
    pts = pose.inverse().apply(map_points[candidates])
    if noise > 0:
        pts = pts + rng.normal(0, noise, pts.shape)
    return PointCloud(pts, frame="vehicle")


@pytest.fixture(scope="session")
def scene_points():
    return make_scene(seed=7)


@pytest.fixture(scope="session")
def scene_map(scene_points):
    return PointCloudMap.from_cloud(PointCloud(scene_points))
