import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portobello.frames import (
    CycleError,
    ExtrapolationError,
    FrameTree,
    ReparentError,
    RigidTransform,
    StampedTransform,
    UnknownFrame,
    interpolate,
    sec_to_nanos,
)


def random_transform(rng: np.random.Generator, span: float = 10.0) -> RigidTransform:
    q = rng.normal(size=4)
    return RigidTransform(q, rng.uniform(-span, span, size=3))


def transforms(max_span: float = 10.0):
    return st.builds(
        lambda seed: random_transform(np.random.default_rng(seed), max_span),
        st.integers(min_value=0, max_value=2**31),
    )


# ---------------------------------------------------------------------------
# RigidTransform


def test_identity_compose_identity():
    i = RigidTransform.identity()
    assert i.compose(i).approx_equal(i, 1e-12)


def test_compose_with_inverse_is_identity():
    t = RigidTransform.from_axis_angle((1, 2, 3), 0.7, (4, -5, 6))
    r = t.compose(t.inverse())
    assert r.approx_equal(RigidTransform.identity(), 1e-9)


def test_double_yaw90_matches_matrix_oracle():
    # Oracle: plain 4x4 homogeneous matrix multiplication.
    a = RigidTransform.from_yaw(math.pi / 2, (1, 0, 0))
    got = a.compose(a)
    expected_m = a.matrix() @ a.matrix()
    assert np.allclose(got.matrix(), expected_m, atol=1e-12)
    assert np.allclose(got.translation, [1, 1, 0], atol=1e-12)
    assert math.isclose(got.rotation_angle(), math.pi, abs_tol=1e-12)


@settings(max_examples=200)
@given(transforms(), transforms())
def test_compose_matches_matrix_oracle(a, b):
    got = a.compose(b)
    assert np.allclose(got.matrix(), a.matrix() @ b.matrix(), atol=1e-9)
    assert got.is_normalized()


@settings(max_examples=200)
@given(transforms(), transforms(), transforms())
def test_compose_associative(a, b, c):
    lhs = a.compose(b).compose(c)
    rhs = a.compose(b.compose(c))
    assert lhs.approx_equal(rhs, 1e-9)


@settings(max_examples=200)
@given(transforms())
def test_inverse_roundtrip(t):
    assert t.compose(t.inverse()).approx_equal(RigidTransform.identity(), 1e-9)
    assert t.inverse().compose(t).approx_equal(RigidTransform.identity(), 1e-9)


def test_canonical_quaternion_w_nonnegative():
    t = RigidTransform(np.array([-1.0, 0, 0, 0]), np.zeros(3))
    assert t.rotation[0] >= 0
    a = RigidTransform.from_axis_angle((0, 0, 1), 3.0)
    b = RigidTransform(-a.rotation, a.translation)
    assert np.allclose(a.rotation, b.rotation)


def test_apply_points_matches_matrix():
    t = RigidTransform.from_axis_angle((0, 1, 0), 1.1, (0.5, 0, -2))
    pts = np.random.default_rng(3).uniform(-5, 5, size=(40, 3))
    hom = np.c_[pts, np.ones(len(pts))]
    expected = (t.matrix() @ hom.T).T[:, :3]
    assert np.allclose(t.apply(pts), expected, atol=1e-12)


def test_from_matrix_roundtrip_all_quadrants():
    rng = np.random.default_rng(11)
    for _ in range(50):
        t = random_transform(rng)
        back = RigidTransform.from_matrix(t.matrix())
        assert back.approx_equal(t, 1e-9)


def test_yaw_extraction():
    assert math.isclose(RigidTransform.from_yaw(0.4).yaw(), 0.4, abs_tol=1e-12)
    assert math.isclose(RigidTransform.from_yaw(-2.0).yaw(), -2.0, abs_tol=1e-12)


def test_interpolate_midpoint_half_angle():
    a = RigidTransform.identity()
    for angle in (0.1, 1.0, 2.5, 3.0):
        b = RigidTransform.from_axis_angle((0, 0, 1), angle)
        mid = interpolate(a, b, 0.5)
        assert math.isclose(mid.rotation_angle(), angle / 2, abs_tol=1e-9)


@settings(max_examples=100)
@given(transforms(), transforms())
def test_interpolate_midpoint_half_relative_angle(a, b):
    rel = a.inverse().compose(b)
    if rel.rotation_angle() > math.pi - 1e-3:
        return
    mid = interpolate(a, b, 0.5)
    half = a.inverse().compose(mid)
    assert math.isclose(half.rotation_angle(), rel.rotation_angle() / 2, abs_tol=1e-9)


def test_rejects_bad_values():
    with pytest.raises(ValueError):
        RigidTransform(np.zeros(4), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.array([1.0, 0, 0, 0]), np.array([np.nan, 0, 0]))


# ---------------------------------------------------------------------------
# FrameTree


def t_of(x, y=0.0, z=0.0):
    return RigidTransform.identity().compose(RigidTransform(np.array([1.0, 0, 0, 0]), np.array([x, y, z])))


def test_set_then_lookup_exact():
    tree = FrameTree()
    tf = RigidTransform.from_yaw(0.3, (1, 2, 0))
    tree.set_transform(StampedTransform("map", "vehicle", 0, tf))
    got = tree.lookup("map", "vehicle", 0)
    assert got.approx_equal(tf, 1e-12)


def test_self_lookup_identity():
    tree = FrameTree()
    tree.set_transform(StampedTransform("map", "vehicle", 0, t_of(1)))
    assert tree.lookup("map", "map", 12345).approx_equal(RigidTransform.identity())


def test_cycle_rejected():
    tree = FrameTree()
    tree.set_transform(StampedTransform("map", "vehicle", 0, t_of(1)))
    with pytest.raises(CycleError):
        tree.set_transform(StampedTransform("vehicle", "map", 0, t_of(1)))


def test_reparent_rejected():
    tree = FrameTree()
    tree.set_transform(StampedTransform("map", "vehicle", 0, t_of(1)))
    with pytest.raises(ReparentError):
        tree.set_transform(StampedTransform("odom", "vehicle", 0, t_of(1)))


def test_unknown_frame():
    tree = FrameTree()
    tree.set_transform(StampedTransform("map", "vehicle", 0, t_of(1)))
    with pytest.raises(UnknownFrame):
        tree.lookup("map", "lidar", 0)


def test_out_of_order_insert_sorted():
    tree = FrameTree()
    tree.set_transform(StampedTransform("map", "v", sec_to_nanos(5), t_of(5)))
    tree.set_transform(StampedTransform("map", "v", sec_to_nanos(3), t_of(3)))
    buf = tree._buffers[("map", "v")]
    stamps = [e.stamp for e in buf]
    assert stamps == sorted(stamps) == [sec_to_nanos(3), sec_to_nanos(5)]


def test_linear_interpolation_by_hand():
    # map->vehicle identity at t=0, t=(2,0,0) at t=1s; query 0.5s.
    tree = FrameTree()
    tree.set_transform(StampedTransform("map", "v", 0, RigidTransform.identity()))
    tree.set_transform(StampedTransform("map", "v", sec_to_nanos(1), t_of(2)))
    got = tree.lookup("map", "v", sec_to_nanos(0.5))
    assert np.allclose(got.translation, [1, 0, 0], atol=1e-12)


def test_rotation_interpolation_half_angle():
    tree = FrameTree()
    tree.set_transform(StampedTransform("map", "v", 0, RigidTransform.identity()))
    tree.set_transform(StampedTransform("map", "v", sec_to_nanos(1), RigidTransform.from_yaw(1.0)))
    got = tree.lookup("map", "v", sec_to_nanos(0.5))
    assert math.isclose(got.yaw(), 0.5, abs_tol=1e-9)


def test_chain_matches_manual_compose():
    tree = FrameTree()
    mv = RigidTransform.from_yaw(0.2, (3, 1, 0))
    vl = RigidTransform.from_yaw(-0.1, (0.5, 0, 1.2))
    tree.set_transform(StampedTransform("map", "vehicle", 0, mv))
    tree.set_transform(StampedTransform("vehicle", "lidar", 0, vl))
    chained = tree.lookup("map", "lidar", 0)
    manual = tree.lookup("map", "vehicle", 0).compose(tree.lookup("vehicle", "lidar", 0))
    assert chained.approx_equal(manual, 1e-9)
    assert chained.approx_equal(mv.compose(vl), 1e-9)


def test_lookup_inverse_pair_identity():
    tree = FrameTree()
    tree.set_transform(StampedTransform("map", "v", 0, RigidTransform.from_yaw(0.7, (1, -2, 0))))
    a = tree.lookup("map", "v", 0)
    b = tree.lookup("v", "map", 0)
    assert a.compose(b).approx_equal(RigidTransform.identity(), 1e-9)


def test_extrapolation_slack_and_error():
    tree = FrameTree(extrapolation_slack_sec=0.1)
    tree.set_transform(StampedTransform("map", "v", sec_to_nanos(1.0), t_of(7)))
    # within 100 ms slack the newest value is held
    got = tree.lookup("map", "v", sec_to_nanos(1.05))
    assert np.allclose(got.translation, [7, 0, 0])
    with pytest.raises(ExtrapolationError):
        tree.lookup("map", "v", sec_to_nanos(1.2))
    with pytest.raises(ExtrapolationError):
        tree.lookup("map", "v", 0)


def test_retention_window_eviction():
    tree = FrameTree(retention_sec=10.0)
    tree.set_transform(StampedTransform("map", "v", 0, t_of(0)))
    tree.set_transform(StampedTransform("map", "v", sec_to_nanos(20), t_of(20)))
    buf = tree._buffers[("map", "v")]
    assert [e.stamp for e in buf] == [sec_to_nanos(20)]


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31), st.floats(min_value=0.0, max_value=1.0))
def test_path_composition_property(seed, frac):
    # lookup(a, c, t) == lookup(a, b, t) . lookup(b, c, t) for b on the path.
    rng = np.random.default_rng(seed)
    tree = FrameTree()
    t0, t1 = 0, sec_to_nanos(2)
    for parent, child in [("map", "odom"), ("odom", "vehicle"), ("vehicle", "lidar")]:
        tree.set_transform(StampedTransform(parent, child, t0, random_transform(rng, 5)))
        tree.set_transform(StampedTransform(parent, child, t1, random_transform(rng, 5)))
    at = int(t0 + frac * (t1 - t0))
    whole = tree.lookup("map", "lidar", at)
    split = tree.lookup("map", "vehicle", at).compose(tree.lookup("vehicle", "lidar", at))
    assert whole.approx_equal(split, 1e-9)
    inv = tree.lookup("lidar", "map", at)
    assert whole.compose(inv).approx_equal(RigidTransform.identity(), 1e-9)


def test_sibling_frames_resolve_through_common_parent():
    tree = FrameTree()
    mv = RigidTransform.from_yaw(0.5, (1, 0, 0))
    ma = RigidTransform.from_yaw(-0.2, (0, 3, 0))
    tree.set_transform(StampedTransform("map", "vehicle", 0, mv))
    tree.set_transform(StampedTransform("map", "agent", 0, ma))
    got = tree.lookup("vehicle", "agent", 0)
    assert got.approx_equal(mv.inverse().compose(ma), 1e-9)


def test_concurrent_readers_never_see_partial_edges():
    # one writer inserts at increasing stamps while readers look up strictly
    # inside the already-written window; any structural error is a torn read
    import threading

    tree = FrameTree(retention_sec=1000.0)
    tree.set_transform(StampedTransform("map", "v", 0, t_of(0)))
    tree.set_transform(StampedTransform("v", "lidar", 0, t_of(0.5)))
    errors = []
    written = [0.0]  # seconds fully visible to readers
    done = threading.Event()

    def writer():
        for k in range(1, 2000):
            stamp = sec_to_nanos(k * 0.01)
            tree.set_transform(StampedTransform("map", "v", stamp, t_of(k * 0.01)))
            tree.set_transform(StampedTransform("v", "lidar", stamp, t_of(0.5)))
            written[0] = k * 0.01
        done.set()

    def reader():
        rng = np.random.default_rng(threading.get_ident() % 2**31)
        reads = 0
        while not done.is_set() or reads == 0:
            horizon = written[0]
            at = sec_to_nanos(float(rng.uniform(0.0, max(horizon, 1e-6))))
            try:
                got = tree.lookup("map", "lidar", at)
                if not got.is_normalized(1e-6):
                    errors.append("unnormalized result")
                reads += 1
            except Exception as e:
                errors.append(repr(e))
                return

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    writer()
    for t in threads:
        t.join()
    assert errors == []
