import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thyrovol.errors import DegenerateStream, FormatError, OutOfRange
from thyrovol.trackio import (
    Calibration,
    Frame,
    RigidTransform,
    Sweep,
    SweepMeta,
    TimedPose,
    interpolate_pose,
    quat_angle,
    quat_from_axis_angle,
    quat_to_matrix,
    read_sweep,
    synchronize,
    write_sweep,
)

IDENT = (1.0, 0.0, 0.0, 0.0)


def _pose(t, p, q=IDENT):
    return TimedPose(t, q, p)


def _random_stream(rng, n=12):
    times = np.cumsum(rng.uniform(0.005, 0.02, n))
    poses = []
    for t in times:
        q = rng.normal(size=4)
        poses.append(TimedPose(t, q, rng.uniform(-50, 50, 3)))
    return poses


def _sweep(rng, n_frames=5, n_poses=8, shape=(6, 7)):
    poses = [TimedPose(i * 0.0125, rng.normal(size=4), rng.uniform(-20, 20, 3)) for i in range(n_poses)]
    span = poses[-1].t
    frames = [Frame(span * i / (n_frames - 1), rng.integers(0, 256, shape) / 255.0, (0.3, 0.4))
              for i in range(n_frames)]
    calib = Calibration(RigidTransform(rng.normal(size=4), rng.uniform(-5, 5, 3)))
    return Sweep(tuple(frames), tuple(poses), calib, SweepMeta("7", 2, 3, "left", 89.0, 80.0))


# --- interpolate_pose


def test_linear_midpoint():
    poses = [_pose(0.0, (0, 0, 0)), _pose(0.010, (1, 0, 0))]
    tr = interpolate_pose(poses, 0.005)
    np.testing.assert_allclose(tr.p, [0.5, 0, 0], atol=1e-15)
    np.testing.assert_allclose(tr.q, IDENT, atol=1e-15)


def test_slerp_half_angle():
    q90 = quat_from_axis_angle((0, 0, 1), math.pi / 2)
    poses = [_pose(0.0, (0, 0, 0)), _pose(1.0, (0, 0, 0), q90)]
    tr = interpolate_pose(poses, 0.5)
    assert quat_angle(tr.q, IDENT) == pytest.approx(math.pi / 4, abs=1e-12)
    np.testing.assert_allclose(tr.q, quat_from_axis_angle((0, 0, 1), math.pi / 4), atol=1e-12)


def test_exact_timestamp_returns_sample_bitwise():
    poses = _random_stream(np.random.default_rng(1))
    tr = interpolate_pose(poses, poses[4].t)
    assert np.array_equal(tr.q, poses[4].q)
    assert np.array_equal(tr.p, poses[4].p)


def test_out_of_range_and_empty():
    poses = [_pose(0.0, (0, 0, 0)), _pose(1.0, (1, 0, 0))]
    with pytest.raises(OutOfRange):
        interpolate_pose(poses, 1.0001)
    with pytest.raises(OutOfRange):
        interpolate_pose(poses, -0.1)
    with pytest.raises(DegenerateStream):
        interpolate_pose([], 0.0)


def test_single_sample_stream():
    tr = interpolate_pose([_pose(0.5, (1, 2, 3))], 0.5)
    np.testing.assert_array_equal(tr.p, [1, 2, 3])


def test_shortest_arc_between_antipodal_signs():
    q = quat_from_axis_angle((1, 0, 0), 0.3)
    poses = [_pose(0.0, (0, 0, 0), q), _pose(1.0, (0, 0, 0), -q)]
    for t in np.linspace(0, 1, 11):
        assert quat_angle(interpolate_pose(poses, t).q, q) < 1e-7


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), u=st.floats(0, 1))
def test_interpolated_quaternion_is_unit(seed, u):
    poses = _random_stream(np.random.default_rng(seed))
    t = poses[0].t + u * (poses[-1].t - poses[0].t)
    assert abs(np.linalg.norm(interpolate_pose(poses, t).q) - 1) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), u=st.floats(0.01, 0.99))
def test_interpolation_continuity(seed, u):
    poses = _random_stream(np.random.default_rng(seed))
    t = poses[0].t + u * (poses[-1].t - poses[0].t)
    eps = 1e-6
    a, b = interpolate_pose(poses, t), interpolate_pose(poses, t + eps)
    dt = np.diff([p.t for p in poses]).min()
    dp = max(np.linalg.norm(poses[i + 1].p - poses[i].p) for i in range(len(poses) - 1))
    # Lipschitz bounds from the steepest segment: translation dp/dt, rotation pi/dt
    assert np.linalg.norm(b.p - a.p) <= dp / dt * eps * (1 + 1e-6) + 1e-12
    assert quat_angle(a.q, b.q) <= math.pi / dt * eps + 1e-7


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), u=st.floats(0, 1))
def test_shortest_arc_property(seed, u):
    rng = np.random.default_rng(seed)
    q0 = rng.normal(size=4)
    q0 /= np.linalg.norm(q0)
    q1 = rng.normal(size=4)
    poses = [_pose(0.0, (0, 0, 0), q0), _pose(1.0, (0, 0, 0), q1)]
    geodesic = quat_angle(poses[0].q, poses[1].q)
    assert geodesic <= math.pi + 1e-12
    q = interpolate_pose(poses, u).q
    assert quat_angle(q, poses[0].q) <= geodesic + 1e-9
    assert quat_angle(q, poses[0].q) == pytest.approx(u * geodesic, abs=1e-7)


# --- synchronize


def test_static_stream_constant_pose():
    poses = [_pose(i * 0.01, (3, 4, 5)) for i in range(5)]
    frames = [Frame(t, np.zeros((2, 2)), (1, 1)) for t in (0.0, 0.013, 0.04)]
    for _, tr in synchronize(Sweep(frames, poses)):
        np.testing.assert_array_equal(tr.p, [3, 4, 5])
        np.testing.assert_allclose(tr.q, IDENT)


def test_uniform_translation():
    poses = [_pose(t, (100 * t, 0, 0)) for t in (0.0, 0.01, 0.02)]
    frames = [Frame(t, np.zeros((2, 2)), (1, 1)) for t in (0.0, 0.02)]
    out = synchronize(Sweep(frames, poses))
    np.testing.assert_allclose([tr.p[0] for _, tr in out], [0.0, 2.0], atol=1e-12)


def test_synchronize_matches_independent_interpolation():
    rng = np.random.default_rng(5)
    sweep = _sweep(rng, n_frames=9)
    out = synchronize(sweep)
    assert [f for f, _ in out] == list(sweep.frames)
    for frame, tr in out:
        ref = interpolate_pose(sweep.poses, frame.t).compose(sweep.calibration.image_to_sensor)
        assert tr.allclose(ref, atol=1e-12)


def test_synchronize_uncovered_frame():
    poses = [_pose(0.0, (0, 0, 0)), _pose(0.01, (0, 0, 0))]
    frames = [Frame(0.0, np.zeros((2, 2)), (1, 1)), Frame(0.02, np.zeros((2, 2)), (1, 1))]
    with pytest.raises(OutOfRange):
        synchronize(Sweep(frames, poses))


def test_calibration_composition_maps_pixels():
    q = quat_from_axis_angle((0, 0, 1), math.pi / 2)
    calib = Calibration(RigidTransform(IDENT, (1, 0, 0)))
    sweep = Sweep([Frame(0.0, np.zeros((2, 2)), (1, 1))], [_pose(0.0, (0, 0, 10), q)], calib)
    (_, tr), = synchronize(sweep)
    # image point (1,0,0) -> sensor (2,0,0) -> world R(2,0,0)+(0,0,10) = (0,2,10)
    np.testing.assert_allclose(tr.apply([1, 0, 0]), [0, 2, 10], atol=1e-12)
    np.testing.assert_allclose(quat_to_matrix(tr.q), quat_to_matrix(q), atol=1e-12)


# --- data model and I/O


def test_invariants_on_ingest():
    tp = TimedPose(0.0, (2, 0, 0, 0), (0, 0, 0))
    assert abs(np.linalg.norm(tp.q) - 1) <= 1e-9
    with pytest.raises(ValueError):
        Frame(0.0, np.full((2, 2), 1.5), (1, 1))
    with pytest.raises(ValueError):
        Frame(0.0, np.zeros((2, 2)), (0, 1))
    with pytest.raises(ValueError):
        Sweep([Frame(0.0, np.zeros((2, 2)), (1, 1))], [_pose(0.1, (0, 0, 0)), _pose(0.1, (0, 0, 0))])
    with pytest.raises(ValueError):
        Sweep([Frame(0.0, np.zeros((2, 2)), (1, 1)), Frame(0.0, np.zeros((3, 2)), (1, 1))], [_pose(0, (0, 0, 0))])


def test_round_trip(tmp_path):
    sweep = _sweep(np.random.default_rng(3))
    write_sweep(sweep, tmp_path / "s")
    back = read_sweep(tmp_path / "s")
    assert len(back.frames) == len(sweep.frames)
    for a, b in zip(sweep.frames, back.frames):
        assert a.t == b.t
        assert np.array_equal(a.pixels, b.pixels)
        assert a.pixel_spacing == b.pixel_spacing
    for a, b in zip(sweep.poses, back.poses):
        assert a.t == b.t
        np.testing.assert_allclose(b.q, a.q, atol=1e-12)
        np.testing.assert_allclose(b.p, a.p, atol=1e-12)
    np.testing.assert_allclose(back.calibration.as_list(), sweep.calibration.as_list(), atol=1e-12)
    assert back.meta == sweep.meta


def test_container_layout(tmp_path):
    write_sweep(_sweep(np.random.default_rng(3)), tmp_path / "s")
    assert (tmp_path / "s" / "poses.csv").read_text().splitlines()[0] == "t,qw,qx,qy,qz,px,py,pz"
    assert (tmp_path / "s" / "frames.csv").read_text().splitlines()[0] == "index,t"
    assert (tmp_path / "s" / "frames" / "00000.pgm").read_bytes().startswith(b"P5")


def test_truncated_pose_file_names_field(tmp_path):
    write_sweep(_sweep(np.random.default_rng(3)), tmp_path / "s")
    path = tmp_path / "s" / "poses.csv"
    lines = path.read_text().splitlines()
    lines[2] = ",".join(lines[2].split(",")[:5])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match=r"line 3: missing field 'px'"):
        read_sweep(tmp_path / "s")


def test_non_monotonic_poses_rejected(tmp_path):
    write_sweep(_sweep(np.random.default_rng(3)), tmp_path / "s")
    path = tmp_path / "s" / "poses.csv"
    lines = path.read_text().splitlines()
    lines[2], lines[3] = lines[3], lines[2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match="not strictly increasing"):
        read_sweep(tmp_path / "s")


def test_missing_files(tmp_path):
    write_sweep(_sweep(np.random.default_rng(3)), tmp_path / "s")
    (tmp_path / "s" / "frames" / "00002.pgm").unlink()
    with pytest.raises(FormatError, match="00002.pgm"):
        read_sweep(tmp_path / "s")
    with pytest.raises(FormatError, match="meta.json"):
        read_sweep(tmp_path / "nothing")
