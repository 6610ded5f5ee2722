"""Analytic two-lobe thyroid phantoms, simulated tracked sweeps and virtual observers.

World axes: x lateral, y depth below the skin (y = 0 is the skin line), z
craniocaudal. Probes image transverse (x-y) planes and sweep along z, so a
compounded volume's fixed-z slices are axial views.

Tracking error is a smooth random displacement field over probe position
(a random-Fourier-feature draw of a squared-exponential Gaussian process,
fresh for every sweep) with 3D RMS ``ObserverModel.pose_noise_mm``, plus a
constant orientation error with RMS ``pose_noise_deg``. Optional white
jitter is added per pose sample.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numba
import numpy as np
from scipy import ndimage

from . import trackio
from .compounder import CompoundingConfig, compound_stack, resample_axial
from .errors import ConfigError, ThyroVolError
from .grid import LabelMask, VoxelGrid
from .obstats import Measurement, MeasurementTable
from .trackio import (
    Calibration,
    Frame,
    RigidTransform,
    Sweep,
    SweepMeta,
    TimedPose,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
)
from .volumetry import LobeAxes, VolumetryConfig, ellipsoid_volume, mask_volume

__all__ = [
    "LobeSpec",
    "PhantomSpec",
    "ObserverModel",
    "SweepProtocol",
    "Trajectory",
    "SimulatedSweep",
    "StudyConfig",
    "StudyResult",
    "STUDY_PROTOCOL",
    "STUDY_COMPOUNDING",
    "BACKGROUND_LEVEL",
    "BACKGROUND_BAND",
    "phantom_field",
    "lobe_mask",
    "plan_lobe_sweep",
    "simulate_sweep",
    "virtual_observer_2d",
    "sample_population",
    "threshold_segment",
    "compound_lobe",
    "measure_lobe_3d",
    "training_slices",
    "study_sweeps",
    "run_study",
]

BACKGROUND_LEVEL = 0.2
_TEXTURE_AMPLITUDE = 0.05
_SPECKLE_CELL_MM = 0.4
_SQRT3 = math.sqrt(3.0)
# inclusive intensity range of background points at default texture/speckle
BACKGROUND_BAND = (0.10, 0.33)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


# --------------------------------------------------------------------------
# phantom geometry

@dataclass(frozen=True)
class LobeSpec:
    """Superellipsoid lobe. ``semi_axes`` are (width x, depth y, length z) in mm."""

    center: tuple
    semi_axes: tuple
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    exponent: float = 2.0

    def __post_init__(self):
        if len(self.semi_axes) != 3 or min(self.semi_axes) <= 0:
            raise ConfigError(f"semi-axes must be three positive lengths, got {self.semi_axes}")
        if not self.exponent > 0:
            raise ConfigError("superellipsoid exponent must be positive")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(v) for v in self.semi_axes))
        q = np.asarray(self.rotation, dtype=float)
        object.__setattr__(self, "rotation", tuple((q / np.linalg.norm(q)).tolist()))

    @property
    def volume_ml(self) -> float:
        a, b, c = self.semi_axes
        p = self.exponent
        return 8.0 * a * b * c * math.gamma(1 + 1 / p) ** 3 / math.gamma(1 + 3 / p) / 1000.0

    def radius(self, points) -> np.ndarray:
        """Superellipsoid 'radius': < 1 inside, 1 on the surface."""
        pts = np.asarray(points, dtype=np.float64)
        local = (pts - np.asarray(self.center)) @ quat_to_matrix(self.rotation)
        p = self.exponent
        s = np.sum(np.abs(local / np.asarray(self.semi_axes)) ** p, axis=-1)
        return s ** (1.0 / p)

    def inside(self, points) -> np.ndarray:
        return self.radius(points) <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    left: LobeSpec
    right: LobeSpec
    contrast: float = 1.0
    speckle_sd: float = 0.15
    texture_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.contrast <= 1:
            raise ConfigError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.speckle_sd < 0 or self.texture_scale < 0:
            raise ConfigError("speckle_sd and texture_scale must be non-negative")

    def lobe(self, side: str) -> LobeSpec:
        if side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        return self.left if side == "left" else self.right

    @property
    def lobe_level(self) -> float:
        return BACKGROUND_LEVEL + 0.6 * self.contrast

    @property
    def threshold(self) -> float:
        """Midpoint between background and lobe intensity."""
        return 0.5 * (BACKGROUND_LEVEL + self.lobe_level)

    @property
    def volume_ml(self) -> float:
        return self.left.volume_ml + self.right.volume_ml


_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_M3 = 0xD6E8FEB86659FD93
_GOLDEN = 0x9E3779B97F4A7C15


@numba.njit(cache=True, inline="always")
def _hash_cell(cx, cy, cz, seed):
    """splitmix64-style hash of an integer cell to U[0, 1)."""
    h = np.uint64(seed) * np.uint64(_GOLDEN)
    h ^= np.uint64(cx) * np.uint64(_M1)
    h ^= np.uint64(cy) * np.uint64(_M2)
    h ^= np.uint64(cz) * np.uint64(_M3)
    h = (h ^ (h >> np.uint64(30))) * np.uint64(_M1)
    h = (h ^ (h >> np.uint64(27))) * np.uint64(_M2)
    h ^= h >> np.uint64(31)
    return float(h >> np.uint64(11)) / 9007199254740992.0


@numba.njit(cache=True, inline="always")
def _field_point(x, y, z, texture, centers, inv_rot, inv_axes, exponents, lobe_level, speckle, seed):
    """Field value at one point; ``texture`` is the summed background waves there."""
    inside = False
    # no early exit: a fixed two-lobe loop without branches is much faster
    for k in range(centers.shape[0]):
        dx, dy, dz = x - centers[k, 0], y - centers[k, 1], z - centers[k, 2]
        lx = (inv_rot[k, 0, 0] * dx + inv_rot[k, 0, 1] * dy + inv_rot[k, 0, 2] * dz) * inv_axes[k, 0]
        ly = (inv_rot[k, 1, 0] * dx + inv_rot[k, 1, 1] * dy + inv_rot[k, 1, 2] * dz) * inv_axes[k, 1]
        lz = (inv_rot[k, 2, 0] * dx + inv_rot[k, 2, 1] * dy + inv_rot[k, 2, 2] * dz) * inv_axes[k, 2]
        p = exponents[k]
        if p == 2.0:
            s = lx * lx + ly * ly + lz * lz
        else:
            s = abs(lx) ** p + abs(ly) ** p + abs(lz) ** p
        inside = inside | (s <= 1.0)
    v = lobe_level if inside else BACKGROUND_LEVEL + texture
    if speckle > 0.0:
        inv_cell = 1.0 / _SPECKLE_CELL_MM
        u = _hash_cell(int(np.floor(x * inv_cell)), int(np.floor(y * inv_cell)),
                       int(np.floor(z * inv_cell)), seed)
        # uniform with standard deviation ``speckle``
        v *= 1.0 + speckle * _SQRT3 * (2.0 * u - 1.0)
    return min(1.0, max(0.0, v))


@numba.njit(cache=True)
def _field_kernel(pts, centers, inv_rot, inv_axes, exponents, lobe_level, tex_dirs, tex_phase,
                  tex_amp, speckle, seed, out):
    ntex = tex_dirs.shape[0]
    for i in range(pts.shape[0]):
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        t = 0.0
        for j in range(ntex):
            t += np.sin(tex_dirs[j, 0] * x + tex_dirs[j, 1] * y + tex_dirs[j, 2] * z + tex_phase[j])
        out[i] = _field_point(x, y, z, tex_amp * t / ntex, centers, inv_rot, inv_axes, exponents,
                              lobe_level, speckle, seed)


@numba.njit(cache=True)
def _frames_kernel(plane, positions, centers, inv_rot, inv_axes, exponents, lobe_level, tex_dirs,
                   tex_phase, tex_amp, speckle, seed, out):
    """``out[f, i]``: 8-bit quantized field at ``plane[i] + positions[f]``.

    Each texture wave splits by the angle-sum identity into an in-plane
    and a per-frame factor, so no sine is evaluated per pixel.
    """
    ntex = tex_dirs.shape[0]
    m = plane.shape[0]
    sa = np.empty((ntex, m))
    ca = np.empty((ntex, m))
    for j in range(ntex):
        for i in range(m):
            arg = tex_dirs[j, 0] * plane[i, 0] + tex_dirs[j, 1] * plane[i, 1] + tex_dirs[j, 2] * plane[i, 2]
            sa[j, i] = np.sin(arg)
            ca[j, i] = np.cos(arg)
    sb = np.empty(ntex)
    cb = np.empty(ntex)
    for f in range(positions.shape[0]):
        px, py, pz = positions[f, 0], positions[f, 1], positions[f, 2]
        for j in range(ntex):
            arg = tex_dirs[j, 0] * px + tex_dirs[j, 1] * py + tex_dirs[j, 2] * pz + tex_phase[j]
            sb[j] = np.sin(arg)
            cb[j] = np.cos(arg)
        for i in range(m):
            t = 0.0
            for j in range(ntex):
                t += sa[j, i] * cb[j] + ca[j, i] * sb[j]
            v = _field_point(plane[i, 0] + px, plane[i, 1] + py, plane[i, 2] + pz, tex_amp * t / ntex,
                             centers, inv_rot, inv_axes, exponents, lobe_level, speckle, seed)
            out[f, i] = np.rint(v * 255.0) / 255.0


def _field_params(spec: PhantomSpec):
    lobes = (spec.left, spec.right)
    centers = np.array([lb.center for lb in lobes])
    inv_rot = np.array([quat_to_matrix(lb.rotation).T for lb in lobes])
    inv_axes = 1.0 / np.array([lb.semi_axes for lb in lobes])
    exponents = np.array([lb.exponent for lb in lobes])
    rng = _rng(spec.seed, 7)
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    k = 2 * np.pi / rng.uniform(8.0, 20.0, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    return (centers, inv_rot, inv_axes, exponents, spec.lobe_level, dirs * k[:, None], phase,
            _TEXTURE_AMPLITUDE * spec.texture_scale, spec.speckle_sd, spec.seed & 0x7FFFFFFFFFFFFFFF)


def phantom_field(spec: PhantomSpec, points) -> np.ndarray:
    """Echo intensity in [0, 1] at world points (mm), shape ``points.shape[:-1]``.

    Lobes are uniformly bright, the background is a dim smooth texture, and
    both carry bounded multiplicative speckle fixed to tissue position.
    """
    pts = np.asarray(points, dtype=np.float64)
    flat = np.ascontiguousarray(pts.reshape(-1, 3))
    out = np.empty(len(flat))
    _field_kernel(flat, *_field_params(spec), out)
    return out.reshape(pts.shape[:-1])


def lobe_mask(lobe: LobeSpec, grid: VoxelGrid) -> LabelMask:
    """Analytic lobe rasterized at voxel centers of ``grid``."""
    return LabelMask.like(grid, lobe.inside(grid.voxel_centers()).astype(np.uint8))


# --------------------------------------------------------------------------
# observers and sweeps

@dataclass(frozen=True)
class ObserverModel:
    """Error model of one virtual observer.

    ``axis_noise_sd`` is the relative caliper error per axis (2D protocol).
    Trajectory jitter moves the physical probe path (3D protocol); pose
    noise corrupts what the tracker reports about it.
    """

    axis_noise_sd: float = 0.08
    trajectory_translation_sd: float = 1.5
    trajectory_rotation_sd: float = 3.0
    pose_noise_mm: float = 1.40
    pose_noise_deg: float = 0.50
    pose_noise_length_mm: float = 10.0
    pose_jitter_mm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("axis_noise_sd", "trajectory_translation_sd", "trajectory_rotation_sd",
                     "pose_noise_mm", "pose_noise_deg", "pose_jitter_mm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.pose_noise_length_mm > 0:
            raise ConfigError("pose_noise_length_mm must be positive")

    @classmethod
    def noiseless(cls, seed: int = 0) -> "ObserverModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, seed=seed)


@dataclass(frozen=True)
class SweepProtocol:
    """Probe field of view and sweep kinematics."""

    pixel_spacing: float = 0.3
    width_mm: float = 40.0
    depth_mm: float = 40.0
    speed_mm_s: float = 10.0
    margin_mm: float = 6.0

    @property
    def frame_shape(self):
        h = int(round(self.depth_mm / self.pixel_spacing)) + 1
        w = int(round(self.width_mm / self.pixel_spacing)) + 1
        return h, w


@dataclass(frozen=True)
class Trajectory:
    """Straight probe path at constant orientation.

    ``start``/``end`` are sensor positions (mm); the calibration places the
    image so the sensor sits at the top center of the frame.
    """

    start: tuple
    end: tuple
    duration: float
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)

    def positions(self, t):
        u = np.asarray(t, dtype=np.float64)[..., None] / self.duration
        return (1.0 - u) * np.asarray(self.start) + u * np.asarray(self.end)


def plan_lobe_sweep(spec: PhantomSpec, side: str, protocol: SweepProtocol = SweepProtocol()) -> Trajectory:
    """Nominal craniocaudal sweep centered laterally on one lobe."""
    lobe = spec.lobe(side)
    # conservative z half-extent of the rotated lobe
    r = quat_to_matrix(lobe.rotation)
    half_z = float(np.sum(np.abs(r[2]) * np.asarray(lobe.semi_axes)))
    z0 = lobe.center[2] - half_z - protocol.margin_mm
    z1 = lobe.center[2] + half_z + protocol.margin_mm
    x = lobe.center[0]
    return Trajectory((x, 0.0, z0), (x, 0.0, z1), (z1 - z0) / protocol.speed_mm_s)


@dataclass(frozen=True, eq=False)
class SimulatedSweep:
    sweep: Sweep
    true_poses: tuple


_N_FEATURES = 64


def _tracking_error(rng, positions, rms_mm, length_mm):
    """Smooth displacement field evaluated at ``positions`` (mm).

    Each axis is an independent random-Fourier-feature approximation of a
    zero-mean Gaussian process with squared-exponential kernel.
    """
    freqs = rng.normal(0.0, 1.0 / length_mm, size=(3, _N_FEATURES, 3))
    phases = rng.uniform(0.0, 2 * np.pi, size=(3, _N_FEATURES))
    amps = rng.normal(0.0, 1.0, size=(3, _N_FEATURES))
    if rms_mm == 0:
        return np.zeros_like(positions)
    sd_axis = rms_mm / _SQRT3
    scale = sd_axis * math.sqrt(2.0 / _N_FEATURES)
    out = np.empty_like(positions)
    for axis in range(3):
        arg = positions @ freqs[axis].T + phases[axis]
        out[:, axis] = scale * (np.cos(arg) @ amps[axis])
    return out


def _stream_times(duration, rate, cover_until=None):
    if not rate > 0:
        raise ConfigError(f"rates must be positive, got {rate}")
    n = int(math.floor(duration * rate + 1e-9))
    if cover_until is not None:
        # closed interval so the stream brackets every frame
        n = max(n + 1, int(math.ceil(cover_until * rate - 1e-9)) + 1)
    return np.arange(n) / rate


@dataclass(frozen=True, eq=False)
class _SweepArrays:
    frame_t: np.ndarray
    images: np.ndarray
    pixel_spacing: tuple
    pose_t: np.ndarray
    q_reported: np.ndarray
    p_reported: np.ndarray
    q_true: np.ndarray
    p_true: np.ndarray
    calibration: Calibration


def _simulate_arrays(spec, trajectory, observer, protocol, frame_rate, pose_rate) -> _SweepArrays:
    if not (frame_rate > 0 and pose_rate > 0):
        raise ConfigError(f"rates must be positive, got frame_rate={frame_rate}, pose_rate={pose_rate}")
    rng = _rng(observer.seed, 0x5EE9)
    frame_t = _stream_times(trajectory.duration, frame_rate)
    if len(frame_t) == 0:
        raise ConfigError("sweep too short for a single frame")
    pose_t = _stream_times(trajectory.duration, pose_rate, cover_until=frame_t[-1])

    # physical probe path: lateral/depth offset and a tilt, fixed per sweep
    offset = np.zeros(3)
    offset[:2] = rng.normal(0.0, observer.trajectory_translation_sd, size=2)
    tilt_axis = rng.normal(size=3)
    tilt = quat_from_rotvec(tilt_axis / np.linalg.norm(tilt_axis)
                            * math.radians(rng.normal(0.0, observer.trajectory_rotation_sd)))
    q_true = quat_normalize(quat_multiply(tilt, trajectory.rotation))

    true_p = trajectory.positions(pose_t) + offset
    rep_p = true_p + _tracking_error(rng, true_p, observer.pose_noise_mm, observer.pose_noise_length_mm)
    rot_err = quat_from_rotvec(rng.normal(0.0, math.radians(observer.pose_noise_deg) / _SQRT3, size=3))
    if observer.pose_jitter_mm > 0:
        rep_p = rep_p + rng.normal(0.0, observer.pose_jitter_mm, size=rep_p.shape)
    q_rep = quat_normalize(quat_multiply(rot_err, q_true))

    h, w = protocol.frame_shape
    sp = protocol.pixel_spacing
    # image x is centered on the probe axis
    calib = Calibration(RigidTransform((1.0, 0.0, 0.0, 0.0), (-(w - 1) * sp / 2.0, 0.0, 0.0)))
    rows, cols = np.mgrid[0:h, 0:w]
    plane = np.stack([cols * sp, rows * sp, np.zeros_like(rows, dtype=float)], axis=-1).reshape(-1, 3)
    plane = calib.image_to_sensor.apply(plane)
    plane = np.ascontiguousarray(plane @ quat_to_matrix(q_true).T)
    images = np.empty((len(frame_t), h * w))
    _frames_kernel(plane, trajectory.positions(frame_t) + offset, *_field_params(spec), images)
    n = len(pose_t)
    return _SweepArrays(frame_t, images.reshape(len(frame_t), h, w), (sp, sp), pose_t,
                        np.tile(q_rep, (n, 1)), rep_p, np.tile(q_true, (n, 1)), true_p, calib)


def simulate_sweep(spec: PhantomSpec, trajectory: Trajectory, observer: ObserverModel = ObserverModel(),
                   protocol: SweepProtocol = SweepProtocol(), frame_rate: float = 89.0,
                   pose_rate: float = 80.0, meta: SweepMeta | None = None) -> SimulatedSweep:
    """Sample frames from the phantom along a jittered path and report noisy poses.

    Frames are taken at ``k / frame_rate`` for ``k < floor(duration * frame_rate)``
    and quantized to 8 bits. Poses are reported at ``j / pose_rate`` over the
    closed interval covering the last frame.
    """
    arr = _simulate_arrays(spec, trajectory, observer, protocol, frame_rate, pose_rate)
    frames = tuple(Frame(t, img, arr.pixel_spacing) for t, img in zip(arr.frame_t, arr.images))
    poses = tuple(TimedPose(t, q, p) for t, q, p in zip(arr.pose_t, arr.q_reported, arr.p_reported))
    true_poses = tuple(TimedPose(t, q, p) for t, q, p in zip(arr.pose_t, arr.q_true, arr.p_true))
    meta = meta or SweepMeta(nominal_frame_rate=frame_rate, nominal_pose_rate=pose_rate)
    return SimulatedSweep(Sweep(frames, poses, arr.calibration, meta), true_poses)


def virtual_observer_2d(spec: PhantomSpec, observer: ObserverModel) -> dict:
    """Caliper axes (cm) per lobe: true extents times ``1 + eps``, ``eps > -0.9``."""
    rng = _rng(observer.seed, 0x2D)
    out = {}
    for side in ("left", "right"):
        a, b, c = spec.lobe(side).semi_axes
        eps = np.maximum(rng.normal(0.0, observer.axis_noise_sd, size=3), -0.9 + 1e-12)
        length, width, depth = 2 * c / 10 * (1 + eps[0]), 2 * a / 10 * (1 + eps[1]), 2 * b / 10 * (1 + eps[2])
        out[side] = LobeAxes(length, width, depth)
    return out


def sample_population(n: int, seed: int = 0, contrast: float = 1.0, speckle_sd: float = 0.15) -> list:
    """Phantoms with total volumes drawn to match 2.8-16.7 ml, mean 7.4, SD 3.05."""
    mean, sd = 7.4, 3.05
    sigma2 = math.log(1 + (sd / mean) ** 2)
    mu = math.log(mean) - sigma2 / 2
    specs = []
    for i in range(n):
        rng = _rng(seed, i, 0xB0D)
        total = float(np.clip(rng.lognormal(mu, math.sqrt(sigma2)), 2.8, 16.7))
        frac = rng.uniform(0.44, 0.56)
        lobes = {}
        for side, share, sign in (("left", 1 - frac, -1.0), ("right", frac, 1.0)):
            ra = rng.uniform(0.32, 0.45)
            rb = rng.uniform(0.8, 1.05)
            c = (3 * share * total * 1000 / (4 * math.pi * ra * ra * rb)) ** (1 / 3)
            a, b = ra * c, ra * rb * c
            center = (sign * (a + 11 + rng.uniform(0, 3)), b + 6 + rng.uniform(0, 4), rng.uniform(-3, 3))
            rotvec = np.radians(rng.normal(0.0, 5.0, size=3))
            lobes[side] = LobeSpec(center, (a, b, c), tuple(quat_from_rotvec(rotvec)))
        specs.append(PhantomSpec(lobes["left"], lobes["right"], contrast, speckle_sd, 1.0,
                                 int(rng.integers(0, 2**31))))
    return specs


# --------------------------------------------------------------------------
# 3D measurement pipeline

def threshold_segment(grid: VoxelGrid, level: float = 0.5) -> LabelMask:
    """Voxels at or above ``level``, keeping the largest connected component."""
    fg = grid.data >= level
    labels, n = ndimage.label(fg)
    if n > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        fg = labels == int(np.argmax(sizes))
    return LabelMask.like(grid, fg.astype(np.uint8))


# Study-scale acquisition: coarse enough that a 100-subject, 3-observer run
# takes seconds per replication. Nearest splatting with pixel spacing equal
# to voxel spacing keeps the threshold volume free of blur-induced shrinkage.
STUDY_PROTOCOL = SweepProtocol(pixel_spacing=1.0, width_mm=32.0, depth_mm=36.0, speed_mm_s=60.0)
STUDY_COMPOUNDING = CompoundingConfig(voxel_spacing=1.0, splat_kernel="nearest", padding=1.0)


@dataclass(frozen=True)
class StudyConfig:
    protocol: SweepProtocol = STUDY_PROTOCOL
    compounding: CompoundingConfig = STUDY_COMPOUNDING
    observer: ObserverModel = ObserverModel()
    volumetry: VolumetryConfig = VolumetryConfig()
    frame_rate: float = 89.0
    pose_rate: float = 80.0


def compound_lobe(spec: PhantomSpec, side: str, observer: ObserverModel,
                  config: StudyConfig = StudyConfig()) -> VoxelGrid:
    """Simulate one lobe sweep and compound it."""
    traj = plan_lobe_sweep(spec, side, config.protocol)
    # array path: same numbers as simulate_sweep + synchronize + compound
    arr = _simulate_arrays(spec, traj, observer, config.protocol, config.frame_rate, config.pose_rate)
    q, p = trackio.synchronize_arrays(arr.pose_t, arr.q_reported, arr.p_reported, arr.frame_t,
                                      arr.calibration)
    return compound_stack(arr.images, quat_to_matrix(q), p, arr.pixel_spacing, config.compounding)


def measure_lobe_3d(spec: PhantomSpec, side: str, observer: ObserverModel, config: StudyConfig = StudyConfig(),
                    segmenter: Callable | None = None) -> float:
    """Simulate, compound, segment and count one lobe; returns ml."""
    grid = compound_lobe(spec, side, observer, config)
    if segmenter is None:
        mask = threshold_segment(grid, spec.threshold)
    else:
        mask = segmenter(grid, side)
    return mask_volume(mask)


def training_slices(population: Sequence[PhantomSpec], slices_per_lobe: int = 5, size=(256, 256),
                    config: StudyConfig = StudyConfig(), seed: int = 0) -> list:
    """``(image, mask)`` canvas pairs from compounded lobe sweeps.

    Each lobe is swept by a seeded noisy observer, compounded, resampled
    axially and sampled at random slices. Masks are the analytic lobe at
    the canvas pixel centers. Tracker error is switched off so labels sit
    on the image content, as a manual tracing on the compounded volume
    would. Left lobes are mirrored into right-lobe orientation, as the
    segmenter expects.
    """
    base = replace(config.observer, pose_noise_mm=0.0, pose_noise_deg=0.0)
    out = []
    for i, spec in enumerate(population):
        for j, side in enumerate(("left", "right")):
            obs = replace(base, seed=int(_rng(seed, i, j).integers(2**31)))
            grid = compound_lobe(spec, side, obs, config)
            stack = resample_axial(grid, size)
            x, y, z = stack.content_coordinates()
            picks = _rng(seed, i, j, 1).choice(len(z), size=min(slices_per_lobe, len(z)), replace=False)
            lobe = spec.lobe(side)
            for k in sorted(picks):
                yy, xx = np.meshgrid(y, x, indexing="ij")
                pts = np.stack([xx, yy, np.full_like(xx, z[k])], axis=-1)
                mask = np.zeros(stack.slices.shape[1:], dtype=np.uint8)
                mask[stack.rows, stack.cols] = lobe.inside(pts)
                img = stack.slices[k]
                if side == "left":
                    img, mask = img[:, ::-1], mask[:, ::-1]
                out.append((np.ascontiguousarray(img), np.ascontiguousarray(mask)))
    return out


@dataclass(frozen=True, eq=False)
class StudyResult:
    table: MeasurementTable
    reference: dict
    specs: tuple = ()


_MODALITY_CODE = {"us2d": 2, "us3d": 3}


def _observer_for(config: StudyConfig, master_seed, subject, observer, repeat, modality):
    seed = int(np.random.SeedSequence([master_seed, subject, observer, repeat, _MODALITY_CODE[modality]])
               .generate_state(1)[0])
    return replace(config.observer, seed=seed)


def _study_subject(args):
    idx, spec, observers, repeats, pipelines, config, master_seed, segmenter = args
    subject = str(idx + 1)
    rows = []
    for obs in range(1, observers + 1):
        for rep in range(1, repeats + 1):
            for modality in pipelines:
                om = _observer_for(config, master_seed, idx, obs, rep, modality)
                try:
                    if modality == "us2d":
                        axes = virtual_observer_2d(spec, om)
                        vol = sum(ellipsoid_volume(axes[s], config.volumetry) for s in ("left", "right"))
                    else:
                        vol = 0.0
                        for side in ("left", "right"):
                            vol += measure_lobe_3d(spec, side, om, config, segmenter)
                except ThyroVolError as exc:
                    raise type(exc)(f"subject {subject}, observer {obs}, repeat {rep}: {exc}") from exc
                rows.append(Measurement(subject, obs, rep, modality, vol))
    return rows


def study_sweeps(population: Sequence[PhantomSpec], observers: int = 3, repeats: int = 3,
                 config: StudyConfig = StudyConfig(), master_seed: int = 0, subjects=None):
    """Yield the 3D-pipeline sweeps ``run_study`` measures, with identical seeds.

    Compounding and segmenting these sweeps reproduces the study's 3D
    volumes, which lets the file-based pipeline be checked against it.
    ``subjects`` restricts the output to those population indices.
    """
    for idx, spec in enumerate(population):
        if subjects is not None and idx not in subjects:
            continue
        for obs in range(1, observers + 1):
            for rep in range(1, repeats + 1):
                om = _observer_for(config, master_seed, idx, obs, rep, "us3d")
                for side in ("left", "right"):
                    meta = SweepMeta(str(idx + 1), obs, rep, side, config.frame_rate, config.pose_rate)
                    traj = plan_lobe_sweep(spec, side, config.protocol)
                    yield simulate_sweep(spec, traj, om, config.protocol, config.frame_rate,
                                         config.pose_rate, meta).sweep


def run_study(population: Sequence[PhantomSpec], observers: int = 3, repeats: int = 3,
              pipelines=("us2d", "us3d"), config: StudyConfig = StudyConfig(), master_seed: int = 0,
              segmenter: Callable | None = None, workers: int = 1) -> StudyResult:
    """Simulated volumetry study: every subject, observer, repeat and modality.

    ``segmenter(grid, side) -> LabelMask`` replaces the threshold fallback
    for the 3D pipeline. Per-measurement seeds derive from ``master_seed``
    and the measurement key, so ``workers`` never changes the result.
    """
    for p in pipelines:
        if p not in _MODALITY_CODE:
            raise ConfigError(f"unknown pipeline {p!r}")
    jobs = [(i, spec, observers, repeats, tuple(pipelines), config, master_seed, segmenter)
            for i, spec in enumerate(population)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_subject = list(pool.map(_study_subject, jobs))
    else:
        per_subject = [_study_subject(j) for j in jobs]
    table = MeasurementTable([r for rows in per_subject for r in rows])
    reference = {str(i + 1): spec.volume_ml for i, spec in enumerate(population)}
    return StudyResult(table, reference, tuple(population))
