"""Tracked sweep data model, pose interpolation and sweep container I/O.

Quaternions are stored scalar-first ``(w, x, y, z)``. A rigid transform maps
a point ``x`` to ``R(q) @ x + p``; translations are in millimeters and times
in seconds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateStream, FormatError, OutOfRange

__all__ = [
    "RigidTransform",
    "TimedPose",
    "Frame",
    "Calibration",
    "SweepMeta",
    "Sweep",
    "quat_normalize",
    "quat_multiply",
    "quat_conjugate",
    "quat_to_matrix",
    "quat_from_axis_angle",
    "quat_from_rotvec",
    "quat_angle",
    "slerp",
    "interpolate_pose",
    "interpolate_pose_arrays",
    "synchronize",
    "synchronize_arrays",
    "read_sweep",
    "write_sweep",
]

_UNIT_TOL = 1e-9


# --------------------------------------------------------------------------
# quaternion helpers

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ValueError("quaternion must be finite and nonzero")
    return q / n


def quat_multiply(a, b):
    """Hamilton product ``a * b`` (broadcasts over leading axes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_axis_angle(axis, angle):
    """Quaternion for a rotation of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return quat_from_axis_angle(v / angle, angle)


def quat_angle(a, b):
    """Geodesic angle (radians) between the rotations of ``a`` and ``b``."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * np.arccos(min(1.0, d))


def slerp(q0, q1, u):
    """Shortest-arc spherical interpolation between unit quaternions.

    ``u`` may be a scalar or an array; the result has shape ``u.shape + (4,)``.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    dot = np.sum(q0 * q1, axis=-1)
    # q and -q are the same rotation; flip to stay on the short arc
    q1 = np.where((dot < 0.0)[..., None], -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.sin(theta)
    small = sin_theta < 1e-9
    safe = np.where(small, 1.0, sin_theta)
    w0 = np.where(small, 1.0 - u, np.sin((1.0 - u) * theta) / safe)
    w1 = np.where(small, u, np.sin(u * theta) / safe)
    out = w0[..., None] * q0 + w1[..., None] * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# data model

def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        p = np.asarray(self.p, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > _UNIT_TOL:
            q = quat_normalize(q)
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "p", _frozen(p))

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @property
    def rotation(self):
        return quat_to_matrix(self.q)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.p

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.q, other.q)
        p = self.rotation @ other.p + self.p
        return RigidTransform(q, p)

    def inverse(self) -> "RigidTransform":
        qc = quat_conjugate(self.q)
        return RigidTransform(qc, -(quat_to_matrix(qc) @ self.p))

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.p
        return m

    def allclose(self, other, atol=1e-12):
        same_q = np.allclose(self.q, other.q, atol=atol) or np.allclose(self.q, -other.q, atol=atol)
        return same_q and np.allclose(self.p, other.p, atol=atol)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.q, other.q) and np.array_equal(self.p, other.p)

    def __repr__(self):
        return f"RigidTransform(q={self.q.tolist()}, p={self.p.tolist()})"


@dataclass(frozen=True, eq=False)
class TimedPose:
    t: float
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        q = quat_normalize(np.asarray(self.q, dtype=np.float64).reshape(4))
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "p", _frozen(np.asarray(self.p, dtype=np.float64).reshape(3)))

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform(self.q, self.p)


@dataclass(frozen=True, eq=False)
class Frame:
    """One grayscale image with its acquisition time.

    ``pixels`` has shape ``(height, width)``; ``pixel_spacing`` is
    ``(column spacing, row spacing)`` in mm/px.
    """

    t: float
    pixels: np.ndarray
    pixel_spacing: tuple

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"frame pixels must be a nonempty 2D array, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("frame intensities must lie in [0, 1]")
        sx, sy = (float(s) for s in self.pixel_spacing)
        if not (sx > 0 and sy > 0):
            raise ValueError("pixel spacing must be positive")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "pixel_spacing", (sx, sy))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def plane_points(self):
        """Image-plane coordinates (mm) of every pixel, row-major, shape (h*w, 3)."""
        sx, sy = self.pixel_spacing
        rows, cols = np.mgrid[0 : self.height, 0 : self.width]
        pts = np.zeros((self.height * self.width, 3))
        pts[:, 0] = cols.ravel() * sx
        pts[:, 1] = rows.ravel() * sy
        return pts

    def corners(self):
        sx, sy = self.pixel_spacing
        xm, ym = (self.width - 1) * sx, (self.height - 1) * sy
        return np.array([[0.0, 0.0, 0.0], [xm, 0.0, 0.0], [0.0, ym, 0.0], [xm, ym, 0.0]])


@dataclass(frozen=True, eq=False)
class Calibration:
    image_to_sensor: RigidTransform = field(default_factory=RigidTransform.identity)

    def as_list(self):
        return [*self.image_to_sensor.q.tolist(), *self.image_to_sensor.p.tolist()]

    @classmethod
    def from_list(cls, values):
        values = [float(v) for v in values]
        if len(values) != 7:
            raise ValueError("calibration needs 7 numbers qw,qx,qy,qz,px,py,pz")
        return cls(RigidTransform(values[:4], values[4:]))


@dataclass(frozen=True)
class SweepMeta:
    subject_id: str = "0"
    observer_id: int = 1
    repeat_index: int = 1
    lobe: str = "right"
    nominal_frame_rate: float = 89.0
    nominal_pose_rate: float = 80.0

    def __post_init__(self):
        if self.lobe not in ("left", "right"):
            raise ValueError(f"lobe must be 'left' or 'right', got {self.lobe!r}")


@dataclass(frozen=True, eq=False)
class Sweep:
    frames: tuple
    poses: tuple
    calibration: Calibration = field(default_factory=Calibration)
    meta: SweepMeta = field(default_factory=SweepMeta)

    def __post_init__(self):
        frames = tuple(self.frames)
        poses = tuple(self.poses)
        if not frames:
            raise ValueError("sweep has no frames")
        if not poses:
            raise ValueError("sweep has no poses")
        f0 = frames[0]
        for i, f in enumerate(frames):
            if f.pixels.shape != f0.pixels.shape or f.pixel_spacing != f0.pixel_spacing:
                raise ValueError(f"frame {i} geometry differs from frame 0")
        times = np.array([p.t for p in poses])
        if np.any(np.diff(times) <= 0):
            raise ValueError("pose timestamps must strictly increase")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "poses", poses)

    def pose_arrays(self):
        t = np.array([p.t for p in self.poses])
        q = np.array([p.q for p in self.poses])
        p = np.array([p.p for p in self.poses])
        return t, q, p


# --------------------------------------------------------------------------
# interpolation and synchronization

def interpolate_pose_arrays(times, qs, ps, query):
    """Vectorized pose interpolation; returns (q, p) arrays for each query time."""
    query = np.atleast_1d(np.asarray(query, dtype=np.float64))
    if len(times) < 1:
        raise DegenerateStream("pose stream is empty")
    lo, hi = times[0], times[-1]
    bad = (query < lo) | (query > hi)
    if np.any(bad):
        t_bad = float(query[np.argmax(bad)])
        raise OutOfRange(f"t={t_bad!r} outside pose stream span [{lo!r}, {hi!r}]")
    if len(times) == 1:
        return np.repeat(qs[:1], len(query), 0), np.repeat(ps[:1], len(query), 0)
    i1 = np.clip(np.searchsorted(times, query, side="right"), 1, len(times) - 1)
    i0 = i1 - 1
    u = (query - times[i0]) / (times[i1] - times[i0])
    q = slerp(qs[i0], qs[i1], u)
    p = ps[i0] + u[:, None] * (ps[i1] - ps[i0])
    # exact hits return the stored sample untouched
    hit0 = query == times[i0]
    hit1 = query == times[i1]
    q[hit0], p[hit0] = qs[i0[hit0]], ps[i0[hit0]]
    q[hit1], p[hit1] = qs[i1[hit1]], ps[i1[hit1]]
    return q, p


def interpolate_pose(poses: Sequence[TimedPose], t: float) -> RigidTransform:
    """Sensor-to-world transform at time ``t``.

    Translation is interpolated linearly and rotation by shortest-arc slerp
    between the two bracketing samples. A query that hits a sample timestamp
    returns that sample unchanged.
    """
    if len(poses) < 1:
        raise DegenerateStream("pose stream needs at least one sample")
    times = np.array([p.t for p in poses])
    qs = np.array([p.q for p in poses])
    ps = np.array([p.p for p in poses])
    q, p = interpolate_pose_arrays(times, qs, ps, [t])
    return RigidTransform(q[0], p[0])


def synchronize_arrays(times, qs, ps, frame_t, calibration: Calibration):
    """Image-to-world ``(q, p)`` arrays at ``frame_t``, one row per frame."""
    qs_t, ps_t = interpolate_pose_arrays(times, qs, ps, frame_t)
    calib = calibration.image_to_sensor
    q = quat_multiply(qs_t, calib.q)
    p = np.sum(quat_to_matrix(qs_t) * calib.p, axis=-1) + ps_t
    return q, p


def synchronize(sweep: Sweep) -> list:
    """Pair every frame with its image-to-world transform, in frame order."""
    times, qs, ps = sweep.pose_arrays()
    frame_t = np.array([f.t for f in sweep.frames])
    q, p = synchronize_arrays(times, qs, ps, frame_t, sweep.calibration)
    return [(frame, RigidTransform(q[i], p[i])) for i, frame in enumerate(sweep.frames)]


# --------------------------------------------------------------------------
# container I/O

POSE_HEADER = ["t", "qw", "qx", "qy", "qz", "px", "py", "pz"]


def _write_pgm(path: Path, pixels: np.ndarray):
    data = np.rint(np.asarray(pixels) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: expected binary PGM magic 'P5', got {tokens[0]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header field ({exc})") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval={maxval})")
    body = raw[pos:]
    if len(body) < w * h:
        raise FormatError(f"{path}: pixel data truncated ({len(body)} of {w * h} bytes)")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w) / 255.0


def write_sweep(sweep: Sweep, path) -> None:
    """Write ``sweep`` as a container directory.

    Frames are stored as 8-bit PGM, so frames whose intensities are multiples
    of 1/255 round-trip bit-exactly; other intensities are rounded.
    """
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    f0 = sweep.frames[0]
    meta = {
        "subject_id": sweep.meta.subject_id,
        "observer_id": sweep.meta.observer_id,
        "repeat_index": sweep.meta.repeat_index,
        "lobe": sweep.meta.lobe,
        "nominal_frame_rate": sweep.meta.nominal_frame_rate,
        "nominal_pose_rate": sweep.meta.nominal_pose_rate,
        "pixel_spacing": list(f0.pixel_spacing),
        "calibration": sweep.calibration.as_list(),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(root / "poses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_HEADER)
        for pose in sweep.poses:
            w.writerow([repr(v) for v in (pose.t, *pose.q.tolist(), *pose.p.tolist())])
    with open(root / "frames.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "t"])
        for i, frame in enumerate(sweep.frames):
            w.writerow([i, repr(frame.t)])
            _write_pgm(root / "frames" / f"{i:05d}.pgm", frame.pixels)


def _read_table(path: Path, header: list) -> list:
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != header:
        got = rows[0] if rows else []
        raise FormatError(f"{path} line 1: expected header {','.join(header)}, got {','.join(got)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) < len(header):
            missing = header[len(row)]
            raise FormatError(f"{path} line {lineno}: missing field '{missing}'")
        if len(row) > len(header):
            raise FormatError(f"{path} line {lineno}: {len(row)} fields, expected {len(header)}")
        values = []
        for name, cell in zip(header, row):
            try:
                values.append(float(cell))
            except ValueError:
                raise FormatError(f"{path} line {lineno}: field '{name}' is not a number: {cell!r}") from None
        out.append((lineno, values))
    return out


def read_sweep(path) -> Sweep:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"{meta_path}: file not found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path} line {exc.lineno}: {exc.msg}") from None
    for key in ("pixel_spacing", "calibration", "lobe"):
        if key not in meta:
            raise FormatError(f"{meta_path}: missing field '{key}'")
    try:
        calibration = Calibration.from_list(meta["calibration"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{meta_path}: field 'calibration': {exc}") from None
    try:
        sweep_meta = SweepMeta(
            subject_id=str(meta.get("subject_id", "0")),
            observer_id=int(meta.get("observer_id", 1)),
            repeat_index=int(meta.get("repeat_index", 1)),
            lobe=meta["lobe"],
            nominal_frame_rate=float(meta.get("nominal_frame_rate", 89.0)),
            nominal_pose_rate=float(meta.get("nominal_pose_rate", 80.0)),
        )
    except ValueError as exc:
        raise FormatError(f"{meta_path}: {exc}") from None
    spacing = tuple(float(s) for s in meta["pixel_spacing"])

    poses = []
    last_t = -np.inf
    pose_path = root / "poses.csv"
    for lineno, v in _read_table(pose_path, POSE_HEADER):
        if not v[0] > last_t:
            raise FormatError(f"{pose_path} line {lineno}: field 't' not strictly increasing ({v[0]!r} after {last_t!r})")
        last_t = v[0]
        try:
            poses.append(TimedPose(v[0], v[1:5], v[5:8]))
        except ValueError as exc:
            raise FormatError(f"{pose_path} line {lineno}: {exc}") from None
    if not poses:
        raise FormatError(f"{pose_path}: no pose rows")

    frames = []
    frames_path = root / "frames.csv"
    for lineno, (idx, t) in _read_table(frames_path, ["index", "t"]):
        pgm = root / "frames" / f"{int(idx):05d}.pgm"
        if not pgm.exists():
            raise FormatError(f"{frames_path} line {lineno}: frame file {pgm.name} not found")
        frames.append(Frame(t, _read_pgm(pgm), spacing))
    if not frames:
        raise FormatError(f"{frames_path}: no frame rows")
    try:
        return Sweep(tuple(frames), tuple(poses), calibration, sweep_meta)
    except ValueError as exc:
        raise FormatError(f"{root}: {exc}") from None
