"""Voxel grids, label masks and the ``volume.json`` + ``volume.raw`` container.

Arrays are stored ``[z, y, x]`` in C order so the linear layout is
x-fastest. Voxel ``(i, j, k)`` has its center at ``origin + (i, j, k) * spacing``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = ["VoxelGrid", "LabelMask", "write_volume", "read_volume"]


def _geometry(origin, spacing, data):
    origin = tuple(float(v) for v in origin)
    spacing = tuple(float(v) for v in spacing)
    if len(origin) != 3 or len(spacing) != 3:
        raise ValueError("origin and spacing need three components")
    if min(spacing) <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"grid data must be a nonempty 3D array, got shape {data.shape}")
    return origin, spacing


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: tuple
    spacing: tuple
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        origin, spacing = _geometry(self.origin, self.spacing, data)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        """``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def voxel_volume_mm3(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def voxel_centers(self):
        """World coordinates of all voxel centers, shape ``(nz, ny, nx, 3)``."""
        nx, ny, nz = self.dims
        z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([x, y, z], axis=-1).astype(np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def same_geometry(self, other) -> bool:
        return (
            self.data.shape == other.data.shape
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-12)
        )


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-element labels in {0 background, 1 thyroid}.

    ``data`` is 2D ``[y, x]`` or 3D ``[z, y, x]``; ``spacing`` lists the
    matching axes x-first, and ``origin`` is only meaningful for 3D masks.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (2, 3):
            raise ValueError(f"mask must be 2D or 3D, got {data.ndim}D")
        if data.size and data.dtype != bool:
            if np.issubdtype(data.dtype, np.integer):
                bad = data.min() < 0 or data.max() > 1
            else:
                bad = not np.isin(data, (0, 1)).all()
            if bad:
                raise ValueError("mask values must be 0 or 1")
        spacing = tuple(float(s) for s in self.spacing)
        if data.ndim == 2 and len(spacing) == 3:
            spacing = spacing[:2]
        if len(spacing) != data.ndim or min(spacing) <= 0:
            raise ValueError(f"spacing {spacing} does not fit a {data.ndim}D mask")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @classmethod
    def like(cls, grid: VoxelGrid, data):
        return cls(np.asarray(data), grid.spacing, grid.origin)

    @property
    def dims(self):
        return tuple(reversed(self.data.shape))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


def write_volume(obj, path) -> None:
    """Write a VoxelGrid (``f32le``) or 3D LabelMask (``u8``) container.

    ``path`` is a directory; ``volume.json`` and ``volume.raw`` go inside it.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, VoxelGrid):
        dtype, raw = "f32le", obj.data.astype("<f4")
    elif isinstance(obj, LabelMask) and obj.data.ndim == 3:
        dtype, raw = "u8", obj.data.astype(np.uint8)
    else:
        raise TypeError("write_volume expects a VoxelGrid or a 3D LabelMask")
    header = {
        "origin": list(obj.origin),
        "spacing": list(obj.spacing),
        "dims": list(obj.dims),
        "dtype": dtype,
    }
    (root / "volume.json").write_text(json.dumps(header, indent=2) + "\n")
    (root / "volume.raw").write_bytes(np.ascontiguousarray(raw).tobytes())


def read_volume(path):
    root = Path(path)
    hpath = root / "volume.json"
    if not hpath.exists():
        raise FormatError(f"{hpath}: file not found")
    try:
        header = json.loads(hpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{hpath} line {exc.lineno}: {exc.msg}") from None
    for key in ("origin", "spacing", "dims", "dtype"):
        if key not in header:
            raise FormatError(f"{hpath}: missing field '{key}'")
    nx, ny, nz = (int(d) for d in header["dims"])
    dtype = {"f32le": "<f4", "u8": np.uint8}.get(header["dtype"])
    if dtype is None:
        raise FormatError(f"{hpath}: field 'dtype' must be f32le or u8, got {header['dtype']!r}")
    rpath = root / "volume.raw"
    if not rpath.exists():
        raise FormatError(f"{rpath}: file not found")
    raw = np.frombuffer(rpath.read_bytes(), dtype=dtype)
    if raw.size != nx * ny * nz:
        raise FormatError(f"{rpath}: {raw.size} values, header dims need {nx * ny * nz}")
    data = raw.reshape(nz, ny, nx)
    try:
        if header["dtype"] == "u8":
            return LabelMask(data.copy(), header["spacing"], header["origin"])
        return VoxelGrid(header["origin"], header["spacing"], data.astype(np.float64))
    except ValueError as exc:
        raise FormatError(f"{hpath}: {exc}") from None
