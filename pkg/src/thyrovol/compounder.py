"""Forward compounding of tracked 2D frames into a voxel volume.

Every pixel is splatted into a weight accumulator at its world position
(nearest or trilinear kernel). Voxel values are the weight-normalized
intensity sums; a single hole-filling pass then closes small gaps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptyInput, ShapeError
from .grid import LabelMask, VoxelGrid

__all__ = [
    "CompoundingConfig",
    "AccumulatorGrid",
    "AxialStack",
    "bounding_box",
    "accumulate",
    "accumulate_stack",
    "finalize",
    "compound",
    "compound_stack",
    "resample_axial",
    "labels_to_grid",
]


@dataclass(frozen=True)
class CompoundingConfig:
    voxel_spacing: float = 0.5
    splat_kernel: str = "trilinear"
    hole_fill_radius: int = 1
    padding: float = 2.0

    def validate(self):
        if not self.voxel_spacing > 0:
            raise ConfigError(f"voxel_spacing must be positive, got {self.voxel_spacing}")
        if self.splat_kernel not in ("nearest", "trilinear"):
            raise ConfigError(f"splat_kernel must be 'nearest' or 'trilinear', got {self.splat_kernel!r}")
        if self.hole_fill_radius < 0 or int(self.hole_fill_radius) != self.hole_fill_radius:
            raise ConfigError(f"hole_fill_radius must be a non-negative integer, got {self.hole_fill_radius}")
        if self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")
        return self


@dataclass(frozen=True, eq=False)
class AccumulatorGrid:
    origin: tuple
    spacing: tuple
    weight_sum: np.ndarray
    weighted_sum: np.ndarray

    @property
    def dims(self):
        nz, ny, nx = self.weight_sum.shape
        return (nx, ny, nz)

    @property
    def filled(self):
        return self.weight_sum > 0


def _stack_box(rots, trans, shape, pixel_spacing, padding):
    h, w = shape
    sx, sy = pixel_spacing
    corners = np.array([[0.0, 0.0, 0.0], [(w - 1) * sx, 0.0, 0.0],
                        [0.0, (h - 1) * sy, 0.0], [(w - 1) * sx, (h - 1) * sy, 0.0]])
    world = np.einsum("nij,kj->nki", rots, corners) + trans[:, None, :]
    world = world.reshape(-1, 3)
    return world.min(axis=0) - padding, world.max(axis=0) + padding


def _as_stack(synced):
    rots = np.stack([xf.rotation for _, xf in synced])
    trans = np.stack([xf.p for _, xf in synced])
    return rots, trans


def bounding_box(synced, padding=0.0):
    """Axis-aligned world box around all frame corners, grown by ``padding`` mm."""
    if not synced:
        raise EmptyInput("no frames to bound")
    rots, trans = _as_stack(synced)
    f0 = synced[0][0]
    return _stack_box(rots, trans, f0.pixels.shape, f0.pixel_spacing, padding)


@numba.njit(cache=True)
def _splat(pixels, rots, trans, sx, sy, origin, inv_spacing, trilinear, wsum, wisum):
    nframes, h, w = pixels.shape
    nz, ny, nx = wsum.shape
    for f in range(nframes):
        r = rots[f]
        t = trans[f]
        for row in range(h):
            ly = row * sy
            for col in range(w):
                lx = col * sx
                v = pixels[f, row, col]
                gx = (r[0, 0] * lx + r[0, 1] * ly + t[0] - origin[0]) * inv_spacing[0]
                gy = (r[1, 0] * lx + r[1, 1] * ly + t[1] - origin[1]) * inv_spacing[1]
                gz = (r[2, 0] * lx + r[2, 1] * ly + t[2] - origin[2]) * inv_spacing[2]
                if not trilinear:
                    ix = int(np.floor(gx + 0.5))
                    iy = int(np.floor(gy + 0.5))
                    iz = int(np.floor(gz + 0.5))
                    if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                        wsum[iz, iy, ix] += 1.0
                        wisum[iz, iy, ix] += v
                    continue
                x0 = int(np.floor(gx))
                y0 = int(np.floor(gy))
                z0 = int(np.floor(gz))
                fx = gx - x0
                fy = gy - y0
                fz = gz - z0
                for dz in range(2):
                    iz = z0 + dz
                    if iz < 0 or iz >= nz:
                        continue
                    wz = fz if dz else 1.0 - fz
                    for dy in range(2):
                        iy = y0 + dy
                        if iy < 0 or iy >= ny:
                            continue
                        wy = fy if dy else 1.0 - fy
                        for dx in range(2):
                            ix = x0 + dx
                            if ix < 0 or ix >= nx:
                                continue
                            wgt = wz * wy * (fx if dx else 1.0 - fx)
                            if wgt > 0.0:
                                wsum[iz, iy, ix] += wgt
                                wisum[iz, iy, ix] += wgt * v


def _check_synced(synced):
    if not synced:
        raise EmptyInput("compounding needs at least one frame")
    f0 = synced[0][0]
    for i, (frame, _) in enumerate(synced):
        if frame.pixels.shape != f0.pixels.shape or frame.pixel_spacing != f0.pixel_spacing:
            raise ShapeError(f"frame {i} has shape {frame.pixels.shape}, expected {f0.pixels.shape}")


def accumulate(synced, config: CompoundingConfig = CompoundingConfig(), box=None) -> AccumulatorGrid:
    """Splat all frames into a fresh accumulator.

    ``box`` overrides the padded bounding box, e.g. to compound several
    inputs onto a shared grid. Traversal order is frame index, then pixel
    row-major, so the result does not depend on anything but the input.
    """
    _check_synced(synced)
    rots, trans = _as_stack(synced)
    pixels = [f.pixels for f, _ in synced]
    return accumulate_stack(pixels, rots, trans, synced[0][0].pixel_spacing, config, box)


def accumulate_stack(pixels, rots, trans, pixel_spacing, config: CompoundingConfig = CompoundingConfig(),
                     box=None) -> AccumulatorGrid:
    """Array form of :func:`accumulate`.

    ``pixels`` is a ``(n, h, w)`` array or a sequence of ``(h, w)`` frames,
    ``rots``/``trans`` the image-to-world rotation matrices and offsets.
    """
    config.validate()
    n = len(pixels)
    if n == 0:
        raise EmptyInput("compounding needs at least one frame")
    rots = np.asarray(rots, dtype=np.float64).reshape(n, 3, 3)
    trans = np.asarray(trans, dtype=np.float64).reshape(n, 3)
    shape = np.shape(pixels[0])
    if box is None:
        lo, hi = _stack_box(rots, trans, shape, pixel_spacing, config.padding)
    else:
        lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    s = float(config.voxel_spacing)
    dims = np.maximum(np.ceil((hi - lo) / s - 1e-9).astype(int) + 1, 1)
    nx, ny, nz = (int(d) for d in dims)
    wsum = np.zeros((nz, ny, nx))
    wisum = np.zeros((nz, ny, nx))
    sx, sy = (float(v) for v in pixel_spacing)
    # modest frame batches keep the stacked pixel copy small
    batch = max(1, int(4_000_000 // max(1, shape[0] * shape[1])))
    for start in range(0, n, batch):
        part = np.ascontiguousarray(np.stack(pixels[start : start + batch]), dtype=np.float64)
        _splat(part, np.ascontiguousarray(rots[start : start + batch]),
               np.ascontiguousarray(trans[start : start + batch]), sx, sy, lo, np.full(3, 1.0 / s),
               config.splat_kernel == "trilinear", wsum, wisum)
    return AccumulatorGrid(tuple(lo), (s, s, s), wsum, wisum)


def _box_sum(a, radius):
    """Separable sum over the ``(2r+1)**3`` cube, zero outside the grid.

    Built from shifted slice additions, so exact zeros stay exactly zero.
    """
    for axis in range(3):
        out = a.copy()
        n = a.shape[axis]
        for d in range(1, radius + 1):
            if d >= n:
                break
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis], hi[axis] = slice(0, n - d), slice(d, n)
            out[tuple(lo)] += a[tuple(hi)]
            out[tuple(hi)] += a[tuple(lo)]
        a = out
    return a


def finalize(acc: AccumulatorGrid, hole_fill_radius: int = 1) -> VoxelGrid:
    """Normalize the accumulator and run one hole-filling pass.

    A hole within ``hole_fill_radius`` (Chebyshev, in voxels) of filled
    voxels gets their weight-averaged intensity; filled voxels only read
    the accumulator, so the pass never chains.
    """
    filled = acc.filled
    data = np.divide(acc.weighted_sum, acc.weight_sum, out=np.zeros_like(acc.weight_sum), where=filled)
    if hole_fill_radius > 0:
        # only filled voxels contribute, weighted by their accumulated weight
        nw = _box_sum(acc.weight_sum, int(hole_fill_radius))
        holes = ~filled & (nw > 0)
        if holes.any():
            nwi = _box_sum(acc.weighted_sum, int(hole_fill_radius))
            data[holes] = nwi[holes] / nw[holes]
    np.clip(data, 0.0, 1.0, out=data)
    return VoxelGrid(acc.origin, acc.spacing, data)


def compound(synced, config: CompoundingConfig = CompoundingConfig(), box=None) -> VoxelGrid:
    """Reconstruct a volume from ``(Frame, image_to_world)`` pairs."""
    config.validate()
    return finalize(accumulate(synced, config, box), config.hole_fill_radius)


def compound_stack(pixels, rots, trans, pixel_spacing, config: CompoundingConfig = CompoundingConfig(),
                   box=None) -> VoxelGrid:
    """:func:`compound` on stacked arrays; bit-identical to the frame-list form."""
    config.validate()
    return finalize(accumulate_stack(pixels, rots, trans, pixel_spacing, config, box),
                    config.hole_fill_radius)


# --------------------------------------------------------------------------
# axial resampling for the network

@dataclass(frozen=True, eq=False)
class AxialStack:
    """Axial slices fitted into a fixed canvas.

    ``slices`` has shape ``(nz, h, w)``. The content occupies
    ``rows``/``cols`` (slice objects) of each canvas; ``pixel_size`` is the
    physical (x, y) size of one canvas pixel in mm.
    """

    slices: np.ndarray
    pixel_size: tuple
    thickness: float
    rows: slice
    cols: slice
    source_shape: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    source_spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def pixel_area(self) -> float:
        return self.pixel_size[0] * self.pixel_size[1]

    def content_coordinates(self):
        """World ``(x, y, z)`` of content pixel centers: column, row and slice axes."""
        dx, dy = self.pixel_size
        sx, sy, sz = self.source_spacing
        ncols = self.cols.stop - self.cols.start
        nrows = self.rows.stop - self.rows.start
        x = self.origin[0] + (np.arange(ncols) + 0.5) * dx - 0.5 * sx
        y = self.origin[1] + (np.arange(nrows) + 0.5) * dy - 0.5 * sy
        z = self.origin[2] + np.arange(self.source_shape[0]) * sz
        return x, y, z


def _canvas_layout(nx, ny, sx, sy, target):
    w, h = (int(v) for v in target)
    if w < 1 or h < 1:
        raise ConfigError(f"target size must be at least 1x1, got {target}")
    ext_x, ext_y = nx * sx, ny * sy
    d = max(ext_x / w, ext_y / h)
    cw = min(w, max(1, int(round(ext_x / d))))
    ch = min(h, max(1, int(round(ext_y / d))))
    c0, r0 = (w - cw) // 2, (h - ch) // 2
    return (ext_x / cw, ext_y / ch), slice(r0, r0 + ch), slice(c0, c0 + cw)


def resample_axial(grid: VoxelGrid, target_size=(256, 256)) -> AxialStack:
    """Extract fixed-z slices, rescale to fit ``target_size`` and center them.

    Scaling is bilinear and keeps the in-plane aspect ratio; the unused
    canvas border is zero.
    """
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    w, h = (int(v) for v in target_size)
    (dx, dy), rows, cols = _canvas_layout(nx, ny, sx, sy, (w, h))
    ch, cw = rows.stop - rows.start, cols.stop - cols.start
    # canvas pixel centers expressed as fractional source indices
    src_x = (np.arange(cw) + 0.5) * dx / sx - 0.5
    src_y = (np.arange(ch) + 0.5) * dy / sy - 0.5
    out = np.zeros((nz, h, w))
    if ch == ny and cw == nx and np.allclose(src_x, np.arange(nx)) and np.allclose(src_y, np.arange(ny)):
        out[:, rows, cols] = grid.data
    else:
        yy, xx = np.meshgrid(src_y, src_x, indexing="ij")
        for k in range(nz):
            out[k, rows, cols] = ndimage.map_coordinates(grid.data[k], [yy, xx], order=1, mode="nearest")
    return AxialStack(out, (dx, dy), sz, rows, cols, (nz, ny, nx), grid.origin, grid.spacing)


def labels_to_grid(labels, stack: AxialStack, grid: VoxelGrid) -> LabelMask:
    """Map per-slice canvas labels back onto ``grid`` by nearest neighbor."""
    labels = np.asarray(labels)
    nz, ny, nx = stack.source_shape
    if labels.shape[0] != nz:
        raise ShapeError(f"expected {nz} label slices, got {labels.shape[0]}")
    sx, sy, _ = grid.spacing
    dx, dy = stack.pixel_size
    ch, cw = stack.rows.stop - stack.rows.start, stack.cols.stop - stack.cols.start
    u = np.clip(np.floor((np.arange(nx) + 0.5) * sx / dx).astype(int), 0, cw - 1) + stack.cols.start
    v = np.clip(np.floor((np.arange(ny) + 0.5) * sy / dy).astype(int), 0, ch - 1) + stack.rows.start
    return LabelMask.like(grid, labels[:, v][:, :, u])
