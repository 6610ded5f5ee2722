import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thyrovol.errors import DomainError, FormatError, ShapeError
from thyrovol.grid import LabelMask, VoxelGrid, read_volume, write_volume
from thyrovol.volumetry import (
    LobeAxes,
    VolumetryConfig,
    dice_score,
    ellipsoid_volume,
    mask_volume,
    total_thyroid_volume,
)

axis = st.floats(0.05, 20.0)


# --- ellipsoid formula


def test_ellipsoid_examples():
    assert ellipsoid_volume(LobeAxes(4, 2, 2)) == pytest.approx(7.68, abs=1e-12)
    assert ellipsoid_volume(LobeAxes(1, 1, 1)) == pytest.approx(0.48, abs=1e-12)
    sphere = ellipsoid_volume(LobeAxes(2, 2, 2), VolumetryConfig(math.pi / 6))
    assert sphere == pytest.approx(4 / 3 * math.pi, abs=1e-12)


def test_axes_and_factor_validation():
    for bad in [(0, 1, 1), (1, -2, 1), (1, 1, 21), (math.nan, 1, 1)]:
        with pytest.raises(DomainError):
            LobeAxes(*bad)
    for f in (0.0, 1.5, -0.1):
        with pytest.raises(DomainError):
            VolumetryConfig(f)


@settings(max_examples=80)
@given(l=axis, w=axis, d=axis, k=st.floats(0.1, 0.99))
def test_ellipsoid_linear_and_monotone(l, w, d, k):
    base = ellipsoid_volume(LobeAxes(l, w, d))
    scaled = ellipsoid_volume(LobeAxes(l * k, w, d))
    assert scaled == pytest.approx(k * base, rel=1e-12)
    assert scaled < base


# --- totals


def test_total_examples():
    assert total_thyroid_volume(3.2, 4.2) == pytest.approx(7.4, abs=1e-12)
    assert total_thyroid_volume(0, 5) == 5
    with pytest.raises(DomainError):
        total_thyroid_volume(-1, 2)


@given(a=st.floats(0, 50), b=st.floats(0, 50))
def test_total_commutative(a, b):
    assert total_thyroid_volume(a, b) == total_thyroid_volume(b, a)


# --- mask volume


def test_mask_volume_examples():
    data = np.zeros((10, 10, 20), dtype=np.uint8)
    data[:, :, :10] = 1
    assert mask_volume(LabelMask(data)) == pytest.approx(1.0, abs=1e-15)
    assert mask_volume(LabelMask(np.zeros((3, 3, 3)))) == 0.0
    assert mask_volume(LabelMask(data), (0.5, 0.5, 0.5)) == pytest.approx(0.125)


def _ellipsoid_mask(spacing, axes=(20.0, 10.0, 10.0)):
    a, b, c = axes
    n = [int(math.ceil(2 * r / spacing)) + 3 for r in (c, b, a)]
    z, y, x = (np.arange(k) * spacing - (k - 1) * spacing / 2 for k in n)
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
    inside = (xx / a) ** 2 + (yy / b) ** 2 + (zz / c) ** 2 <= 1
    return LabelMask(inside.astype(np.uint8), (spacing,) * 3)


def test_rasterized_ellipsoid_volume():
    truth = 4 / 3 * math.pi * 20 * 10 * 10 / 1000
    assert truth == pytest.approx(8.378, abs=5e-4)
    assert mask_volume(_ellipsoid_mask(0.5)) == pytest.approx(truth, rel=0.02)


def test_halving_spacing_reduces_error():
    # off-lattice axes keep the comparison away from a lucky alignment
    axes = (20.3, 10.2, 9.7)
    truth = 4 / 3 * math.pi * np.prod(axes) / 1000
    errs = [abs(mask_volume(_ellipsoid_mask(s, axes)) - truth) for s in (1.0, 0.5)]
    assert errs[1] < errs[0]


@settings(max_examples=40)
@given(seed=st.integers(0, 2**31))
def test_mask_volume_additive_over_disjoint(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (6, 7, 8))
    a = LabelMask((labels == 1).astype(np.uint8), (0.5, 0.7, 1.1))
    b = LabelMask((labels == 2).astype(np.uint8), (0.5, 0.7, 1.1))
    u = LabelMask((labels > 0).astype(np.uint8), (0.5, 0.7, 1.1))
    assert mask_volume(u) == pytest.approx(mask_volume(a) + mask_volume(b), rel=1e-12)


# --- dice


def test_dice_examples():
    a = np.zeros((20, 20), dtype=np.uint8)
    a[:10, :10] = 1
    assert dice_score(a, a) == 1.0
    b = np.zeros_like(a)
    b[10:, 10:] = 1
    assert dice_score(a, b) == 0.0
    c = np.zeros_like(a)
    c[5:15, :10] = 1
    assert dice_score(a, c) == pytest.approx(0.5)
    assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ShapeError):
        dice_score(a, a[:5])
    with pytest.raises(ShapeError):
        dice_score(LabelMask(a, (1, 1)), LabelMask(a, (1, 2)))


@settings(max_examples=60)
@given(seed=st.integers(0, 2**31), p=st.floats(0.05, 0.95))
def test_dice_symmetric_bounded(seed, p):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(9, 9)) < p
    b = rng.uniform(size=(9, 9)) < p
    d = dice_score(a, b)
    assert d == dice_score(b, a)
    assert 0.0 <= d <= 1.0
    assert (d == 1.0) == bool(np.array_equal(a, b))


# --- grid container


def test_volume_container_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    grid = VoxelGrid((1.5, -2.0, 3.25), (0.5, 0.5, 0.75), rng.integers(0, 256, (4, 5, 6)) / 255)
    write_volume(grid, tmp_path / "g")
    back = read_volume(tmp_path / "g")
    assert isinstance(back, VoxelGrid) and back.origin == grid.origin and back.spacing == grid.spacing
    np.testing.assert_array_equal(back.data, grid.data.astype("<f4"))
    mask = LabelMask(rng.integers(0, 2, (4, 5, 6)), (1, 2, 3), (0, 1, 2))
    write_volume(mask, tmp_path / "m")
    mb = read_volume(tmp_path / "m")
    assert isinstance(mb, LabelMask) and np.array_equal(mb.data, mask.data) and mb.spacing == (1, 2, 3)
    raw = (tmp_path / "m" / "volume.raw").read_bytes()
    # x-fastest linear layout
    assert raw[1] == mask.data[0, 0, 1] and raw[6] == mask.data[0, 1, 0]


def test_volume_container_errors(tmp_path):
    write_volume(LabelMask(np.zeros((2, 2, 2))), tmp_path / "m")
    (tmp_path / "m" / "volume.raw").write_bytes(b"\x00" * 7)
    with pytest.raises(FormatError, match="volume.raw"):
        read_volume(tmp_path / "m")
    with pytest.raises(FormatError, match="volume.json"):
        read_volume(tmp_path / "none")
    with pytest.raises(ValueError):
        LabelMask(np.full((2, 2), 2))
