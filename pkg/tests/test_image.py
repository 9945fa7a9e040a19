import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchsynth.errors import BoundsError, DimensionError
from patchsynth.image import (
    PatchLocation,
    accumulate_patch,
    build_pyramid,
    downsample,
    downsample_matrix,
    extract_patch,
    insert_patch,
    patch_average,
    upsample_bilinear,
)

# 1-D weights of the 3-tap kernel exp(-t^2/2), t in {-1, 0, 1}, normalised
SIDE_W = 0.274068619061197
CENTRE_W = 0.45186276187760605

even = st.integers(1, 6).map(lambda k: 2 * k)
finite = st.floats(-4, 4, allow_nan=False)


def image_strategy(h=even, w=even):
    return st.tuples(h, w).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_impulse_in_corner_collects_replicated_border():
    img = np.zeros((4, 4))
    img[0, 0] = 1.0
    out = downsample(img)
    # rows -1 and 0 both read row 0 under replicate padding
    assert out[0, 0] == pytest.approx(0.5269763698317176, abs=1e-15)
    assert out[0, 1] == out[1, 0] == out[1, 1] == 0.0


def test_interior_impulse_spreads_to_four_outputs():
    img = np.zeros((4, 4))
    img[1, 1] = 1.0
    np.testing.assert_allclose(downsample(img), np.full((2, 2), SIDE_W**2), rtol=0, atol=1e-15)


def test_kernel_weights_sum_to_one():
    assert 2 * SIDE_W + CENTRE_W == pytest.approx(1.0, abs=1e-15)


@given(st.floats(-10, 10, allow_nan=False), even, even)
def test_constant_image_is_preserved(c, h, w):
    np.testing.assert_allclose(downsample(np.full((h, w), c)), c, atol=1e-12)


@given(image_strategy(), st.floats(-3, 3), st.floats(-3, 3))
def test_downsample_is_linear(img, a, b):
    other = np.roll(img[::-1], 1, axis=1)
    lhs = downsample(a * img + b * other)
    rhs = a * downsample(img) + b * downsample(other)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@given(image_strategy())
def test_sparse_operator_matches_convolution(img):
    h, w = img.shape
    np.testing.assert_allclose(downsample_matrix(h, w) @ img.ravel(), downsample(img).ravel(), atol=1e-12)


def test_stack_is_downsampled_per_image(rng):
    stack = rng.random((3, 8, 8))
    out = downsample(stack)
    for i in range(3):
        np.testing.assert_array_equal(out[i], downsample(stack[i]))


def test_odd_sizes_are_rejected():
    with pytest.raises(DimensionError):
        downsample(np.zeros((5, 4)))


@pytest.mark.parametrize("size,depth,expected", [
    ((32, 32), 3, [(32, 32), (16, 16), (8, 8), (4, 4)]),
    ((128, 128), 4, [(128, 128), (64, 64), (32, 32), (16, 16), (8, 8)]),
])
def test_pyramid_level_sizes(size, depth, expected):
    levels = build_pyramid(np.zeros(size), depth)
    assert [l.shape for l in levels] == expected


def test_pyramid_rejects_indivisible_sizes():
    with pytest.raises(DimensionError):
        build_pyramid(np.zeros((12, 12)), 3)


def test_pyramid_rejects_nan():
    img = np.zeros((8, 8))
    img[2, 3] = np.nan
    with pytest.raises(DimensionError):
        build_pyramid(img, 1)


def test_upsampling_keeps_constants_and_size():
    out = upsample_bilinear(np.full((4, 6), 0.3))
    assert out.shape == (8, 12)
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


def test_upsampling_half_pixel_weights():
    row = upsample_bilinear(np.array([[0.0, 1.0]]).repeat(2, axis=0))[0]
    np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0])


def test_extract_is_row_major():
    img = np.arange(16, dtype=float).reshape(4, 4)
    np.testing.assert_array_equal(extract_patch(img, PatchLocation(1, 1), 2), [5, 6, 9, 10])


@pytest.mark.parametrize("loc", [PatchLocation(3, 0), PatchLocation(0, 3), PatchLocation(-1, 0)])
def test_extract_out_of_bounds(loc):
    with pytest.raises(BoundsError):
        extract_patch(np.zeros((4, 4)), loc, 2)


@given(arrays(np.float64, (6, 6), elements=finite), st.integers(0, 3), st.integers(0, 3))
def test_insert_then_extract_round_trips(img, x, y):
    patch = np.arange(9, dtype=float)
    target = img.copy()
    insert_patch(target, patch, PatchLocation(x, y))
    np.testing.assert_array_equal(extract_patch(target, PatchLocation(x, y), 3), patch)


def test_accumulate_overlapping_ones():
    canvas, counts = np.zeros((3, 3)), np.zeros((3, 3))
    accumulate_patch(canvas, counts, np.ones(4), PatchLocation(0, 0))
    accumulate_patch(canvas, counts, np.ones(4), PatchLocation(1, 1))
    np.testing.assert_array_equal(counts, [[1, 1, 0], [1, 2, 1], [0, 1, 1]])
    avg = patch_average(canvas, counts, fill=np.full((3, 3), -1.0))
    np.testing.assert_array_equal(avg, [[1, 1, -1], [1, 1, 1], [-1, 1, 1]])


@settings(max_examples=30)
@given(st.integers(2, 4), st.integers(0, 2))
def test_counts_trace_equals_patches_times_area(n, overlap):
    from patchsynth.epll import location_set

    overlap = min(overlap, n - 1)
    locs = location_set((16, 16), n, overlap)
    canvas, counts = np.zeros((16, 16)), np.zeros((16, 16))
    for loc in locs:
        accumulate_patch(canvas, counts, np.ones(n * n), loc)
    assert counts.sum() == len(locs) * n * n
