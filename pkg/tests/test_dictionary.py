import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchsynth.dictionary import (
    ContextSpec,
    LayerBank,
    build_dictionaries,
    check_pairing,
    descriptor_length,
    knn_batch,
    knn_query,
    load_archive,
    nearest_rows,
    save_archive,
    window_sources,
)
from patchsynth.errors import BoundsError, ConfigurationError
from patchsynth.image import PatchLocation, build_pyramid, downsample, extract_patch

SQUARE = ContextSpec("square", 2, 0.5)


def bank_for(images, layer=0, side=6, context=SQUARE):
    levels = build_pyramid(images, layer + 1)
    return LayerBank(levels[layer], levels[layer + 1], layer, side, context)


@pytest.fixture(scope="module")
def bank(strokes):
    return bank_for(strokes)


def test_window_zero_holds_one_pair_per_image(bank, strokes):
    d = build_dictionaries(bank, 0, [(12, 12)], 6, window=0, context=SQUARE)[PatchLocation(12, 12)]
    assert len(d) == len(strokes)


def test_interior_window_two_holds_25_shifts(bank, strokes):
    d = build_dictionaries(bank, 0, [(12, 12)], 6, window=2, context=SQUARE)[PatchLocation(12, 12)]
    assert len(d) == 25 * len(strokes)
    assert d.sources[0] == (12, 12)


def test_window_saturates_at_the_border():
    assert len(window_sources(PatchLocation(0, 0), (32, 32), 6, 2)) == 9
    assert len(window_sources(PatchLocation(26, 26), (32, 32), 6, 2)) == 9
    assert len(window_sources(PatchLocation(0, 12), (32, 32), 6, 2)) == 15


def test_location_outside_layer_is_rejected(bank):
    with pytest.raises(BoundsError):
        build_dictionaries(bank, 0, [(27, 0)], 6)


def test_pairs_come_from_the_same_image_and_place(bank):
    d = build_dictionaries(bank, 0, [(10, 14)], 6, window=1, context=SQUARE)[PatchLocation(10, 14)]
    assert check_pairing(d, range(0, len(d), 7))
    p = d.pair(len(d) - 1)
    np.testing.assert_array_equal(p.hr, extract_patch(bank.hr[p.source_image], p.source_loc, 6))
    coarse = downsample(bank.hr[p.source_image])
    np.testing.assert_array_equal(p.lr[:9], extract_patch(coarse, (p.source_loc.x // 2, p.source_loc.y // 2), 3))


def test_descriptor_widths():
    assert descriptor_length(3, ContextSpec()) == 9
    assert descriptor_length(3, SQUARE) == 49
    assert descriptor_length(4, ContextSpec("horizontal", 2, 0.5)) == 64 + 32


def test_horizontal_context_appends_the_mirrored_block(rng):
    lr = rng.random((8, 8))
    from patchsynth.dictionary import DescriptorSource

    src = DescriptorSource(lr, 2, ContextSpec("horizontal", 1, 1.0))
    desc = src(1, 3)
    padded = np.pad(lr, 1, mode="edge")
    # block at x=1 mirrors to x=8-1-2=5; widened by one column each side, flipped
    expect = padded[4:6, 5:9][:, ::-1].ravel()
    np.testing.assert_array_equal(desc[-8:], expect)


def test_probe_width_mismatch(bank):
    d = build_dictionaries(bank, 0, [(12, 12)], 6, context=SQUARE)[PatchLocation(12, 12)]
    with pytest.raises(ConfigurationError):
        knn_batch(d, np.zeros((1, 9)), 4)


def test_own_descriptor_is_its_nearest_neighbour(bank):
    d = build_dictionaries(bank, 0, [(12, 12)], 6, window=1, context=SQUARE)[PatchLocation(12, 12)]
    for j in (0, 5, 11):
        probe = d.pair(j).lr
        (idx, dist), = knn_query(d, probe, 1)
        assert dist == 0.0
        np.testing.assert_array_equal(d.pair(idx).lr, probe)


def test_scan_and_kdtree_agree_on_top10(rng, strokes):
    # 500 pairs: 20 images x 25 window shifts
    b = bank_for(strokes[:20])
    d = build_dictionaries(b, 0, [(12, 12)], 6, window=2, context=SQUARE)[PatchLocation(12, 12)]
    assert len(d) == 500
    lr = d.lr_matrix()
    probes = lr[rng.choice(len(d), 100, replace=False)] + rng.normal(0, 0.05, (100, lr.shape[1]))
    i_scan, d_scan = knn_batch(d, probes, 10, "scan")
    i_tree, d_tree = knn_batch(d, probes, 10, "kdtree")
    assert all(set(a) == set(b) for a, b in zip(i_scan, i_tree))
    np.testing.assert_allclose(d_scan, d_tree, rtol=0, atol=1e-12)


def test_results_are_sorted_with_index_tiebreak():
    rows = np.array([[1.0], [0.0], [1.0], [-1.0], [0.0]])
    idx, d = nearest_rows(np.array([[0.0]]), rows, 5)
    np.testing.assert_array_equal(idx[0], [1, 4, 0, 2, 3])
    np.testing.assert_array_equal(d[0], [0, 0, 1, 1, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 3))
def test_scan_equals_exhaustive_sort(seed, k, nblocks):
    g = np.random.default_rng(seed)
    # small integers: sums are exact and ties are frequent
    rows = g.integers(-3, 4, (60, 7)).astype(float)
    probes = g.integers(-3, 4, (5, 7)).astype(float)
    blocks = np.array_split(rows, nblocks)
    idx, dist = nearest_rows(probes, blocks, k)
    for q, ii, dd in zip(probes, idx, dist):
        exact = ((rows - q) ** 2).sum(1)
        order = np.lexsort((np.arange(len(rows)), exact))[:k]
        np.testing.assert_array_equal(ii, order)
        np.testing.assert_array_equal(dd, exact[order])


def test_small_window_pairs_are_a_subset(bank):
    small = build_dictionaries(bank, 0, [(12, 12)], 6, window=1, context=SQUARE)[PatchLocation(12, 12)]
    big = build_dictionaries(bank, 0, [(12, 12)], 6, window=2, context=SQUARE)[PatchLocation(12, 12)]
    assert set(small.sources) <= set(big.sources)
    hr_big = {p.tobytes() for p in big.hr_matrix()}
    assert all(p.tobytes() in hr_big for p in small.hr_matrix())


def test_hr_rows_match_pairs(bank):
    d = build_dictionaries(bank, 0, [(8, 4)], 6, window=2, context=SQUARE)[PatchLocation(8, 4)]
    idx = np.array([[0, 3], [len(d) - 1, 77]])
    rows = d.hr_rows(idx)
    for ij in np.ndindex(idx.shape):
        np.testing.assert_array_equal(rows[ij], d.pair(int(idx[ij])).hr)
        np.testing.assert_array_equal(d.lr_rows(idx)[ij], d.pair(int(idx[ij])).lr)


def test_cached_descriptors_are_read_only(bank):
    desc, norms = bank.cached_descriptors(4, 4)
    assert not desc.flags.writeable
    np.testing.assert_allclose(norms, (desc**2).sum(1))


def test_archive_round_trip_is_byte_stable(tmp_path, strokes):
    locs = [(0, 0), (4, 4), (26, 26)]
    dicts = build_dictionaries(build_pyramid(strokes, 2)[:2], 0, locs, 6, window=1, context=SQUARE)
    h1 = save_archive(tmp_path / "a.psd", strokes, 2, dicts, {"class": 3})
    h2 = save_archive(tmp_path / "b.psd", strokes, 2, dicts, {"class": 3})
    assert h1 == h2
    assert (tmp_path / "a.psd").read_bytes() == (tmp_path / "b.psd").read_bytes()
    loaded, header, h3 = load_archive(tmp_path / "a.psd")
    assert h3 == h1 and header["params"] == {"class": 3}
    for loc, d in dicts.items():
        assert loaded[loc].sources == d.sources
        assert loaded[loc].descriptor_hash() == d.descriptor_hash()


def test_corrupt_archive_header(tmp_path, strokes):
    from patchsynth.errors import IngestionError

    dicts = build_dictionaries(build_pyramid(strokes, 1), 0, [(0, 0)], 6)
    save_archive(tmp_path / "a.psd", strokes, 1, dicts, {})
    raw = bytearray((tmp_path / "a.psd").read_bytes())
    raw[20] ^= 1  # inside the stored config hash
    (tmp_path / "a.psd").write_bytes(bytes(raw))
    with pytest.raises(IngestionError):
        load_archive(tmp_path / "a.psd")
