import logging

import numpy as np
import pytest

from nirlora.data import (
    NIR_BANDS,
    Raster,
    RasterError,
    SamplePatch,
    SplitSpec,
    find_pairs,
    fit_norm_stats,
    gen_synthetic,
    load_patches,
    load_raster,
    normalize,
    patch_grid,
    patchify,
    select_bands,
    split,
    split_sizes,
    write_raster,
    write_synthetic,
)


def test_raster_round_trip_bitwise(tmp_path, rng):
    r = Raster(rng.normal(size=(5, 7, 4)).astype(np.float32))
    write_raster(tmp_path / "r.lvim", r)
    assert load_raster(tmp_path / "r.lvim").data.tobytes() == r.data.tobytes()
    m = Raster((rng.random((5, 7)) > 0.5).astype(np.uint8))
    write_raster(tmp_path / "m.lvim", m)
    back = load_raster(tmp_path / "m.lvim")
    assert back.data.dtype == np.uint8 and back.data.tobytes() == m.data.tobytes()


def test_full_size_scene_loads_eight_bands(tmp_path, rng):
    write_raster(tmp_path / "s.lvim", Raster(rng.random((837, 848, 8), dtype=np.float32)))
    r = load_raster(tmp_path / "s.lvim")
    assert (r.height, r.width, r.bands) == (837, 848, 8)


def test_corrupt_files_rejected(tmp_path):
    write_raster(tmp_path / "r.lvim", Raster(np.zeros((2, 2, 1), np.float32)))
    blob = (tmp_path / "r.lvim").read_bytes()
    cases = {"magic": b"LVIX" + blob[4:], "truncated": blob[:-1], "header": blob[:10]}
    for name, bad in cases.items():
        (tmp_path / name).write_bytes(bad)
        with pytest.raises(RasterError):
            load_raster(tmp_path / name)


def test_non_finite_raster_rejected():
    with pytest.raises(RasterError):
        Raster(np.full((2, 2, 1), np.nan, np.float32))


def test_select_bands(rng):
    three = Raster(rng.random((4, 4, 3), dtype=np.float32))
    np.testing.assert_array_equal(select_bands(three, [0, 1, 2]).data, three.data)
    eight = Raster(rng.random((4, 4, 8), dtype=np.float32))
    rep = select_bands(eight, [5, 5, 5]).data
    for c in range(3):
        np.testing.assert_array_equal(rep[:, :, c], eight.data[:, :, 5])
    with pytest.raises(RasterError):
        select_bands(eight, [6, 7, 8])
    with pytest.raises(RasterError):
        select_bands(eight, [0, 1])


@pytest.mark.parametrize("h,w,n", [(448, 448, 4), (500, 500, 4), (9393, 5642, 1025)])
def test_patch_counts(h, w, n):
    rows, cols = patch_grid(h, w, 224)
    assert rows * cols == n


@pytest.mark.parametrize("h,w,n", [(448, 448, 4), (500, 500, 4)])
def test_patchify_counts_and_origins(h, w, n):
    img = Raster(np.zeros((h, w, 3), np.float32))
    mask = Raster(np.zeros((h, w, 1), np.uint8))
    patches = patchify(img, mask, 224, "s")
    assert len(patches) == n
    assert [p.origin for p in patches] == [("s", 0, 0), ("s", 0, 224), ("s", 224, 0), ("s", 224, 224)]
    assert patches[0].image.shape == (3, 224, 224) and patches[0].mask.shape == (224, 224)


def test_patchify_content_and_errors(rng):
    data = rng.random((8, 8, 3), dtype=np.float32)
    mask = Raster((rng.random((8, 8)) > 0.5).astype(np.uint8))
    p = patchify(Raster(data), mask, 4)[3]
    np.testing.assert_array_equal(p.image, data[4:, 4:].transpose(2, 0, 1))
    np.testing.assert_array_equal(p.mask, mask.data[4:, 4:, 0])
    with pytest.raises(RasterError):
        patchify(Raster(data), Raster(np.zeros((8, 7), np.uint8)), 4)
    with pytest.raises(RasterError):
        patchify(Raster(data), Raster(np.full((8, 8), 2, np.uint8)), 4)
    with pytest.raises(RasterError):
        patchify(Raster(data), mask, 16)


@pytest.mark.parametrize("n,sizes", [(100, (72, 20, 8)), (25, (18, 5, 2)), (64, (46, 12, 6))])
def test_split_sizes(n, sizes):
    assert split_sizes(n, SplitSpec()) == sizes
    parts = split(list(range(n)), SplitSpec(seed=3))
    assert (len(parts.train), len(parts.test), len(parts.val)) == sizes
    assert sorted(parts.train + parts.test + parts.val) == list(range(n))


def test_split_is_seeded():
    a, b = split(list(range(50)), SplitSpec(seed=7)), split(list(range(50)), SplitSpec(seed=7))
    assert (a.train, a.test, a.val) == (b.train, b.test, b.val)
    assert split(list(range(50)), SplitSpec(seed=8)).train != a.train


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(ratios=(0.5, 0.3, 0.3))
    with pytest.raises(ValueError):
        split([1, 2], SplitSpec())


def _patch(img):
    return SamplePatch(np.asarray(img, np.float32), np.zeros(img.shape[1:], np.uint8), ("", 0, 0))


def test_normalization_statistics(rng):
    train = [_patch(rng.normal(3.0, 2.0, size=(3, 8, 8))) for _ in range(6)]
    stats = fit_norm_stats(train)
    normed = np.stack([normalize(p, stats).image for p in train]).astype(np.float64)
    np.testing.assert_allclose(normed.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(normed.std(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_constant_channel_maps_to_zero(rng, caplog):
    img = rng.normal(size=(3, 4, 4))
    img[1] = 7.0
    with caplog.at_level(logging.WARNING):
        stats = fit_norm_stats([_patch(img)])
    assert "zero variance" in caplog.text
    np.testing.assert_array_equal(normalize(_patch(img), stats).image[1], 0.0)


def test_val_uses_train_stats(rng):
    train = [_patch(rng.normal(0, 1, size=(3, 4, 4))) for _ in range(3)]
    val = _patch(rng.normal(5, 3, size=(3, 4, 4)))
    stats = fit_norm_stats(train)
    expected = (val.image - stats.mean[:, None, None]) / stats.std[:, None, None]
    np.testing.assert_allclose(normalize(val, stats).image, expected, rtol=1e-6)
    assert abs(normalize(val, stats).image.mean()) > 1.0


def test_synthetic_is_seeded():
    a, b = gen_synthetic(3, 11, 32, 32), gen_synthetic(3, 11, 32, 32)
    for (ia, ma), (ib, mb) in zip(a, b):
        assert ia.data.tobytes() == ib.data.tobytes() and ma.data.tobytes() == mb.data.tobytes()
    assert gen_synthetic(1, 12, 32, 32)[0][0].data.tobytes() != a[0][0].data.tobytes()


def test_synthetic_mask_lies_where_nir_is_bright():
    for img, mask in gen_synthetic(8, 4, 64, 64):
        m = mask.data[:, :, 0].astype(bool)
        assert m.any() and (~m).any()
        for b in NIR_BANDS:
            band = img.data[:, :, b]
            assert np.all(band[m] > band[~m].mean())


def test_write_synthetic_pairs(tmp_path):
    written = write_synthetic(tmp_path, 8, 0, 32, 32)
    assert len(written) == 16
    assert len(find_pairs(tmp_path)) == 8
    patches = load_patches(tmp_path, (3, 4, 5), 32)
    assert len(patches) == 8 and patches[0].image.shape == (3, 32, 32)


def test_find_pairs_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        find_pairs(tmp_path / "nope")
    with pytest.raises(FileNotFoundError):
        find_pairs(tmp_path)
    write_raster(tmp_path / "0000.image.lvim", Raster(np.zeros((4, 4, 3), np.float32)))
    with pytest.raises(FileNotFoundError, match="missing mask"):
        find_pairs(tmp_path)
