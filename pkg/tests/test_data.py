import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from reedvae.data import (
    Dataset,
    batch_iter,
    generate_synthetic,
    load_dataset,
    save_images,
    split,
)
from reedvae.errors import DatasetNotFound, EmptyDataset, SplitError
from reedvae.spectral import magnitude_spectrum


def test_load_png_resized(tmp_path, rng):
    arr = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    ds = load_dataset(tmp_path, target_size=32)
    assert len(ds) == 1
    assert ds.image_shape == (32, 32, 3)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_load_all_white_png_is_exactly_one(tmp_path):
    Image.fromarray(np.full((40, 40, 3), 255, np.uint8)).save(tmp_path / "white.png")
    ds = load_dataset(tmp_path, target_size=16)
    assert np.all(ds.images == 1.0)


def test_load_ppm_and_center_crop(tmp_path):
    # 8x16 gray image: left half 0, right half 255; the centre crop keeps columns 4..11
    arr = np.zeros((8, 16), np.uint8)
    arr[:, 8:] = 255
    Image.fromarray(arr).convert("RGB").save(tmp_path / "p.ppm")
    assert (tmp_path / "p.ppm").read_bytes()[:2] == b"P6"
    ds = load_dataset(tmp_path, target_size=8)
    img = ds[0][:, :, 0]
    np.testing.assert_array_equal(img[:, :4], 0.0)
    np.testing.assert_array_equal(img[:, 4:], 1.0)


def test_load_grayscale_png_has_one_channel(tmp_path):
    Image.fromarray(np.full((10, 10), 51, np.uint8)).save(tmp_path / "g.png")
    ds = load_dataset(tmp_path, target_size=10)
    assert ds.image_shape == (10, 10, 1)
    np.testing.assert_allclose(ds.images, 0.2, atol=1e-7)


def test_load_errors(tmp_path):
    with pytest.raises(DatasetNotFound):
        load_dataset(tmp_path / "missing")
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path)


def test_corrupt_files_skipped_then_all_corrupt_fails(tmp_path, caplog):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path)
    Image.fromarray(np.zeros((12, 12, 3), np.uint8)).save(tmp_path / "good.png")
    ds = load_dataset(tmp_path, target_size=12)
    assert len(ds) == 1 and ds.ids == ("good",)
    assert "skipping" in caplog.text


def test_synthetic_deterministic_and_seeded():
    a = generate_synthetic(4, 32, seed=7)
    b = generate_synthetic(4, 32, seed=7)
    c = generate_synthetic(4, 32, seed=8)
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.images, c.images)


def test_synthetic_has_low_band_energy():
    ds = generate_synthetic(16, 32, seed=3)
    for img in ds.images:
        bands = magnitude_spectrum(img).band_energies
        assert np.all(bands[:3] > 0)


def test_synthetic_range():
    ds = generate_synthetic(32, 16, seed=0)
    assert np.isfinite(ds.images).all()
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_save_images_roundtrip(tmp_path):
    ds = generate_synthetic(3, 16, seed=1)
    paths = save_images(ds, tmp_path)
    assert len(paths) == 3
    assert (tmp_path / "index.txt").read_text().split() == list(ds.ids)
    loaded = load_dataset(tmp_path, target_size=16)
    assert loaded.ids == ds.ids
    np.testing.assert_allclose(loaded.images, ds.images, atol=0.5 / 255 + 1e-6)


def test_split_sizes_and_errors():
    ds = generate_synthetic(10, 8, seed=0)
    tr, va, te = split(ds, (0.8, 0.1, 0.1), seed=1)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    again = split(ds, (0.8, 0.1, 0.1), seed=1)
    assert [s.ids for s in again] == [tr.ids, va.ids, te.ids]
    with pytest.raises(SplitError):
        split(generate_synthetic(2, 8, seed=0), (0.8, 0.1, 0.1))
    with pytest.raises(SplitError):
        split(ds, (0.5, 0.2, 0.2))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 60), seed=st.integers(0, 1000),
       fr=st.tuples(st.floats(0.05, 1), st.floats(0.05, 1), st.floats(0.05, 1)))
def test_split_is_partition(n, seed, fr):
    total = sum(fr)
    fractions = (fr[0] / total, fr[1] / total, 1.0 - fr[0] / total - fr[1] / total)
    ds = Dataset(np.zeros((n, 8, 8, 1), np.float32), ids=tuple(str(i) for i in range(n)))
    try:
        parts = split(ds, fractions, seed=seed)
    except SplitError:
        return
    ids = [set(p.ids) for p in parts]
    assert all(ids)
    assert sum(len(p) for p in parts) == n
    assert set.union(*ids) == set(ds.ids)
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_batch_iter_sizes_and_order():
    ds = Dataset(np.linspace(0, 1, 10)[:, None, None, None] * np.ones((10, 8, 8, 1), np.float32))
    batches = list(batch_iter(ds, 4))
    assert [b.shape[0] for b in batches] == [4, 4, 2]
    firsts = np.concatenate([b[:, 0, 0, 0].numpy() for b in batches])
    np.testing.assert_allclose(firsts, np.linspace(0, 1, 10), atol=1e-7)
    s1 = np.concatenate([b[:, 0, 0, 0].numpy() for b in batch_iter(ds, 3, shuffle=True, seed=5, epoch=2)])
    s2 = np.concatenate([b[:, 0, 0, 0].numpy() for b in batch_iter(ds, 3, shuffle=True, seed=5, epoch=2)])
    np.testing.assert_array_equal(s1, s2)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), bs=st.integers(1, 50), seed=st.integers(0, 99), epoch=st.integers(0, 5))
def test_batch_iter_visits_each_item_once(n, bs, seed, epoch):
    ds = Dataset((np.arange(n) / max(n, 1))[:, None, None, None] * np.ones((n, 8, 8, 1), np.float32))
    seen = np.concatenate([b[:, 0, 0, 0].numpy() for b in batch_iter(ds, bs, shuffle=True, seed=seed, epoch=epoch)])
    np.testing.assert_array_equal(np.sort(seen), np.sort(ds.images[:, 0, 0, 0]))


def test_dataset_rejects_out_of_range():
    with pytest.raises(ValueError):
        Dataset(np.full((1, 8, 8, 3), 1.5, np.float32))
    with pytest.raises(ValueError):
        Dataset(np.full((1, 4, 4, 3), 0.5, np.float32))


def test_dataset_is_immutable():
    ds = generate_synthetic(2, 8, seed=0)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 0.0
