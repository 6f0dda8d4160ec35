import struct

import numpy as np
import pytest
from scipy.stats import chisquare

from patchzero_lab.data import (
    Dataset,
    PatchSpec,
    dataset_digest,
    dataset_mean,
    gen_shapes_dataset,
    gen_shapes_splits,
    load_cifar_binary,
    load_idx,
    load_npz,
    rasterize_mask,
    sample_patch_spec,
    save_cifar_binary,
    save_idx,
    save_npz,
)
from patchzero_lab.errors import BadMagicError, CountMismatchError, DataFormatError, PatchSpecError, TruncatedFileError
from patchzero_lab.models import DataConfig


def byte_dataset(n: int, size: int, channels: int = 3, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 256, size=(n, 1, size, size)).astype(np.float32) / np.float32(255.0)
    images = np.repeat(raw, channels, axis=1)
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    return Dataset(images=images, labels=labels, mean=np.zeros(3, np.float32), split="train", class_names=[str(i) for i in range(10)])


def test_shapes_dataset_is_balanced_and_seeded():
    a = gen_shapes_dataset(5, image_size=16, seed=3)
    b = gen_shapes_dataset(5, image_size=16, seed=3)
    assert a.images.shape == (20, 3, 16, 16)
    assert a.images.dtype == np.float32
    assert np.bincount(a.labels).tolist() == [5, 5, 5, 5]
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert dataset_digest(a) == dataset_digest(b)
    assert dataset_digest(a) != dataset_digest(gen_shapes_dataset(5, image_size=16, seed=4))


def test_examples_view_the_arrays(tiny_splits):
    test = tiny_splits.test
    items = list(test)
    assert len(items) == len(test)
    np.testing.assert_array_equal(items[1].image, test.images[1])
    assert test[1].label == int(test.labels[1]) and isinstance(test[1].label, int)


def test_val_and_test_carry_the_train_mean(tiny_splits):
    np.testing.assert_array_equal(tiny_splits.val.mean, tiny_splits.train.mean)
    np.testing.assert_array_equal(tiny_splits.test.mean, tiny_splits.train.mean)
    assert dataset_digest(tiny_splits.train) != dataset_digest(tiny_splits.test)


def test_mean_matches_direct_loop():
    dataset = gen_shapes_dataset(3, image_size=8, seed=1)
    expected = np.zeros(3)
    for image in dataset.images:
        for c in range(3):
            expected[c] += image[c].astype(np.float64).sum()
    expected /= len(dataset) * 8 * 8
    np.testing.assert_allclose(dataset_mean(dataset), expected, rtol=1e-6)


def test_idx_round_trip(tmp_path):
    dataset = byte_dataset(7, 6)
    save_idx(dataset, tmp_path / "img.idx", tmp_path / "lbl.idx")
    loaded = load_idx(tmp_path / "img.idx", tmp_path / "lbl.idx")
    np.testing.assert_array_equal(loaded.images, dataset.images)
    np.testing.assert_array_equal(loaded.labels, dataset.labels)


def test_idx_errors(tmp_path):
    dataset = byte_dataset(4, 5)
    images, labels = tmp_path / "img.idx", tmp_path / "lbl.idx"
    save_idx(dataset, images, labels)

    bad = tmp_path / "bad.idx"
    bad.write_bytes(struct.pack(">I", 0x00000999) + images.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        load_idx(bad, labels)

    bad.write_bytes(images.read_bytes()[:-3])
    with pytest.raises(TruncatedFileError):
        load_idx(bad, labels)

    short_labels = tmp_path / "short.idx"
    short_labels.write_bytes(struct.pack(">II", 0x00000801, 3) + bytes(3))
    with pytest.raises(CountMismatchError):
        load_idx(images, short_labels)


def test_cifar_round_trip_and_errors(tmp_path):
    dataset = byte_dataset(3, 32)
    path = tmp_path / "batch.bin"
    save_cifar_binary(dataset, path)
    loaded = load_cifar_binary(path)
    np.testing.assert_array_equal(loaded.images, dataset.images)
    np.testing.assert_array_equal(loaded.labels, dataset.labels)

    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DataFormatError):
        load_cifar_binary(path)

    record = bytearray(3073)
    record[0] = 10
    path.write_bytes(bytes(record))
    with pytest.raises(DataFormatError):
        load_cifar_binary(path)

    path.write_bytes(b"")
    with pytest.raises(TruncatedFileError):
        load_cifar_binary(path)


def test_npz_round_trip(tmp_path, tiny_splits):
    save_npz(tiny_splits.val, tmp_path / "val.npz")
    loaded = load_npz(tmp_path / "val.npz")
    assert dataset_digest(loaded) == dataset_digest(tiny_splits.val)
    assert loaded.split == "val"
    assert loaded.class_names == tiny_splits.val.class_names
    np.testing.assert_array_equal(loaded.mean, tiny_splits.train.mean)


def test_split_generation_is_deterministic():
    cfg = DataConfig(image_size=8, n_train_per_class=2, n_val_per_class=1, n_test_per_class=1)
    a, b = gen_shapes_splits(cfg, 9), gen_shapes_splits(cfg, 9)
    for name in ("train", "val", "test"):
        assert dataset_digest(getattr(a, name)) == dataset_digest(getattr(b, name))


@pytest.mark.parametrize("shape", ["square", "rectangle", "diamond", "octagon"])
@pytest.mark.parametrize("fraction", [0.01, 0.02, 0.05, 0.09, 0.2])
def test_patch_area_is_close_to_the_requested_fraction(shape, fraction):
    rng = np.random.default_rng(0)
    for _ in range(5):
        spec = sample_patch_spec(rng, 32, 32, fraction, shape)
        mask = rasterize_mask(spec, 32, 32)
        area = int((mask == 0).sum())
        assert abs(area - fraction * 1024) <= 0.25 * fraction * 1024
        assert 0 <= spec.x <= 32 - spec.h and 0 <= spec.y <= 32 - spec.w


def test_small_square_patch_size():
    spec = sample_patch_spec(np.random.default_rng(0), 32, 32, 0.02, "square")
    assert abs(spec.h - spec.w) <= 1
    assert abs(spec.h * spec.w - 20) <= 2


def test_patch_placement_is_uniform():
    rng = np.random.default_rng(4)
    counts = np.zeros((5, 5), dtype=np.int64)
    for _ in range(5000):
        spec = sample_patch_spec(rng, 8, 8, 0.25, "square")
        assert (spec.h, spec.w) == (4, 4)
        counts[spec.x, spec.y] += 1
    assert chisquare(counts.ravel()).pvalue > 1e-4


def test_degenerate_patch_requests():
    rng = np.random.default_rng(0)
    with pytest.raises(PatchSpecError):
        sample_patch_spec(rng, 8, 8, 0.001)
    with pytest.raises(PatchSpecError):
        sample_patch_spec(rng, 8, 8, 1.0)
    with pytest.raises(PatchSpecError):
        rasterize_mask(PatchSpec(6, 6, 4, 4), 8, 8)


def test_rasterized_shapes():
    square = rasterize_mask(PatchSpec(1, 2, 3, 3, "square"), 8, 8)
    assert (square == 0).sum() == 9
    assert np.all(square[1:4, 2:5] == 0)

    diamond = rasterize_mask(PatchSpec(0, 0, 4, 4, "diamond"), 4, 4)
    assert (diamond == 0).sum() == 12
    assert diamond[0, 0] == 1 and diamond[1, 1] == 0

    octagon = rasterize_mask(PatchSpec(0, 0, 6, 6, "octagon"), 6, 6)
    # corner cut of 2 removes three cells per corner
    assert (octagon == 0).sum() == 36 - 4 * 3
    assert octagon[0, 0] == 1 and octagon[0, 2] == 0
