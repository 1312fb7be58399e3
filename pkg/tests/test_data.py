"""Binary batch ingestion and the procedural dataset."""

import numpy as np
import pytest

from distree.data import (
    RECORD_BYTES,
    DataFormatError,
    DataValueError,
    decode_batch,
    load_cifar10,
    normalize,
    stratified_sample,
    synthetic_dataset,
    synthetic_images,
    write_batch,
)


def make_record(label, fill):
    return bytes([label]) + bytes([fill] * 3072)


class TestDecoding:
    def test_record_count(self, tmp_path):
        pixels, labels = synthetic_images(32, seed=0)
        path = tmp_path / "batch.bin"
        write_batch(path, pixels, labels)
        images = load_cifar10(path)
        assert len(images) == 32
        assert [im.label for im in images] == [int(l) for l in labels]

    def test_label_byte_read_directly(self):
        data = make_record(6, 0) + make_record(3, 255)
        _, labels = decode_batch(data)
        assert list(labels) == [6, 3]

    def test_normalization_constant(self):
        data = make_record(0, 128)
        pixels, _ = decode_batch(data)
        normalized = normalize(pixels, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
        expected = (128 / 255 - 0.5) / 0.25
        assert expected == pytest.approx(0.00784, abs=1e-5)
        np.testing.assert_allclose(normalized, expected, atol=1e-5)

    def test_size_not_multiple_of_record(self):
        with pytest.raises(DataFormatError, match=str(RECORD_BYTES)):
            decode_batch(b"\x00" * (RECORD_BYTES + 1))
        with pytest.raises(DataFormatError):
            decode_batch(b"")

    def test_label_out_of_range(self):
        with pytest.raises(DataValueError, match="label byte 10"):
            decode_batch(make_record(10, 0))

    def test_round_trip(self, tmp_path):
        pixels, labels = synthetic_images(8, seed=3)
        path = tmp_path / "b.bin"
        write_batch(path, pixels, labels)
        back_pixels, back_labels = decode_batch(path.read_bytes())
        np.testing.assert_array_equal(back_pixels, pixels)
        np.testing.assert_array_equal(back_labels, labels)

    def test_deterministic_order(self, tmp_path):
        pixels, labels = synthetic_images(16, seed=1)
        path = tmp_path / "b.bin"
        write_batch(path, pixels, labels)
        first = load_cifar10(path)
        second = load_cifar10(path)
        for a, b in zip(first, second):
            assert a.label == b.label
            np.testing.assert_array_equal(a.pixels, b.pixels)


class TestSynthetic:
    def test_deterministic_per_seed(self):
        a = synthetic_images(8, seed=5)[0]
        b = synthetic_images(8, seed=5)[0]
        np.testing.assert_array_equal(a, b)
        c = synthetic_images(8, seed=6)[0]
        assert not np.array_equal(a, c)

    def test_images_independent_of_batch_size(self):
        small = synthetic_images(4, seed=9)[0]
        large = synthetic_images(12, seed=9)[0]
        np.testing.assert_array_equal(small, large[:4])

    def test_dataset_shape(self):
        ds = synthetic_dataset(10, seed=0)
        assert len(ds) == 10
        assert ds[0].pixels.shape == (3, 32, 32)
        assert ds[0].pixels.dtype == np.float32


class TestStratifiedSample:
    def test_per_class_counts(self):
        ds = synthetic_dataset(400, seed=0)
        sample = stratified_sample(ds, per_class=10, seed=1)
        assert len(sample) == 100
        counts = np.bincount([im.label for im in sample], minlength=10)
        assert list(counts) == [10] * 10

    def test_seeded(self):
        ds = synthetic_dataset(300, seed=0)
        a = stratified_sample(ds, per_class=5, seed=2)
        b = stratified_sample(ds, per_class=5, seed=2)
        assert [im.label for im in a] == [im.label for im in b]
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))

    def test_insufficient_class(self):
        ds = synthetic_dataset(12, seed=0)
        with pytest.raises(ValueError, match="class"):
            stratified_sample(ds, per_class=10, seed=0)
