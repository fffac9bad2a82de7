"""Dataset container, binary format, synthetic generator and augmentation tests."""

import struct

import numpy as np
import pytest

from fedadv.data import (
    FORMAT_VERSION,
    MAGIC,
    AugmentOps,
    BadMagicError,
    DatasetFormatError,
    ImageDataset,
    LabelRangeError,
    PixelRangeError,
    TruncatedFileError,
    UnsupportedVersionError,
    augment,
    generate_synthetic,
    load_dataset,
    save_dataset,
)

HEADER = struct.Struct("<4sIIIIII")


def tiny_dataset(n=6, size=4, num_classes=2, seed=0) -> ImageDataset:
    rng = np.random.default_rng(seed)
    images = rng.random((n, 1, size, size)).astype(np.float32)
    labels = (np.arange(n) % num_classes).astype(np.int64)
    return ImageDataset(images, labels, num_classes)


def pack_file(count=1, channels=1, height=2, width=2, num_classes=2,
              label=0, pixel=0.5, version=FORMAT_VERSION, magic=MAGIC) -> bytes:
    header = HEADER.pack(magic, version, count, channels, height, width,
                         num_classes)
    pixels = np.full(channels * height * width, pixel, dtype="<f4")
    record = struct.pack("<B", label) + pixels.tobytes()
    return header + record * count


class TestImageDataset:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ImageDataset(np.zeros((0, 1, 2, 2), np.float32),
                         np.zeros(0, np.int64), 2)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ImageDataset(np.zeros((2, 1, 2, 2), np.float32),
                         np.array([0, 2]), 2)

    def test_pixel_out_of_range_rejected(self):
        images = np.full((1, 1, 2, 2), 1.5, np.float32)
        with pytest.raises(ValueError):
            ImageDataset(images, np.array([0]), 2)

    def test_subset_selects_and_renames(self):
        ds = tiny_dataset(n=8)
        sub = ds.subset(np.array([1, 3, 5]), name="shard")
        assert len(sub) == 3
        assert sub.name == "shard"
        np.testing.assert_array_equal(sub.images, ds.images[[1, 3, 5]])
        np.testing.assert_array_equal(sub.labels, ds.labels[[1, 3, 5]])

    def test_class_counts(self):
        ds = ImageDataset(np.zeros((5, 1, 2, 2), np.float32),
                          np.array([0, 1, 1, 2, 1]), 3)
        np.testing.assert_array_equal(ds.class_counts(), [1, 3, 1])

    def test_image_shape(self):
        ds = tiny_dataset(size=4)
        assert ds.image_shape == (1, 4, 4)


class TestFileFormat:
    def test_round_trip_is_bit_exact(self, tmp_path):
        ds = generate_synthetic(20, 8, num_classes=3, seed=5)
        path = tmp_path / "d.fads"
        save_dataset(ds, path)
        back = load_dataset(path, name=ds.name)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.num_classes == ds.num_classes
        assert back.name == ds.name

    def test_header_fields_written_as_documented(self, tmp_path):
        ds = tiny_dataset(n=6, size=4, num_classes=2)
        path = tmp_path / "d.fads"
        save_dataset(ds, path)
        raw = path.read_bytes()
        magic, version, count, channels, height, width, classes = \
            HEADER.unpack_from(raw)
        assert (magic, version) == (MAGIC, FORMAT_VERSION)
        assert (count, channels, height, width, classes) == (6, 1, 4, 4, 2)
        assert len(raw) == HEADER.size + 6 * (1 + 16 * 4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(pack_file(magic=b"JUNK"))
        with pytest.raises(BadMagicError):
            load_dataset(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(pack_file(version=9))
        with pytest.raises(UnsupportedVersionError):
            load_dataset(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(pack_file()[: HEADER.size - 3])
        with pytest.raises(TruncatedFileError):
            load_dataset(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(pack_file(count=2)[:-5])
        with pytest.raises(TruncatedFileError):
            load_dataset(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(pack_file() + b"\x00\x00")
        with pytest.raises(DatasetFormatError, match="trailing"):
            load_dataset(path)

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(pack_file(num_classes=2, label=5))
        with pytest.raises(LabelRangeError):
            load_dataset(path)

    def test_pixel_out_of_range(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(pack_file(pixel=1.5))
        with pytest.raises(PixelRangeError):
            load_dataset(path)

    def test_non_finite_pixel(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(pack_file(pixel=np.nan))
        with pytest.raises(PixelRangeError):
            load_dataset(path)

    def test_zero_count_header_rejected(self, tmp_path):
        path = tmp_path / "d.fads"
        path.write_bytes(HEADER.pack(MAGIC, FORMAT_VERSION, 0, 1, 2, 2, 2))
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_save_rejects_normalized_pixels(self, tmp_path):
        ds = augment(tiny_dataset(), AugmentOps(normalize=((0.5,), (0.5,))))
        with pytest.raises(PixelRangeError):
            save_dataset(ds, tmp_path / "d.fads")

    def test_all_error_classes_share_base(self):
        for cls in (BadMagicError, UnsupportedVersionError,
                    TruncatedFileError, LabelRangeError, PixelRangeError):
            assert issubclass(cls, DatasetFormatError)
        assert issubclass(DatasetFormatError, ValueError)


class TestSyntheticGenerator:
    def test_deterministic_per_seed(self):
        a = generate_synthetic(30, 8, seed=4)
        b = generate_synthetic(30, 8, seed=4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_seeds_differ(self):
        a = generate_synthetic(30, 8, seed=1)
        b = generate_synthetic(30, 8, seed=2)
        assert not np.array_equal(a.images, b.images)

    def test_shapes_dtype_and_range(self):
        ds = generate_synthetic(12, 10, num_classes=3, channels=2, seed=0)
        assert ds.images.shape == (12, 2, 10, 10)
        assert ds.images.dtype == np.float32
        assert ds.labels.shape == (12,)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_labels_balanced_up_to_remainder(self):
        ds = generate_synthetic(31, 8, num_classes=3, seed=9)
        counts = ds.class_counts()
        assert counts.max() - counts.min() <= 1
        assert counts.sum() == 31

    def test_noise_free_images_identical_within_class(self):
        ds = generate_synthetic(12, 8, num_classes=2, noise_level=0.0, seed=3)
        for k in range(2):
            group = ds.images[ds.labels == k]
            assert np.all(group == group[0])

    def test_noise_free_classes_nearest_centroid_separable(self):
        ds = generate_synthetic(40, 16, num_classes=4, noise_level=0.0, seed=7)
        flat = ds.images.reshape(len(ds), -1).astype(np.float64)
        centroids = np.stack([flat[ds.labels == k].mean(axis=0)
                              for k in range(4)])
        dists = ((flat[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(dists.argmin(axis=1), ds.labels)

    def test_channels_replicated(self):
        ds = generate_synthetic(5, 8, channels=3, seed=1)
        np.testing.assert_array_equal(ds.images[:, 0], ds.images[:, 1])
        np.testing.assert_array_equal(ds.images[:, 0], ds.images[:, 2])

    @pytest.mark.parametrize("kwargs", [
        dict(num_samples=0, image_size=8),
        dict(num_samples=4, image_size=3),
        dict(num_samples=4, image_size=8, num_classes=1),
        dict(num_samples=4, image_size=8, noise_level=-0.1),
        dict(num_samples=4, image_size=8, signal_strength=0.0),
    ])
    def test_invalid_parameters_rejected(self, kwargs):
        with pytest.raises(ValueError):
            generate_synthetic(**kwargs)


class TestAugment:
    def test_identity_ops_bit_exact(self):
        ds = tiny_dataset(n=10, seed=2)
        out = augment(ds, AugmentOps(), seed=5)
        np.testing.assert_array_equal(out.images, ds.images)
        np.testing.assert_array_equal(out.labels, ds.labels)
        assert (out.pixel_min, out.pixel_max) == (ds.pixel_min, ds.pixel_max)

    def test_certain_flip_matches_manual_mirror(self):
        ds = tiny_dataset(n=4, seed=3)
        out = augment(ds, AugmentOps(h_flip_prob=1.0), seed=0)
        np.testing.assert_array_equal(out.images, ds.images[:, :, :, ::-1])

    def test_certain_flip_is_an_involution(self):
        ds = tiny_dataset(n=4, seed=4)
        twice = augment(augment(ds, AugmentOps(h_flip_prob=1.0)),
                        AugmentOps(h_flip_prob=1.0))
        np.testing.assert_array_equal(twice.images, ds.images)

    def test_flip_probability_honored_over_many_samples(self):
        ds = tiny_dataset(n=2000, seed=5)
        out = augment(ds, AugmentOps(h_flip_prob=0.5), seed=6)
        flipped = np.any(out.images != ds.images, axis=(1, 2, 3)).sum()
        sigma = np.sqrt(2000 * 0.25)
        assert abs(flipped - 1000) <= 4 * sigma

    def test_rotation_preserves_shape_labels_and_bounds(self):
        ds = generate_synthetic(8, 12, seed=6)
        out = augment(ds, AugmentOps(rotation_degrees=20.0), seed=7)
        assert out.images.shape == ds.images.shape
        np.testing.assert_array_equal(out.labels, ds.labels)
        assert out.images.min() >= 0.0 and out.images.max() <= 1.0
        assert not np.array_equal(out.images, ds.images)

    def test_normalize_values_and_bounds(self):
        ds = tiny_dataset(n=5, seed=7)
        out = augment(ds, AugmentOps(normalize=((0.5,), (0.5,))))
        np.testing.assert_allclose(
            out.images, (ds.images - 0.5) / 0.5, rtol=0, atol=1e-7)
        assert out.pixel_min == pytest.approx(-1.0)
        assert out.pixel_max == pytest.approx(1.0)

    def test_normalize_scalar_broadcasts_over_channels(self):
        ds = generate_synthetic(4, 8, channels=3, seed=8)
        a = augment(ds, AugmentOps(normalize=(0.5, 0.5)))
        b = augment(ds, AugmentOps(normalize=((0.5, 0.5, 0.5),
                                              (0.5, 0.5, 0.5))))
        np.testing.assert_array_equal(a.images, b.images)

    def test_normalize_zero_std_rejected(self):
        ds = tiny_dataset()
        with pytest.raises(ValueError):
            augment(ds, AugmentOps(normalize=((0.5,), (0.0,))))

    def test_normalize_wrong_channel_count_rejected(self):
        ds = tiny_dataset()
        with pytest.raises(ValueError):
            augment(ds, AugmentOps(normalize=((0.1, 0.2), (0.5, 0.5))))

    def test_deterministic_per_seed(self):
        ds = generate_synthetic(10, 8, seed=9)
        ops = AugmentOps(h_flip_prob=0.5, rotation_degrees=15.0)
        a = augment(ds, ops, seed=3)
        b = augment(ds, ops, seed=3)
        np.testing.assert_array_equal(a.images, b.images)

    def test_input_dataset_never_mutated(self):
        ds = tiny_dataset(n=4, seed=10)
        before = ds.images.copy()
        augment(ds, AugmentOps(h_flip_prob=1.0, rotation_degrees=10.0,
                               normalize=((0.5,), (0.5,))), seed=1)
        np.testing.assert_array_equal(ds.images, before)

    @pytest.mark.parametrize("kwargs", [
        dict(h_flip_prob=1.5),
        dict(h_flip_prob=-0.1),
        dict(rotation_degrees=-5.0),
    ])
    def test_invalid_ops_rejected(self, kwargs):
        with pytest.raises(ValueError):
            AugmentOps(**kwargs)
