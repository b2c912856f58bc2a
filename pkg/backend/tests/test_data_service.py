import numpy as np
import pytest

from models.schemas import Batch
from services import data_service
from services.errors import ConfigError, DataFormatError


def _cifar_bytes(rng, records, label_bytes=1, max_label=10):
    raw = rng.integers(0, 256, size=(records, label_bytes + 3072), dtype=np.uint8)
    raw[:, :label_bytes] %= max_label
    return raw


def _write_cifar10(directory, rng, records):
    for name in (*data_service.CIFAR10_TRAIN_FILES, data_service.CIFAR10_TEST_FILE):
        (directory / name).write_bytes(_cifar_bytes(rng, records).tobytes())


def test_decode_single_record_planes():
    record = bytes([3]) + bytes([10] * 1024) + bytes([20] * 1024) + bytes([30] * 1024)
    ds = data_service.decode_records(record, 32, 3, 10)
    assert ds.labels.tolist() == [3]
    assert ds.pixels.shape == (1, 32, 32, 3)
    assert ds.pixels[0, 5, 7].tolist() == [10, 20, 30]
    image = ds.record(0).pixels
    np.testing.assert_allclose(image[0, 0], [10 / 255, 20 / 255, 30 / 255])


def test_decode_reports_truncation_offset():
    data = bytes(3073 * 2 + 100)
    with pytest.raises(DataFormatError, match="byte offset 6146"):
        data_service.decode_records(data, 32, 3, 10)


def test_decode_rejects_out_of_range_label():
    data = bytes([10]) + bytes(3072)
    with pytest.raises(DataFormatError, match="label 10"):
        data_service.decode_records(data, 32, 3, 10)


def test_records_round_trip_bytes(rng):
    raw = _cifar_bytes(rng, 4).tobytes()
    assert data_service.encode_records(data_service.decode_records(raw, 32, 3, 10)) == raw


def test_load_cifar10_directory(tmp_path, rng):
    _write_cifar10(tmp_path, rng, records=3)
    train, test = data_service.load_cifar10_bin(tmp_path, records_per_file=3)
    assert len(train) == 15 and len(test) == 3
    assert train.image_size == 32 and train.num_classes == 10
    original = (tmp_path / "data_batch_2.bin").read_bytes()
    assert data_service.encode_records(data_service.Dataset(train.pixels[3:6], train.labels[3:6], 10)) == original


def test_load_cifar10_wrong_record_count(tmp_path, rng):
    _write_cifar10(tmp_path, rng, records=3)
    with pytest.raises(DataFormatError, match="expected"):
        data_service.load_cifar10_bin(tmp_path, records_per_file=4)


def test_load_cifar10_missing_directory(tmp_path):
    with pytest.raises(DataFormatError):
        data_service.load_cifar10_bin(tmp_path / "absent")


def test_load_cifar10_missing_file(tmp_path, rng):
    _write_cifar10(tmp_path, rng, records=2)
    (tmp_path / "test_batch.bin").unlink()
    with pytest.raises(DataFormatError):
        data_service.load_cifar10_bin(tmp_path, records_per_file=2)


def test_load_cifar100_uses_fine_label(tmp_path, rng):
    for name, n in (("train.bin", 4), ("test.bin", 2)):
        raw = _cifar_bytes(rng, n, label_bytes=2, max_label=100)
        raw[:, 0] = 7
        (tmp_path / name).write_bytes(raw.tobytes())
    train, test = data_service.load_cifar100_bin(tmp_path, train_records=4, test_records=2)
    fine = np.frombuffer((tmp_path / "train.bin").read_bytes(), dtype=np.uint8).reshape(4, 3074)[:, 1]
    assert train.labels.tolist() == fine.tolist()
    assert train.num_classes == 100 and len(test) == 2


def test_synthetic_textures_are_deterministic():
    a = data_service.gen_synthetic_textures(5, 16, seed=7)
    b = data_service.gen_synthetic_textures(5, 16, seed=7)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1
    assert np.bincount(a.labels).tolist() == [5, 5, 5, 5]


def test_synthetic_splits_differ_between_train_and_test():
    train, test = data_service.synthetic_splits(4, 2, 16, seed=1)
    assert len(train) == 16 and len(test) == 8
    assert not np.array_equal(train.pixels[:8], test.pixels)


def test_synthetic_textures_need_size_eight():
    with pytest.raises(ConfigError):
        data_service.gen_synthetic_textures(2, 4, seed=0)


def test_stripes_vary_along_one_axis():
    rng = np.random.default_rng(0)
    horizontal = data_service.texture_pattern(0, 16, rng)
    vertical = data_service.texture_pattern(1, 16, rng)
    np.testing.assert_allclose(horizontal.std(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(vertical.std(axis=0), 0.0, atol=1e-12)


def test_channel_stats_and_normalize(rng):
    ds = data_service.gen_synthetic_textures(3, 16, seed=2)
    stats = data_service.channel_stats(ds)
    out = data_service.normalize(ds.images(), stats)
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=(0, 1, 2)), 1.0, atol=1e-10)
    assert data_service.normalize(ds.images(), None) is not None


def test_iterate_batches_keeps_partial_batch(rng):
    batches = list(data_service.iterate_batches(10, 4, rng))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    ordered = list(data_service.iterate_batches(5, 2, shuffle=False))
    assert np.concatenate(ordered).tolist() == [0, 1, 2, 3, 4]


def test_mixup_with_explicit_lambda():
    images = np.stack([np.zeros((2, 2, 3)), np.ones((2, 2, 3))])
    targets = np.eye(2)
    batch = data_service.mixup_batch(Batch(images=images, targets=targets), 1.0, np.random.default_rng(0),
                                     lam=0.3, perm=np.array([1, 0]))
    np.testing.assert_allclose(batch.images[0], 0.7)
    np.testing.assert_allclose(batch.targets[0], [0.3, 0.7])
    np.testing.assert_allclose(batch.targets.sum(axis=1), 1.0)


def test_mixup_needs_positive_alpha():
    batch = Batch(images=np.zeros((1, 2, 2, 3)), targets=np.ones((1, 1)))
    with pytest.raises(ConfigError):
        data_service.mixup_batch(batch, 0.0, np.random.default_rng(0))


def test_crop_flip_without_padding_only_flips(rng):
    images = rng.uniform(size=(6, 8, 8, 3))
    out = data_service.random_crop_flip(images, 0, rng)
    for a, b in zip(images, out):
        assert np.array_equal(a, b) or np.array_equal(a[:, ::-1], b)


def test_crop_flip_keeps_shape(rng):
    images = rng.uniform(size=(3, 16, 16, 3))
    assert data_service.random_crop_flip(images, 4, rng).shape == images.shape
