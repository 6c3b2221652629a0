import struct

import numpy as np
import pytest

from lcforge.data import (CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, IDENTITY_POLICY, AugmentPolicy, Dataset,
                          DatasetError, augment, batches, channel_stats, denormalize, epoch_order, load_cifar10,
                          load_mnist_dir, load_mnist_idx, normalize, synthetic_cifar, upscale_nearest)
from lcforge.rng import stream


def _raw_cifar_record(label, r, g, b):
    # label byte, then 1024 red, 1024 green, 1024 blue bytes (row-major planes)
    return bytes([label]) + bytes(r) + bytes(g) + bytes(b)


def _write_manual_cifar(root, rng, n_per_file=3):
    expected = {}
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        recs, imgs, labs = b"", [], []
        for _ in range(n_per_file):
            planes = rng.integers(0, 256, size=(3, 1024), dtype=np.uint8)
            label = int(rng.integers(0, 10))
            recs += _raw_cifar_record(label, *planes.tolist())
            imgs.append(planes.reshape(3, 32, 32))
            labs.append(label)
        (root / name).write_bytes(recs)
        expected[name] = (np.stack(imgs), np.array(labs))
    return expected


def test_cifar_binary_layout(tmp_path, rng):
    expected = _write_manual_cifar(tmp_path, rng)
    train, test = load_cifar10(tmp_path)
    np.testing.assert_array_equal(train.images, np.concatenate([expected[f][0] for f in CIFAR_TRAIN_FILES]))
    np.testing.assert_array_equal(train.labels, np.concatenate([expected[f][1] for f in CIFAR_TRAIN_FILES]))
    np.testing.assert_array_equal(test.images, expected[CIFAR_TEST_FILE][0])
    assert train.images.dtype == np.uint8 and train.images.shape == (15, 3, 32, 32)
    # test split shares training statistics
    np.testing.assert_array_equal(test.channel_mean, train.channel_mean)
    # pixel (row 0, col 1) of the green plane is byte 1 + 1024 + 1 of the record
    raw = (tmp_path / CIFAR_TEST_FILE).read_bytes()
    assert test.images[0, 1, 0, 1] == raw[1 + 1024 + 1]


def test_cifar_nested_directory(tmp_path, rng):
    (tmp_path / "cifar-10-batches-bin").mkdir()
    _write_manual_cifar(tmp_path / "cifar-10-batches-bin", rng, 1)
    train, _ = load_cifar10(tmp_path)
    assert len(train) == 5


def test_cifar_errors(tmp_path, rng):
    with pytest.raises(DatasetError, match="missing"):
        load_cifar10(tmp_path)
    _write_manual_cifar(tmp_path, rng, 1)
    (tmp_path / CIFAR_TEST_FILE).write_bytes(b"\x00" * 3000)
    with pytest.raises(DatasetError, match="30,730,000"):
        load_cifar10(tmp_path)


def _idx_bytes(magic, arr):
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape) + arr.tobytes()


def test_mnist_idx(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    (tmp_path / "i").write_bytes(_idx_bytes(0x803, imgs))
    (tmp_path / "l").write_bytes(_idx_bytes(0x801, labels))
    ds = load_mnist_idx(tmp_path / "i", tmp_path / "l", upscale=None)
    assert ds.images.shape == (4, 1, 28, 28)
    np.testing.assert_array_equal(ds.images[:, 0], imgs)
    np.testing.assert_array_equal(ds.labels, labels)
    up = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert up.images.shape == (4, 1, 32, 32)
    (tmp_path / "wrong").write_bytes(_idx_bytes(0x801, imgs))
    with pytest.raises(DatasetError, match="magic"):
        load_mnist_idx(tmp_path / "wrong", tmp_path / "l")
    (tmp_path / "short").write_bytes(_idx_bytes(0x803, imgs)[:-5])
    with pytest.raises(DatasetError, match="payload"):
        load_mnist_idx(tmp_path / "short", tmp_path / "l")


def test_mnist_dir(tmp_path, rng):
    for prefix, n in (("train", 6), ("t10k", 3)):
        (tmp_path / f"{prefix}-images-idx3-ubyte").write_bytes(
            _idx_bytes(0x803, rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)))
        (tmp_path / f"{prefix}-labels-idx1-ubyte").write_bytes(
            _idx_bytes(0x801, rng.integers(0, 10, n).astype(np.uint8)))
    train, test = load_mnist_dir(tmp_path)
    assert (len(train), len(test)) == (6, 3)
    np.testing.assert_array_equal(test.channel_std, train.channel_std)


def test_upscale_nearest():
    x = np.arange(4, dtype=np.uint8).reshape(2, 2)
    np.testing.assert_array_equal(upscale_nearest(x, 4), [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    assert upscale_nearest(np.zeros((3, 28, 28)), 32).shape == (3, 32, 32)


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 3, 4)), [0, 1])
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 3, 4, 4), np.uint8), [0])
    with pytest.raises(DatasetError, match="labels"):
        Dataset(np.zeros((2, 3, 4, 4), np.uint8), [0, 10])


def test_channel_stats_oracle(rng):
    imgs = rng.integers(0, 256, size=(5, 3, 4, 4), dtype=np.uint8)
    mean, std = channel_stats(imgs)
    for c in range(3):
        vals = imgs[:, c].astype(np.float64).ravel() / 255
        assert mean[c] == pytest.approx(vals.mean())
        assert std[c] == pytest.approx(vals.std())


def test_normalize_roundtrip(rng, f64):
    imgs = rng.integers(0, 256, size=(2, 3, 4, 4), dtype=np.uint8)
    mean, std = np.array([0.4, 0.5, 0.6]), np.array([0.2, 0.25, 0.3])
    x = normalize(imgs, mean, std)
    np.testing.assert_allclose(denormalize(x, mean, std) * 255, imgs, atol=1e-9)


def test_augment_identity_and_flip(rng):
    imgs = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    np.testing.assert_array_equal(augment(imgs, IDENTITY_POLICY, stream(0)), imgs)
    flipped = augment(imgs, AugmentPolicy(pad=0, crop=32, hflip_prob=1.0), stream(0))
    np.testing.assert_array_equal(flipped, imgs[:, :, :, ::-1])


def test_augment_crops_are_windows_of_padded_image(rng):
    imgs = rng.integers(1, 256, size=(8, 3, 32, 32), dtype=np.uint8)
    out = augment(imgs, AugmentPolicy(), stream(2, 0, 0, 0))
    padded = np.pad(imgs, ((0, 0), (0, 0), (4, 4), (4, 4)))
    for i in range(len(imgs)):
        candidates = (out[i], out[i][:, :, ::-1])  # undo a possible flip
        assert any(np.array_equal(padded[i][:, oy:oy + 32, ox:ox + 32], c)
                   for c in candidates for oy in range(9) for ox in range(9))


def test_augment_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy(hflip_prob=1.5)
    with pytest.raises(ValueError, match="crop"):
        augment(np.zeros((1, 3, 8, 8), np.uint8), AugmentPolicy(pad=0, crop=16), stream(0))


def test_batches_cover_once_and_are_reproducible(tmp_path):
    train, _ = load_cifar10(synthetic_cifar(tmp_path, 53, 5, seed=1))
    seen = np.concatenate([idx for _, _, idx in batches(train, 10, shuffle_seed=3, epoch=2)])
    assert sorted(seen.tolist()) == list(range(53))
    np.testing.assert_array_equal(seen, epoch_order(53, 3, 2))
    assert not np.array_equal(epoch_order(53, 3, 2), epoch_order(53, 3, 1))
    a = [x.data for x, _, _ in batches(train, 10, 3, 2, AugmentPolicy())]
    b = [x.data for x, _, _ in batches(train, 10, 3, 2, AugmentPolicy())]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    # resuming mid-epoch regenerates the remaining batches exactly
    tail = [x.data for x, _, _ in batches(train, 10, 3, 2, AugmentPolicy(), start_batch=3)]
    assert len(tail) == 3 and all(np.array_equal(p, q) for p, q in zip(a[3:], tail))


def test_batches_ordered_without_seed(tmp_path):
    train, _ = load_cifar10(synthetic_cifar(tmp_path, 20, 5))
    idx = np.concatenate([i for _, _, i in batches(train, 7)])
    np.testing.assert_array_equal(idx, np.arange(20))
    x, y, _ = next(batches(train, 7))
    assert x.shape == (7, 3, 32, 32) and x.dtype == np.float32
    np.testing.assert_array_equal(y, train.labels[:7])


def test_subset_inherits_stats(tmp_path):
    train, _ = load_cifar10(synthetic_cifar(tmp_path, 20, 5))
    sub = train.subset([0, 1, 2])
    np.testing.assert_array_equal(sub.channel_mean, train.channel_mean)
    assert len(sub) == 3
