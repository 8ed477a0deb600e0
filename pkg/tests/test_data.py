"""Datasets: CIFAR binary layout, synthetic shapes, channel statistics."""

import numpy as np
import pytest

from mulan.data import (
    CIFAR_RECORD_BYTES,
    Dataset,
    compute_stats,
    load_cifar_binary,
    make_synth_dataset,
    parse_cifar_records,
    serialize_cifar_records,
    synth_shapes,
)
from mulan.errors import DataFormatError


# ---------------------------------------------------------------------------
# CIFAR binary
# ---------------------------------------------------------------------------

def test_cifar_single_record_fixture():
    raw = bytes([3]) + bytes(3072)
    images, labels = parse_cifar_records(raw)
    assert images.shape == (1, 3, 32, 32)
    assert labels[0] == 3
    assert np.all(images == 0.0)


def test_cifar_truncated_file_rejected():
    with pytest.raises(DataFormatError):
        parse_cifar_records(bytes(CIFAR_RECORD_BYTES - 1))
    with pytest.raises(DataFormatError):
        parse_cifar_records(bytes(CIFAR_RECORD_BYTES + 10))


def test_cifar_bad_label_rejected():
    raw = bytes([10]) + bytes(3072)
    with pytest.raises(DataFormatError):
        parse_cifar_records(raw)


def test_cifar_roundtrip_is_byte_identical():
    rng = np.random.default_rng(0)
    raw = bytes([int(rng.integers(0, 10))]) + rng.integers(0, 256, 3072).astype(np.uint8).tobytes()
    images, labels = parse_cifar_records(raw)
    assert serialize_cifar_records(images, labels) == raw


def test_cifar_loader_from_files(tmp_path):
    rng = np.random.default_rng(1)
    def blob(n):
        recs = rng.integers(0, 256, (n, CIFAR_RECORD_BYTES)).astype(np.uint8)
        recs[:, 0] = rng.integers(0, 10, n)
        return recs.tobytes()
    train = tmp_path / "data_batch_1.bin"
    train.write_bytes(blob(6))
    val = tmp_path / "test_batch.bin"
    val.write_bytes(blob(2))
    ds = load_cifar_binary([train], val)
    assert ds.train_images.shape == (6, 3, 32, 32)
    assert ds.val_images.shape == (2, 3, 32, 32)
    assert ds.n_classes == 10
    assert serialize_cifar_records(ds.train_images, ds.train_labels) == train.read_bytes()


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def test_synth_same_seed_bit_identical():
    a_img, a_lab = synth_shapes(7, 8)
    b_img, b_lab = synth_shapes(7, 8)
    assert np.array_equal(a_img, b_img)
    assert np.array_equal(a_lab, b_lab)


def test_synth_different_seed_differs():
    a_img, _ = synth_shapes(7, 4)
    b_img, _ = synth_shapes(8, 4)
    assert not np.array_equal(a_img, b_img)


def test_synth_exact_class_balance():
    _, labels = synth_shapes(0, 25)
    counts = np.bincount(labels, minlength=4)
    assert np.all(counts == 25)


def test_synth_values_in_unit_range():
    images, _ = synth_shapes(3, 5)
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_synth_split_streams_disjoint():
    ds = make_synth_dataset(5, n_train=16, n_val=16)
    assert not np.array_equal(ds.train_images, ds.val_images)


def segment_shape(img):
    """Pixels far from the gray noise background, as a boolean mask."""
    dist = np.abs(img - 0.5).max(axis=0)
    return dist > 0.25


def test_synth_pixel_count_heuristic_separates_disk_from_cross():
    # bbox fill ratio: disk ~ pi/4 = 0.785, cross ~ 5/9 = 0.556; a threshold
    # between them classifies well above the 50% chance level.
    images, labels = synth_shapes(11, 60, classes=("disk", "cross"))
    correct = 0
    for img, lab in zip(images, labels):
        mask = segment_shape(img)
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            continue
        bbox_area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        ratio = mask.sum() / bbox_area
        pred = 0 if ratio > 0.67 else 1
        correct += int(pred == lab)
    assert correct / len(labels) > 0.8


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def test_stats_constant_dataset_guarded():
    images = np.full((4, 3, 8, 8), 0.5, dtype=np.float32)
    stats = compute_stats(images)
    np.testing.assert_allclose(stats.mean, 0.5, atol=1e-7)
    assert np.all(stats.std >= 1e-6)


def test_stats_match_hand_computation():
    rng = np.random.default_rng(2)
    images = rng.random((2, 3, 4, 4)).astype(np.float32)
    stats = compute_stats(images)
    for c in range(3):
        vals = images[:, c].ravel().astype(np.float64)
        assert abs(stats.mean[c] - vals.mean()) < 1e-7
        assert abs(stats.std[c] - vals.std()) < 1e-7


def test_stats_order_invariant():
    rng = np.random.default_rng(3)
    images = rng.random((10, 3, 4, 4)).astype(np.float32)
    perm = rng.permutation(10)
    a = compute_stats(images)
    b = compute_stats(images[perm])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-7)
    np.testing.assert_allclose(a.std, b.std, atol=1e-7)
