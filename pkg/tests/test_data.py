import numpy as np
import pytest

from mpsupernet.data import NUM_CLASSES, gen_synthetic, resize_batch


def test_same_seed_is_bitwise_identical():
    a, b = gen_synthetic("shapes-seg", 5, 32, 7), gen_synthetic("shapes-seg", 5, 32, 7)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_synthetic("shapes-seg", 5, 32, 8).images)


def test_single_sample_is_valid():
    d = gen_synthetic("shapes-seg", 1, 48, 0)
    assert d.images.shape == (1, 48, 48, 1) and d.labels.shape == (1, 48, 48)
    assert d.images.min() >= 0 and d.images.max() <= 1
    assert set(np.unique(d.labels)) <= set(range(NUM_CLASSES))


def test_class_frequencies_and_foreground():
    d = gen_synthetic("shapes-seg", 500, 64, 0)
    counts = np.bincount(d.labels.ravel(), minlength=NUM_CLASSES)
    freq = counts / counts.sum()
    assert (freq >= 0.05).all(), freq
    assert all((lab > 0).any() for lab in d.labels)


def test_errors():
    with pytest.raises(ValueError):
        gen_synthetic("coco", 1, 32, 0)
    with pytest.raises(ValueError):
        gen_synthetic("shapes-seg", 0, 32, 0)


def test_resize_batch():
    d = gen_synthetic("shapes-seg", 2, 64, 0)
    imgs, labs = resize_batch(d.images, d.labels, 32)
    assert imgs.shape == (2, 32, 32, 1) and labs.shape == (2, 32, 32)
    assert imgs.dtype == np.float32 and labs.dtype == d.labels.dtype
    # corners are kept exactly under align-corners sampling
    np.testing.assert_allclose(imgs[:, [0, -1]][:, :, [0, -1]], d.images[:, [0, -1]][:, :, [0, -1]], rtol=1e-6)
    same = resize_batch(d.images, d.labels, 64)
    assert same[0] is d.images
