import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from modeconnect.dataio import (
    IdxError,
    SyntheticSpec,
    gen_synthetic,
    load_idx,
    load_mnist_dir,
    parse_idx,
    train_test_split,
    write_idx,
)
from modeconnect.netcore import MlpSpec, SgdConfig, evaluate_weights, train_sgd

IMAGES = 0x00000803
LABELS = 0x00000801


def two_images():
    """Two 2x3 images and their labels as raw IDX bytes."""
    pixels = bytes([0, 255, 51, 102, 153, 204, 10, 20, 30, 40, 50, 60])
    images = struct.pack(">IIII", IMAGES, 2, 2, 3) + pixels
    labels = struct.pack(">II", LABELS, 2) + bytes([7, 3])
    return images, labels


class TestIdx:
    def test_hand_made_fixture(self, tmp_path):
        images, labels = two_images()
        (tmp_path / "i").write_bytes(images)
        (tmp_path / "l").write_bytes(labels)
        data = load_idx(tmp_path / "i", tmp_path / "l")
        assert data.features.shape == (6, 2)
        np.testing.assert_allclose(data.features[:, 0], [0.0, 1.0, 0.2, 0.4, 0.6, 0.8])
        np.testing.assert_array_equal(data.labels, [7, 3])

    def test_bad_magic(self):
        images, _ = two_images()
        with pytest.raises(IdxError) as info:
            parse_idx(images, LABELS)
        assert info.value.offset == 0

    def test_truncated_payload(self):
        images, _ = two_images()
        with pytest.raises(IdxError) as info:
            parse_idx(images[:-1], IMAGES)
        assert info.value.offset == len(images) - 1

    def test_truncated_header(self):
        with pytest.raises(IdxError):
            parse_idx(struct.pack(">II", IMAGES, 2), IMAGES)

    def test_trailing_bytes(self):
        images, _ = two_images()
        with pytest.raises(IdxError) as info:
            parse_idx(images + b"\x00", IMAGES)
        assert info.value.offset == len(images)

    def test_count_mismatch(self, tmp_path):
        images, _ = two_images()
        (tmp_path / "i").write_bytes(images)
        (tmp_path / "l").write_bytes(struct.pack(">II", LABELS, 3) + bytes([1, 2, 3]))
        with pytest.raises(IdxError, match="2 images but 3 labels"):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_gzip_and_directory_layout(self, tmp_path):
        images, labels = two_images()
        (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(gzip.compress(images))
        (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(labels)
        data = load_mnist_dir(tmp_path, "test")
        assert len(data) == 2

    def test_missing_directory_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mnist_dir(tmp_path, "train")

    def test_write_then_parse(self, tmp_path):
        arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        write_idx(tmp_path / "x", arr)
        np.testing.assert_array_equal(parse_idx((tmp_path / "x").read_bytes(), IMAGES), arr)


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(classes=3, dim=5, samples_per_class=20, seed=4)
        a, b = gen_synthetic(spec), gen_synthetic(spec)
        assert a.features.tobytes() == b.features.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_seed_matters(self):
        a = gen_synthetic(SyntheticSpec(seed=1))
        b = gen_synthetic(SyntheticSpec(seed=2))
        assert not np.array_equal(a.features, b.features)

    def test_class_histogram(self):
        data = gen_synthetic(SyntheticSpec(classes=4, samples_per_class=25))
        np.testing.assert_array_equal(np.bincount(data.labels), [25] * 4)
        assert data.features.shape == (2, 100)

    def test_zero_noise_is_trivially_separable(self):
        data = gen_synthetic(SyntheticSpec(classes=2, dim=2, samples_per_class=50, std=0.0, seed=3))
        spec = MlpSpec((2, 4, 2))
        w = train_sgd(spec, data, SgdConfig(lr=0.05, batch=16, epochs=100, seed=0))
        assert evaluate_weights(spec, w, data)[1] == 1.0

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(std=-1.0)

    def test_split_partitions(self):
        data = gen_synthetic(SyntheticSpec(samples_per_class=50))
        train, test = train_test_split(data, 0.2, seed=1)
        assert (len(train), len(test)) == (80, 20)
        both = np.hstack([train.features, test.features])
        assert sorted(map(tuple, both.T)) == sorted(map(tuple, data.features.T))


MNIST_DIR = Path(os.environ.get("MODECONNECT_MNIST_DIR", Path(__file__).resolve().parents[1] / "data" / "mnist"))
HAVE_MNIST = any((MNIST_DIR / f"train-labels-idx1-ubyte{ext}").exists() for ext in ("", ".gz"))


@pytest.mark.skipif(not HAVE_MNIST, reason="standard MNIST files not present")
class TestMnistFiles:
    def test_standard_train_split(self):
        data = load_mnist_dir(MNIST_DIR, "train")
        assert data.features.shape == (784, 60000)
        assert 0.0 <= data.features.min() and data.features.max() <= 1.0

    def test_standard_test_split(self):
        assert len(load_mnist_dir(MNIST_DIR, "test")) == 10000
