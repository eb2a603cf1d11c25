import struct

import numpy as np
import pytest

from cflat.data import (
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    Dataset,
    SyntheticSpec,
    gen_gaussian_classes,
    normalize_unit_range,
    read_idx,
    read_idx_pair,
    split_train_test,
    write_idx_pair,
)
from cflat.errors import ContractViolation, IdxParseError


def linear_probe_accuracy(train: Dataset, test: Dataset) -> float:
    """One-vs-all least-squares classifier: the weakest reasonable baseline."""
    X = np.hstack([train.features, np.ones((len(train), 1))])
    T = np.zeros((len(train), train.class_count))
    T[np.arange(len(train)), train.labels] = 1.0
    W, *_ = np.linalg.lstsq(X, T, rcond=None)
    Xt = np.hstack([test.features, np.ones((len(test), 1))])
    pred = np.argmax(Xt @ W, axis=1)
    return float(np.mean(pred == test.labels))


class TestSyntheticGeneration:
    def test_zero_spread_collapses_to_means(self):
        spec = SyntheticSpec(class_count=3, per_class=5, dim=4, cluster_spread=0.0,
                             inter_class_distance=2.0, seed=7)
        ds = gen_gaussian_classes(spec)
        for cls in range(3):
            rows = ds.features[ds.class_indices(cls)]
            assert np.all(rows == rows[0])
            assert np.linalg.norm(rows[0]) == pytest.approx(2.0, rel=1e-12)

    def test_same_seed_bit_identical(self):
        spec = SyntheticSpec(class_count=4, per_class=10, dim=8, seed=3)
        a = gen_gaussian_classes(spec)
        b = gen_gaussian_classes(spec)
        assert a.features.tobytes() == b.features.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_well_separated_clusters_linearly_separable(self):
        spec = SyntheticSpec(class_count=4, per_class=50, dim=8, cluster_spread=0.1,
                             inter_class_distance=10.0, seed=11)
        ds = gen_gaussian_classes(spec)
        acc = linear_probe_accuracy(ds, ds)
        assert acc == 1.0

    def test_default_benchmark_linear_probe_band(self):
        # spread is tuned so a linear probe cannot saturate the benchmark
        ds = gen_gaussian_classes(SyntheticSpec())
        train, test = split_train_test(ds, seed=0)
        acc = linear_probe_accuracy(train, test)
        assert 0.75 <= acc <= 0.93

    def test_spec_validation(self):
        with pytest.raises(ContractViolation):
            SyntheticSpec(per_class=1)
        with pytest.raises(ContractViolation):
            SyntheticSpec(dim=1)


class TestSplit:
    def test_per_class_disjoint_and_complete(self):
        ds = gen_gaussian_classes(SyntheticSpec(class_count=3, per_class=10, dim=4, seed=1))
        train, test = split_train_test(ds, train_fraction=0.8, seed=5)
        assert len(train) == 24 and len(test) == 6
        for cls in range(3):
            assert len(train.class_indices(cls)) == 8
            assert len(test.class_indices(cls)) == 2

    def test_split_deterministic(self):
        ds = gen_gaussian_classes(SyntheticSpec(class_count=3, per_class=10, dim=4, seed=1))
        a_train, _ = split_train_test(ds, seed=5)
        b_train, _ = split_train_test(ds, seed=5)
        assert a_train.features.tobytes() == b_train.features.tobytes()

    def test_different_seed_different_split(self):
        ds = gen_gaussian_classes(SyntheticSpec(class_count=3, per_class=10, dim=4, seed=1))
        a_train, _ = split_train_test(ds, seed=5)
        b_train, _ = split_train_test(ds, seed=6)
        assert a_train.features.tobytes() != b_train.features.tobytes()


class TestIdx:
    def test_header_arithmetic(self, tmp_path):
        path = tmp_path / "img.idx"
        payload = bytes(range(8))
        path.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 2, 2, 2) + payload)
        magic, dims, raw = read_idx(path)
        assert magic == IDX_IMAGE_MAGIC
        assert dims == (2, 2, 2)
        assert raw.size == 8

    def test_label_magic_on_image_path_rejected(self, tmp_path):
        path = tmp_path / "labels_as_images.idx"
        path.write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, 0))
        with pytest.raises(IdxParseError) as err:
            read_idx_pair(path, path)
        assert "0x00000801" in str(err.value) and "0x00000803" in str(err.value)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">I", 0xDEADBEEF))
        with pytest.raises(IdxParseError):
            read_idx(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 2, 2, 2) + b"\x00")
        with pytest.raises(IdxParseError) as err:
            read_idx(path)
        assert err.value.offset == 16  # header is magic + three u32 dims

    def test_count_mismatch_rejected(self, tmp_path):
        img = tmp_path / "img.idx"
        lab = tmp_path / "lab.idx"
        img.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 2, 1, 2) + bytes(4))
        lab.write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, 3) + bytes(3))
        with pytest.raises(IdxParseError):
            read_idx_pair(img, lab)

    def test_round_trip_bit_identical(self, tmp_path):
        # features on the 1/255 grid survive quantization exactly
        rng = np.random.default_rng(0)
        feats = rng.integers(0, 256, size=(12, 6)).astype(np.float64) / 255.0
        labels = rng.integers(0, 3, size=12).astype(np.int64)
        ds = Dataset(feats, labels, 3)
        write_idx_pair(ds, tmp_path / "i.idx", tmp_path / "l.idx")
        back = read_idx_pair(tmp_path / "i.idx", tmp_path / "l.idx")
        assert back.features.tobytes() == feats.tobytes()
        assert np.array_equal(back.labels, labels)

    def test_write_rejects_out_of_range(self, tmp_path):
        ds = Dataset(np.array([[2.0]]), np.array([0]), 1)
        with pytest.raises(ContractViolation):
            write_idx_pair(ds, tmp_path / "i.idx", tmp_path / "l.idx")

    def test_normalize_unit_range(self):
        ds = Dataset(np.array([[-5.0, 0.0], [5.0, 2.5]]), np.array([0, 1]), 2)
        out = normalize_unit_range(ds)
        assert out.features.min() == 0.0 and out.features.max() == 1.0
