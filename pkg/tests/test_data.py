import base64
import json

import numpy as np
import pytest

from hardhash.data import (
    CIFAR_RECORD,
    DataError,
    LabeledDataset,
    SyntheticSpec,
    cifar_subset,
    dump_cifar10_bin,
    dump_manifest,
    find_cifar10,
    generate_synthetic,
    label_sets,
    load_cifar10_bin,
    load_manifest,
    split,
)
from hardhash.trainer import similarity


def cifar_blob(labels, seed=0):
    rng = np.random.default_rng(seed)
    recs = [bytes([l]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes() for l in labels]
    return b"".join(recs)


def sq_dists(x):
    x = x.reshape(len(x), -1).astype(np.float64)
    n2 = (x * x).sum(axis=1)
    return n2[:, None] + n2[None, :] - 2 * x @ x.T


class TestCifar:
    def test_two_records(self, tmp_path):
        p = tmp_path / "b.bin"
        p.write_bytes(cifar_blob([3, 7]))
        ds = load_cifar10_bin(p)
        assert ds.images.shape == (2, 3, 32, 32)
        assert label_sets(ds.labels) == [{3}, {7}]
        assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0

    def test_channel_planar_layout(self, tmp_path):
        blob = bytearray(cifar_blob([0]))
        blob[1] = 255  # red plane, first pixel
        blob[1 + 1024 + 33] = 255  # green plane, row 1, col 1
        p = tmp_path / "b.bin"
        p.write_bytes(bytes(blob))
        img = load_cifar10_bin(p).images[0]
        assert img[0, 0, 0] == 1.0 and img[1, 1, 1] == 1.0

    def test_truncated(self, tmp_path):
        p = tmp_path / "short.bin"
        p.write_bytes(b"\0" * 3072)
        with pytest.raises(DataError, match="truncated record at offset 0"):
            load_cifar10_bin(p)

    def test_truncated_second_record(self, tmp_path):
        p = tmp_path / "short.bin"
        p.write_bytes(cifar_blob([1, 2])[:-5])
        with pytest.raises(DataError, match=f"offset {CIFAR_RECORD}"):
            load_cifar10_bin(p)

    def test_bad_label(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(cifar_blob([2, 10]))
        with pytest.raises(DataError, match="label byte 10"):
            load_cifar10_bin(p)

    def test_round_trip_bytes(self, tmp_path):
        blob = cifar_blob([9, 0, 4, 4, 1], seed=3)
        p = tmp_path / "b.bin"
        p.write_bytes(blob)
        assert dump_cifar10_bin(load_cifar10_bin(p)) == blob

    def test_record_order_across_files(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        a.write_bytes(cifar_blob([5]))
        b.write_bytes(cifar_blob([6, 1]))
        assert label_sets(load_cifar10_bin([a, b]).labels) == [{5}, {6}, {1}]

    def test_subset_first_per_class(self, tmp_path):
        p = tmp_path / "b.bin"
        labels = [0, 1, 0, 0, 1, 2]
        p.write_bytes(cifar_blob(labels))
        sub = cifar_subset(load_cifar10_bin(p), 2)
        assert sub.primary_labels().tolist() == [0, 1, 0, 1, 2]

    def test_find_layout(self, tmp_path):
        d = tmp_path / "cifar-10-batches-bin"
        d.mkdir()
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
            (d / name).write_bytes(b"")
        train, test = find_cifar10(tmp_path)
        assert len(train) == 5 and test[0].name == "test_batch.bin"
        with pytest.raises(DataError):
            find_cifar10(tmp_path / "missing")


class TestManifest:
    def _write(self, tmp_path, entries):
        p = tmp_path / "m.json"
        p.write_text(json.dumps(entries))
        return p

    def test_multi_label_and_similarity(self, tmp_path):
        raw = bytes(range(48))
        (tmp_path / "a.rgb").write_bytes(raw)
        p = self._write(tmp_path, [
            {"image": "a.rgb", "labels": [2, 5]},
            {"image": "base64:" + base64.b64encode(raw[::-1]).decode(), "labels": [5, 7]},
        ])
        ds = load_manifest(p)
        assert label_sets(ds.labels) == [{2, 5}, {5, 7}]
        assert ds.images.shape == (2, 3, 4, 4)
        assert similarity(ds.labels[0], ds.labels[1]) == 0
        # interleaved RGB: byte 1 is the green value of pixel (0, 0)
        assert ds.images[0, 1, 0, 0] == pytest.approx(1 / 255)

    def test_empty_labels(self, tmp_path):
        p = self._write(tmp_path, [{"image": "base64:" + base64.b64encode(bytes(12)).decode(), "labels": []}])
        with pytest.raises(DataError, match="empty label"):
            load_manifest(p)

    def test_inconsistent_dimensions(self, tmp_path):
        p = self._write(tmp_path, [
            {"image": "base64:" + base64.b64encode(bytes(12)).decode(), "labels": [0]},
            {"image": "base64:" + base64.b64encode(bytes(27)).decode(), "labels": [1]},
        ])
        with pytest.raises(DataError, match="differs"):
            load_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_manifest(self._write(tmp_path, [{"image": "nope.rgb", "labels": [0]}]))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (3, 3, 2, 5)).astype(np.float32) / 255
        labels = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 1]], bool)
        p = tmp_path / "m.json"
        p.write_text(dump_manifest(LabeledDataset(images, labels)))
        back = load_manifest(p)
        np.testing.assert_array_equal(back.images, images)
        np.testing.assert_array_equal(back.labels, labels)


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(images_per_class=20)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert a.images.tobytes() == b.images.tobytes()
        assert generate_synthetic(SyntheticSpec(images_per_class=20, seed=1)).images.tobytes() != a.images.tobytes()

    def test_default_size_and_balance(self):
        ds = generate_synthetic(SyntheticSpec())
        assert ds.images.shape == (2000, 3, 16, 16)
        assert np.bincount(ds.primary_labels()).tolist() == [500] * 4
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_confusability(self, seed):
        ds = generate_synthetic(SyntheticSpec(images_per_class=250, seed=seed))
        cls = ds.primary_labels()
        group = cls // 2
        d = sq_dists(ds.images)
        off = ~np.eye(len(d), dtype=bool)
        same_group = (group[:, None] == group[None, :]) & (cls[:, None] != cls[None, :])
        other_group = group[:, None] != group[None, :]
        assert d[same_group & off].mean() < d[other_group].mean()
        np.fill_diagonal(d, np.inf)
        nn = d.argmin(axis=1)
        within = np.mean((cls[nn] != cls) & (group[nn] == group))
        across = np.mean(group[nn] != group)
        assert within > across

    def test_patch_too_large(self):
        with pytest.raises(DataError):
            generate_synthetic(SyntheticSpec(image_size=8, patch_size=8, patch_jitter=1))

    def test_group_validation(self):
        with pytest.raises(DataError):
            SyntheticSpec(confusable_groups=[[0]]).validate()
        with pytest.raises(DataError):
            SyntheticSpec(confusable_groups=[[0, 1], [1, 2]]).validate()

    def test_spec_round_trip(self):
        spec = SyntheticSpec(num_classes=6, confusable_groups=[[0, 1, 2]], seed=4)
        assert SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
        with pytest.raises(DataError):
            SyntheticSpec.from_dict({"colour": 1})


class TestSplit:
    def test_stratified(self):
        ds = generate_synthetic(SyntheticSpec(images_per_class=100))
        train, test = split(ds, 0.8, seed=0)
        assert np.bincount(train.primary_labels()).tolist() == [80] * 4
        assert np.bincount(test.primary_labels()).tolist() == [20] * 4
        assert train.split == "train" and test.split == "test"

    def test_disjoint_and_deterministic(self):
        ds = generate_synthetic(SyntheticSpec(images_per_class=10))
        tr1, te1 = split(ds, 0.7, seed=3)
        tr2, te2 = split(ds, 0.7, seed=3)
        assert tr1.images.tobytes() == tr2.images.tobytes() and te1.images.tobytes() == te2.images.tobytes()
        a = {x.tobytes() for x in tr1.images}
        b = {x.tobytes() for x in te1.images}
        assert not a & b and len(a) + len(b) == len(ds)

    def test_small_class(self):
        ds = LabeledDataset(np.zeros((3, 1, 2, 2), np.float32), np.eye(2, dtype=bool)[[0, 0, 1]])
        with pytest.raises(DataError, match="class 1"):
            split(ds, 0.5)

    def test_fraction_range(self):
        ds = generate_synthetic(SyntheticSpec(images_per_class=4))
        for f in (0.0, 1.0):
            with pytest.raises(DataError):
                split(ds, f)


def test_dataset_invariants():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 1, 2, 2)), np.array([[1, 0], [0, 0]], bool))
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 2, 2)), np.eye(2, dtype=bool))
