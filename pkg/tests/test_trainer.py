import itertools

import numpy as np
import pytest

from hardhash.data import SyntheticSpec, generate_synthetic, split
from hardhash.hashing import CodeDatabase
from hardhash.losses import LossConfig, PairBatch, hard_pairwise_loss
from hardhash.network import CbamConfig, LayerSpec, Network, NetworkConfig
from hardhash.optim import SGDConfig
from hardhash.tensor import Tensor, backward
from hardhash.trainer import (
    TrainConfig,
    Trainer,
    encode_dataset,
    loss_log_csv,
    sample_pairs,
    similarity,
    train,
    train_step,
)

from plain_trainer import reference_plain_update


def tiny_network(num_classes=4, bits=8, size=16):
    layers = [LayerSpec("layer1", 4), LayerSpec("layer2", 8, 2), LayerSpec("layer3", 8, 2)]
    return NetworkConfig(layers=layers, cbam_after=["layer2"], cbam=CbamConfig(reduction_ratio=2, spatial_kernel=3, stack_count=1),
                         shortcut_at=["layer3"], hash_bits=bits, num_classes=num_classes, image_size=size)


def tiny_data(per_class=10, seed=0):
    return generate_synthetic(SyntheticSpec(images_per_class=per_class, seed=seed))


class TestSimilarity:
    @pytest.mark.parametrize("a,b,y", [({3}, {3}, 0), ({1, 5}, {5, 9}, 0), ({1}, {2}, 1)])
    def test_examples(self, a, b, y):
        bits = lambda s: np.isin(np.arange(10), list(s))
        assert similarity(bits(a), bits(b)) == y
        assert similarity(bits(b), bits(a)) == y

    def test_symmetric_exhaustive(self):
        sets = [np.array(v, bool) for v in itertools.product([0, 1], repeat=4) if any(v)]
        for a, b in itertools.product(sets, sets):
            assert similarity(a, b) == similarity(b, a)

    def test_empty(self):
        with pytest.raises(ValueError):
            similarity(np.zeros(3, bool), np.ones(3, bool))


class TestSampling:
    def test_forced_pair(self):
        lo, hi, y = sample_pairs([0, 1], np.eye(2, dtype=bool), 1, np.random.default_rng(0))
        assert (lo.tolist(), hi.tolist(), y.tolist()) == ([0], [1], [1])

    def test_deterministic(self):
        labels = np.eye(4, dtype=bool)[np.arange(64) % 4]
        a = sample_pairs(range(64), labels, 128, np.random.default_rng(9))
        b = sample_pairs(range(64), labels, 128, np.random.default_rng(9))
        for x, z in zip(a, b):
            np.testing.assert_array_equal(x, z)

    def test_distinct_and_labelled(self):
        labels = np.eye(4, dtype=bool)[np.arange(64) % 4]
        lo, hi, y = sample_pairs(np.arange(64), labels, 128, np.random.default_rng(1))
        assert len(lo) == 128 and (lo < hi).all()
        np.testing.assert_array_equal(y, (lo % 4 != hi % 4).astype(int))

    def test_uniform_over_unordered_pairs(self):
        lo, hi, _ = sample_pairs(np.arange(4), np.ones((4, 1), bool), 100_000, np.random.default_rng(2))
        counts = np.zeros((4, 4))
        np.add.at(counts, (lo, hi), 1)
        freq = counts[np.triu_indices(4, 1)] / 100_000
        assert len(freq) == 6
        assert np.all(np.abs(freq - 1 / 6) < 0.01)

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_pairs([0], np.ones((1, 1), bool), 1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_pairs([0, 1], np.ones((2, 1), bool), 0, np.random.default_rng(0))


class TestTrainStep:
    def test_identical_pair_zero_loss(self):
        net_cfg = tiny_network(num_classes=2)
        img = np.random.default_rng(0).random((1, 3, 16, 16))
        images = np.repeat(img, 2, axis=0)
        labels = np.array([[1, 0], [1, 0]], bool)
        cfg = TrainConfig(batch_size=2, pairs_per_batch=3, dtype="float64", network=net_cfg,
                          loss=LossConfig(gamma=0.0, lam=0.0, mu=0.0))
        net = Network(net_cfg, dtype=np.float64)
        out = net(Tensor(images))
        pairs = PairBatch(out.binary_like, out.binary_like, [0, 0], [1, 1], [1, 1])
        loss = hard_pairwise_loss(pairs, cfg.loss)
        assert float(loss.data) == 0.0
        backward(loss, net.parameters())
        assert all(not p.grad.any() for p in net.parameters())
        total, _ = train_step(Network(net_cfg, dtype=np.float64), images, labels, cfg)
        assert total == 0.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gamma_zero_matches_plain_pairwise(self, seed):
        ds = tiny_data(4, seed)
        net_cfg = tiny_network()
        cfg = TrainConfig(batch_size=16, seed=seed, dtype="float64", network=net_cfg,
                          loss=LossConfig(gamma=0.0, lam=0.01, mu=1.0), optimizer=SGDConfig(lr=0.05))
        images = ds.images.astype(np.float64)
        trainer = Trainer(cfg)
        before = Network(net_cfg, seed=seed, dtype=np.float64)
        lo, hi, y = sample_pairs(np.arange(16), ds.labels, cfg.n_pairs, np.random.default_rng(seed))
        expect = reference_plain_update(before, images, ds.labels.astype(float), lo, hi, y, 0.01, 1.0, 0.05, 5.0)
        trainer.step(images, ds.labels)
        for k, v in trainer.net.state_dict().items():
            np.testing.assert_allclose(v, expect[k], rtol=0, atol=1e-10)

    def test_non_finite_loss_aborts(self):
        from hardhash.tensor import NumericError
        ds = tiny_data(2)
        cfg = TrainConfig(batch_size=8, network=tiny_network(), dtype="float64")
        trainer = Trainer(cfg)
        trainer.net.params["hash.w"].data[...] = np.inf
        with pytest.raises(NumericError):
            trainer.step(ds.images, ds.labels)


class TestTrain:
    def test_zero_epochs(self):
        cfg = TrainConfig(epochs=0, network=tiny_network(), seed=4)
        net, hist = train(tiny_data(3), cfg)
        fresh = Network(cfg.network, seed=4)
        assert hist == []
        for k, v in fresh.state_dict().items():
            assert net.state_dict()[k].tobytes() == v.tobytes()

    def test_bit_identical_trace_float64(self):
        ds = tiny_data(8)
        cfg = TrainConfig(epochs=2, batch_size=8, network=tiny_network(), dtype="float64", seed=7)
        a = train(ds, cfg)[1]
        b = train(ds, cfg)[1]
        assert [r.total for r in a] == [r.total for r in b]
        assert len(a) == 2

    def test_loss_decreases_first_five_epochs(self):
        # separable variant: every class has its own coarse appearance
        train_ds, _ = split(generate_synthetic(SyntheticSpec(confusable_groups=[])), 0.8, seed=0)
        cfg = TrainConfig(epochs=5, batch_size=64, network=NetworkConfig(hash_bits=12, num_classes=4, image_size=16))
        _, hist = train(train_ds, cfg)
        totals = [r.total for r in hist]
        assert all(b < a for a, b in zip(totals, totals[1:])), totals

    def test_checkpoint_written(self, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=8, network=tiny_network(), checkpoint_dir=str(tmp_path),
                          checkpoint_every_epoch=True)
        net, _ = train(tiny_data(3), cfg)
        assert (tmp_path / "checkpoint.hegh").is_file() and (tmp_path / "epoch001.hegh").is_file()
        back = Network.load(tmp_path / "checkpoint.hegh", cfg.network)
        for k, v in net.state_dict().items():
            assert back.params[k].data.tobytes() == v.tobytes()

    def test_class_count_mismatch(self):
        with pytest.raises(ValueError):
            train(tiny_data(3), TrainConfig(epochs=1, network=tiny_network(num_classes=5)))

    def test_tail_batch_merged(self):
        trainer = Trainer(TrainConfig(batch_size=4, network=tiny_network()))
        sizes = [len(b) for b in trainer._batches(9)]
        assert sizes == [4, 5]

    def test_loss_log(self):
        _, hist = train(tiny_data(3), TrainConfig(epochs=2, batch_size=6, network=tiny_network()))
        lines = loss_log_csv(hist).splitlines()
        assert lines[0] == "epoch,mean_total,mean_hard_pairwise,mean_class,mean_reg"
        assert len(lines) == 3 and lines[2].startswith("2,")

    def test_config_round_trip(self):
        cfg = TrainConfig(epochs=3, loss=LossConfig(gamma=2.0), network=tiny_network())
        assert TrainConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochz": 1})
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)


class TestEncode:
    def test_shape_identity_and_round_trip(self, tmp_path):
        ds = tiny_data(3)
        ds.images[1] = ds.images[0]
        net = Network(tiny_network(), seed=1)
        db = encode_dataset(net, ds, batch_size=5)
        assert len(db) == len(ds) and db.k == 8
        np.testing.assert_array_equal(db.codes[0], db.codes[1])
        np.testing.assert_array_equal(db.labels, ds.labels)
        db.save(tmp_path / "c.heghcode")
        assert CodeDatabase.load(tmp_path / "c.heghcode").to_bytes() == db.to_bytes()
