"""Acceptance checks 1-10.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (shown even
under output capture) and then asserts. The training criteria are marked
slow; ``pytest -m "not slow"`` skips them.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from hardhash import checkpoint
from hardhash.cli import main
from hardhash.data import SyntheticSpec, generate_synthetic, load_dataset_section, split
from hardhash.gradcheck import small_network_config
from hardhash.hashing import CodeDatabase, HashCode, build_index, pack_bits, radius_query, topk_query
from hardhash.losses import LossConfig, PairBatch, hard_degree, hard_pairwise_loss
from hardhash.metrics import EvalConfig, average_precision, evaluate, mean_average_precision
from hardhash.network import Network, NetworkConfig, ablation_variants, all_attention_maps
from hardhash.optim import SGDConfig
from hardhash.trainer import TrainConfig, Trainer, encode_dataset, sample_pairs, train, train_step

from plain_trainer import reference_plain_update
from reference import bit_distance, brute_evaluate, brute_rank

TOL = 1e-12


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"criterion {n}: {detail}"
    return say


# ---------------------------------------------------------------- 1 gradients

def test_1_gradient_correctness(verdict):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "hardhash.cli", "-q", "gradcheck", "--scope", "all",
                           "--points", "20", "--epsilon", "1e-5"], capture_output=True, text=True, env=env)
    elapsed = time.perf_counter() - t0
    errors = json.loads(proc.stdout)["max_relative_error"]
    worst = max(errors.values())
    ok = proc.returncode == 0 and worst < 1e-4 and elapsed < 120 and len(errors) >= 30
    verdict(1, ok, f"{len(errors)} cases, worst relative error {worst:.2e}, {elapsed:.1f}s on one thread")


# ------------------------------------------------------------ 2 gamma = 0

def plain_pair_loss(b1, b2, y, margin):
    total = 0.0
    for u, v, t in zip(b1, b2, y):
        d2 = float(np.sum((u - v) ** 2))
        total += 0.5 * (1 - t) * d2 + 0.5 * t * max(margin - d2, 0.0)
    return total


def test_2_gamma_zero_reduction(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        n, k = int(rng.integers(1, 40)), int(rng.choice([6, 12, 24, 48]))
        b1, b2 = rng.standard_normal((n, k)), rng.standard_normal((n, k))
        y = rng.integers(0, 2, n)
        pairs = PairBatch(b1, b2, y, rng.random(n), rng.random(n))
        got = float(hard_pairwise_loss(pairs, LossConfig(gamma=0.0)).data)
        worst = max(worst, abs(got - plain_pair_loss(b1, b2, y, 2.0 * k)))

    ds = generate_synthetic(SyntheticSpec(images_per_class=4, seed=5))
    net_cfg = small_network_config()
    net_cfg.num_classes = 4
    cfg = TrainConfig(batch_size=16, seed=5, dtype="float64", network=net_cfg,
                      loss=LossConfig(gamma=0.0, lam=0.01, mu=1.0), optimizer=SGDConfig(lr=0.05))
    images = ds.images.astype(np.float64)
    before = Network(net_cfg, seed=5, dtype=np.float64)
    lo, hi, y = sample_pairs(np.arange(16), ds.labels, cfg.n_pairs, np.random.default_rng(5))
    expect = reference_plain_update(before, images, ds.labels.astype(float), lo, hi, y, 0.01, 1.0, 0.05, 5.0)
    trainer = Trainer(cfg)
    trainer.step(images, ds.labels)
    update = max(float(np.abs(v - expect[k]).max()) for k, v in trainer.net.state_dict().items())
    verdict(2, worst <= TOL and update <= 1e-10,
            f"loss gap {worst:.1e} over 1000 batches, parameter gap {update:.1e} after one step")


# --------------------------------------------------------------- 3 metrics

def test_3_metric_oracle(verdict):
    examples_ok = abs(average_precision([1, 0, 1], 2) - 5 / 6) <= TOL
    rng = np.random.default_rng(3)
    topk = [1, 2, 5, 10, 50]
    worst, compared = 0.0, 0
    while compared < 200:
        n, q, k, nc = (int(rng.integers(1, 51)), int(rng.integers(1, 21)),
                       int(rng.integers(1, 17)), int(rng.integers(1, 6)))
        def lab(m):
            a = rng.random((m, nc)) < 0.3
            a[np.arange(m), rng.integers(0, nc, m)] = True
            return a
        db_bits, q_bits, db_lab, q_lab = rng.random((n, k)) < 0.5, rng.random((q, k)) < 0.5, lab(n), lab(q)
        radius = min(2, k)
        sets = lambda a: [set(np.flatnonzero(r).tolist()) for r in a]
        ref = brute_evaluate(q_bits.tolist(), sets(q_lab), db_bits.tolist(), sets(db_lab), topk, radius)
        if ref["map"] is None:
            continue
        rep = evaluate(CodeDatabase(pack_bits(q_bits), q_lab, k), CodeDatabase(pack_bits(db_bits), db_lab, k),
                       EvalConfig(topk=topk, radius=radius))
        gaps = [abs(rep.map - ref["map"]), abs(rep.p_at_h - ref["p@h"])]
        gaps += [abs(v - w) for (_, v), w in zip(rep.precision_at_k, ref["p@k"])]
        worst = max(worst, *gaps)
        compared += 1
    verdict(3, examples_ok and worst <= TOL, f"AP([1,0,1], N=2) = 5/6, worst gap {worst:.1e} on 200 instances")


# ----------------------------------------------------------------- 4 hamming

def test_4_hamming_core(verdict):
    rng = np.random.default_rng(4)
    mismatches = 0
    for k in (1, 12, 24, 36, 48, 64, 65):
        a, b = rng.random((100_000, k)) < 0.5, rng.random((100_000, k)) < 0.5
        packed = np.bitwise_count(pack_bits(a) ^ pack_bits(b)).sum(axis=1)
        loop = np.zeros(len(a), dtype=np.int64)
        for j in range(k):
            loop += a[:, j] != b[:, j]
        mismatches += int((packed != loop).sum())
        for i in rng.integers(0, len(a), 50):
            if int(np.bitwise_count(HashCode.from_bits(a[i]).words ^ HashCode.from_bits(b[i]).words).sum()) \
                    != bit_distance(a[i], b[i]):
                mismatches += 1
    bad_queries = 0
    for _ in range(200):
        n, k = int(rng.integers(1, 60)), int(rng.integers(1, 70))
        bits = rng.random((n, k)) < 0.5
        if n > 2:
            bits[1] = bits[0]  # force exact ties
        db = CodeDatabase(pack_bits(bits), np.ones((n, 1), bool), k)
        index = build_index(db)
        for _ in range(3):
            qb = rng.random(k) < 0.5
            full = brute_rank(qb.tolist(), bits.tolist(), list(range(n)))
            t, r = int(rng.integers(1, n + 3)), int(rng.integers(0, k + 1))
            q = HashCode.from_bits(qb)
            bad_queries += topk_query(index, q, t) != full[:t]
            bad_queries += radius_query(index, q, r) != [x for x in full if x[1] <= r]
    verdict(4, mismatches == 0 and bad_queries == 0,
            f"{mismatches} distance mismatches over 7x1e5 pairs, {bad_queries} index mismatches on 200 databases")


# -------------------------------------------------------------- 5 contracts

def test_5_hard_degree_and_attention(verdict):
    p = np.linspace(0.0, 1.0, 1000)
    mono = bool((np.diff(hard_degree(p, np.zeros(1000))) < 0).all()
                and (np.diff(hard_degree(p, np.ones(1000))) > 0).all())
    rng = np.random.default_rng(5)
    cfg = small_network_config()
    net = Network(cfg, dtype=np.float64)
    outside, maps_seen = 0, 0
    for state in range(1000):
        fresh = Network(cfg, seed=state, dtype=np.float64).state_dict()
        net.load_state_dict({k: v + rng.normal(0, rng.uniform(0.05, 1.0), v.shape) for k, v in fresh.items()})
        images = rng.random((2, 3, 16, 16)) * rng.uniform(0.1, 3.0)
        for m in all_attention_maps(net, images):
            outside += int(((m <= 0) | (m >= 1)).sum())
            maps_seen += 1
    verdict(5, mono and outside == 0,
            f"monotone on 1000-point grid: {mono}; {outside} attention values outside (0,1) "
            f"across {maps_seen} maps from 1000 network states")


# ------------------------------------------------------------ 6, 7 training

_RUNS: dict = {}


def synthetic_map(gamma: float, seed: int) -> tuple[float, float]:
    """Default training config on the default synthetic dataset; (test MAP, seconds)."""
    if (gamma, seed) not in _RUNS:
        t0 = time.perf_counter()
        train_ds, test_ds = split(generate_synthetic(SyntheticSpec()), 0.8, seed=0)
        cfg = TrainConfig(seed=seed, loss=LossConfig(gamma=gamma),
                          network=NetworkConfig(hash_bits=12, num_classes=4, image_size=16))
        net, _ = train(train_ds, cfg)
        score = mean_average_precision(encode_dataset(net, test_ds), encode_dataset(net, train_ds))
        _RUNS[gamma, seed] = (score, time.perf_counter() - t0)
    return _RUNS[gamma, seed]


@pytest.mark.slow
def test_6_synthetic_end_to_end(verdict):
    score, seconds = synthetic_map(1.0, 0)
    verdict(6, score >= 0.95 and seconds < 600, f"test MAP {score:.4f} after 30 epochs, {seconds:.0f}s")


@pytest.mark.slow
def test_7_gamma_direction(verdict):
    with_focus = [synthetic_map(1.0, s)[0] for s in (0, 1, 2)]
    plain = [synthetic_map(0.0, s)[0] for s in (0, 1, 2)]
    verdict(7, np.mean(with_focus) >= np.mean(plain),
            f"mean MAP gamma=1 {np.mean(with_focus):.4f} {with_focus} vs gamma=0 {np.mean(plain):.4f} {plain}")


# ------------------------------------------------------------------ 8 cifar

@pytest.mark.slow
def test_8_cifar_smoke(verdict):
    root = os.environ.get("HEGH_CIFAR_DIR")
    if not root or not os.path.isdir(root):
        verdict(8, False, "CIFAR-10 binary batches not found; set HEGH_CIFAR_DIR to the extracted "
                          "cifar-10-batches-bin directory")
    t0 = time.perf_counter()
    train_ds, test_ds = load_dataset_section(
        {"type": "cifar10", "root": root, "train_per_class": 500, "test_per_class": 100})
    cfg = TrainConfig(epochs=40, network=NetworkConfig(hash_bits=12, num_classes=10, image_size=32))
    net, _ = train(train_ds, cfg)
    score = mean_average_precision(encode_dataset(net, test_ds), encode_dataset(net, train_ds))
    seconds = time.perf_counter() - t0
    verdict(8, score >= 0.35 and seconds < 45 * 60, f"test MAP {score:.4f} on 5000 images, {seconds:.0f}s")


# --------------------------------------------------------------- 9 ablation

def test_9_ablation_variants(verdict):
    rng = np.random.default_rng(9)
    problems = []
    variants = ablation_variants()
    images = rng.random((4, 3, 32, 32)).astype(np.float32)
    labels = np.eye(10, dtype=bool)[[0, 1, 0, 3]]
    for name, cfg in variants.items():
        try:
            net = Network(cfg, seed=1)
            before = net.state_dict()
            loss, net = train_step(net, images, labels, TrainConfig(batch_size=4, network=cfg, seed=1))
            moved = any(not np.array_equal(before[k], v) for k, v in net.state_dict().items())
            again = NetworkConfig.from_json(cfg.to_json())
            if not (np.isfinite(loss) and moved and again == cfg and again.to_json() == cfg.to_json()):
                problems.append(name)
        except Exception as exc:  # report every failing variant, not just the first
            problems.append(f"{name} ({exc})")
    verdict(9, len(variants) == 13 and not problems,
            f"{len(variants)} variants constructed, stepped and round-tripped; failures: {problems or 'none'}")


# ---------------------------------------------------------- 10 serialization

def test_10_serialization(verdict, tmp_path, monkeypatch):
    rng = np.random.default_rng(10)
    arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": rng.standard_normal(5).astype(np.float32),
              "c": np.array([np.nan, -0.0, np.inf, 1e-45], np.float32)}
    ck_ok = all(checkpoint.loads(checkpoint.dumps(arrays))[k].tobytes() == v.tobytes() for k, v in arrays.items())
    net = Network(small_network_config(), seed=3)
    net.save(tmp_path / "n.hegh")
    back = Network.load(tmp_path / "n.hegh", small_network_config())
    ck_ok &= all(back.params[k].data.tobytes() == v.tobytes() for k, v in net.state_dict().items())
    ck_ok &= (tmp_path / "n.hegh").read_bytes() == checkpoint.dumps(back.state_dict())

    db_ok = True
    for k in (1, 12, 48, 64, 65, 130):
        n = int(rng.integers(0, 40))
        db = CodeDatabase(pack_bits(rng.random((n, k)) < 0.5), rng.random((n, 3)) < 0.5, k)
        blob = db.to_bytes()
        db_ok &= CodeDatabase.from_bytes(blob).to_bytes() == blob

    bits = rng.random((300, 12)) < 0.5
    labels = np.eye(4, dtype=bool)[rng.integers(0, 4, 300)]
    CodeDatabase(pack_bits(bits[:200]), labels[:200], 12).save(tmp_path / "db.heghcode")
    CodeDatabase(pack_bits(bits[200:]), labels[200:], 12).save(tmp_path / "q.heghcode")
    outputs = []
    for threads in ("1", "4", "1"):
        monkeypatch.setenv("HEGH_THREADS", threads)
        out = tmp_path / f"report{len(outputs)}.json"
        main(["-q", "evaluate", "--codes", str(tmp_path / "db.heghcode"), "--queries", str(tmp_path / "q.heghcode"),
              "--out", str(out)])
        outputs.append(out.read_bytes())
    stable = len(set(outputs)) == 1
    verdict(10, ck_ok and db_ok and stable,
            f"checkpoint bit-exact: {ck_ok}; code database bit-exact: {db_ok}; evaluate byte-stable: {stable}")
