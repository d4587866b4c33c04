import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bnnkit import collective as C
from bnnkit import distributed as D
from bnnkit import elbo as E
from bnnkit import layers as L
from bnnkit.modelio import Dataset
from bnnkit.tensor import SeededRng

from helpers import blobs, tiny_mlp

FAST = C.CommConfig(cycle_ms=1)


def indexed(n):
    return Dataset(np.arange(n, dtype=np.float32)[:, None], np.zeros(n, np.int64))


def test_single_worker_shard_is_everything():
    d = indexed(37)
    assert sorted(D.shard(d, 0, 1, seed=3).images[:, 0].tolist()) == list(range(37))


@given(st.integers(1, 8), st.integers(8, 120), st.integers(0, 99))
def test_shards_partition_the_dataset(W, n, seed):
    d = indexed(n)
    parts = [D.shard(d, r, W, seed).images[:, 0].astype(int).tolist() for r in range(W)]
    flat = sorted(sum(parts, []))
    assert flat == list(range(n))
    assert max(map(len, parts)) - min(map(len, parts)) <= 1
    assert parts == [D.shard(d, r, W, seed).images[:, 0].astype(int).tolist() for r in range(W)]


def test_four_way_shards_of_hundred():
    parts = [set(D.shard(indexed(100), r, 4).images[:, 0]) for r in range(4)]
    assert all(len(p) == 25 for p in parts)
    assert all(not (a & b) for i, a in enumerate(parts) for b in parts[i + 1:])
    with pytest.raises(D.ConfigError):
        D.shard(indexed(3), 0, 4)


def test_scale_lr():
    assert D.scale_lr(1e-4, 16) == pytest.approx(1.6e-3)
    assert D.scale_lr(0.3, 1) == 0.3
    assert D.scale_lr(0.3, 6) == 2 * D.scale_lr(0.3, 3)


def test_efficiency_and_throughput():
    assert D.efficiency(100, 25, 4) == 1.0
    assert D.efficiency(100, 50, 4) == 0.5
    for bad in [(0, 1, 1), (1, -1, 1), (1, 1, 0)]:
        with pytest.raises(L.ParameterError):
            D.efficiency(*bad)
    mean, std = D.throughput(100, [1.0, 0.5])
    assert mean == pytest.approx(200 / 1.5) and std == pytest.approx(50.0)
    with pytest.raises(L.ParameterError):
        D.throughput(10, [])


def cfg(**kw):
    base = dict(workers=2, epochs=1, batch_per_worker=25, lr=1e-2, optimizer="adam", seed=3, comm=FAST,
                recv_timeout=60)
    base.update(kw)
    return D.DistConfig(**base)


def test_shared_noise_matches_single_worker_bigger_batch():
    data = blobs(400, dtype=np.float64)
    one = D.dist_train(tiny_mlp(), data, cfg(workers=1, batch_per_worker=100, scale_lr=False, shared_noise=True,
                                             max_steps=10))
    four = D.dist_train(tiny_mlp(), data, cfg(workers=4, batch_per_worker=25, scale_lr=False, shared_noise=True,
                                              max_steps=10))
    a, b = np.array(one.step_losses), np.array(four.step_losses)
    assert len(a) == len(b) == 4     # 400 / 100 steps in one epoch
    np.testing.assert_allclose(b, a, rtol=1e-5)
    for k in one.graph.params:
        np.testing.assert_allclose(four.graph.params[k], one.graph.params[k], rtol=1e-5, atol=1e-8)


def test_zero_noise_two_workers_match_doubled_batch():
    data = blobs(400, dtype=np.float64)
    kw = dict(sample=False, scale_lr=False, epochs=3)
    one = D.dist_train(tiny_mlp(), data, cfg(workers=1, batch_per_worker=40, **kw))
    two = D.dist_train(tiny_mlp(), data, cfg(workers=2, batch_per_worker=20, **kw))
    assert len(one.step_losses) >= 10
    np.testing.assert_allclose(two.step_losses[:10], one.step_losses[:10], rtol=1e-5)


def test_replicas_are_bitwise_identical():
    res = D.dist_train(tiny_mlp(dtype=np.float32), blobs(400), cfg(workers=4, epochs=2))
    assert len(set(res.digests)) == 1
    assert res.digests[0] == D.param_digest(res.graph.params)


def test_bnn_reduces_more_tensors_than_frozen_graph():
    data = blobs(200)
    bnn = D.dist_train(tiny_mlp(dtype=np.float32), data, cfg(max_steps=2))
    det = D.dist_train(tiny_mlp(dtype=np.float32), data, cfg(max_steps=2, sample=False, train_scale=False))
    layers = len(tiny_mlp().variational_layers())
    assert bnn.reductions_per_step == 3 * layers
    assert det.reductions_per_step == 2 * layers
    assert bnn.comm_tables[0]["allreduce"]["count"] > det.comm_tables[0]["allreduce"]["count"]


def test_lr_scaling_changes_the_trajectory():
    data = blobs(200)
    a = D.dist_train(tiny_mlp(dtype=np.float32), data, cfg(max_steps=2))
    b = D.dist_train(tiny_mlp(dtype=np.float32), data, cfg(max_steps=2, scale_lr=False))
    assert a.step_losses[0] == b.step_losses[0] and a.step_losses[1] != b.step_losses[1]


def test_throughput_accounts_for_all_samples():
    data = blobs(4000)
    res = D.dist_train(L.init_params(L.mlp([6, 256, 256, 3]), SeededRng(0)), data,
                       cfg(workers=2, batch_per_worker=100, epochs=2))
    m = res.metrics
    assert m.samples == 4000 * 2
    assert m.samples_per_second * m.T_N == pytest.approx(m.samples, rel=0.02)
    assert 0 <= m.comm_fraction <= 1


def test_epoch_csv_and_harness(tmp_path):
    data = blobs(240)
    rows = D.scaling_harness(tiny_mlp(dtype=np.float32), data, workers=(1, 2, 4), csv_path=tmp_path / "s.csv",
                             batch_per_worker=20, epochs=1, comm=FAST, recv_timeout=60)
    with open(tmp_path / "s.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [int(r["workers"]) for r in table] == [1, 2, 4]
    assert float(table[0]["efficiency"]) == 1.0
    assert all(float(r["efficiency"]) > 0 for r in table)
    assert rows[2]["iterations"] == 240 // (20 * 4)
    res = D.dist_train(tiny_mlp(dtype=np.float32), data, cfg(epochs=2))
    D.write_epoch_csv(tmp_path / "e.csv", res, 0.8)
    with open(tmp_path / "e.csv") as fh:
        ep = list(csv.DictReader(fh))
    assert list(ep[0]) == list(D.EPOCH_FIELDS) and len(ep) == 4
    assert [r["efficiency"] for r in ep] == ["0.8", "", "0.8", ""]


def test_tcp_transport_training():
    data = blobs(200, dtype=np.float64)
    kw = dict(workers=2, shared_noise=True, scale_lr=False, max_steps=3)
    tcp = D.dist_train(tiny_mlp(), data, cfg(transport="tcp", **kw))
    chan = D.dist_train(tiny_mlp(), data, cfg(**kw))
    assert len(set(tcp.digests)) == 1
    np.testing.assert_allclose(tcp.step_losses, chan.step_losses, rtol=1e-12)


def test_unknown_transport():
    with pytest.raises(D.ConfigError):
        D.dist_train(tiny_mlp(), blobs(50), cfg(transport="carrier-pigeon"))
