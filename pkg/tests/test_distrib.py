import numpy as np
import pytest

from echostyle import classify, data, distrib
from echostyle.distrib import (
    WorkerGroup,
    broadcast_params,
    distributed_train,
    make_shards,
    parallel_map,
    ring_allreduce,
    simulate_ring_cost,
    speedup_benchmark,
    format_benchmark_table,
    train_single,
)


class TestShards:
    def test_disjoint_and_covering(self):
        shards = make_shards(13, 4)
        flat = sorted(i for s in shards for i in s)
        assert flat == list(range(13))

    def test_group_validates_shards(self):
        with pytest.raises(ValueError, match="disjoint"):
            WorkerGroup(2, shards=[[0, 1], [1, 2]])
        with pytest.raises(ValueError, match="shards"):
            WorkerGroup(3, shards=[[0], [1]])
        with pytest.raises(ValueError, match="world size"):
            WorkerGroup(0)


class TestBroadcast:
    def test_single_worker_identity(self):
        g = WorkerGroup(1)
        v = np.array([1.0, 2.0])
        out = broadcast_params(g, v)
        np.testing.assert_array_equal(out[0], v)
        assert out[0] is not v  # a copy, not a shared buffer

    def test_all_replicas_bitwise_equal_rank0(self):
        g = WorkerGroup(4)
        rng = np.random.default_rng(0)
        v = rng.normal(size=257)
        out = broadcast_params(g, v)
        assert len(out) == 4
        for rep in out:
            assert rep.tobytes() == v.tobytes()


class TestRingAllreduce:
    @pytest.mark.parametrize("mode", ["thread", "simulate"])
    def test_identical_vectors_unchanged(self, mode):
        v = np.array([3.0, -1.0, 2.0, 8.0, 0.5])
        out = ring_allreduce([v.copy() for _ in range(4)], mode=mode)
        for o in out:
            np.testing.assert_allclose(o, v, atol=1e-15)

    @pytest.mark.parametrize("mode", ["thread", "simulate"])
    def test_two_rank_mean(self, mode):
        out = ring_allreduce([np.array([1.0, 2.0]), np.array([3.0, 4.0])], mode=mode)
        np.testing.assert_array_equal(out[0], [2.0, 3.0])
        np.testing.assert_array_equal(out[1], [2.0, 3.0])

    @pytest.mark.parametrize("w", [2, 4, 8])
    @pytest.mark.parametrize("mode", ["thread", "simulate"])
    def test_matches_sequential_mean_oracle(self, w, mode):
        rng = np.random.default_rng(w)
        vecs = [rng.normal(size=1003) for _ in range(w)]
        expected = np.zeros(1003)
        for v in vecs:
            expected = expected + v
        expected /= w
        out = ring_allreduce(vecs, mode=mode)
        for o in out:
            np.testing.assert_allclose(o, expected, atol=1e-12)

    def test_all_ranks_bitwise_identical(self):
        rng = np.random.default_rng(5)
        vecs = [rng.normal(size=101) for _ in range(5)]
        out = ring_allreduce(vecs, mode="thread")
        blobs = {o.tobytes() for o in out}
        assert len(blobs) == 1

    def test_thread_and_simulate_agree_bitwise(self):
        rng = np.random.default_rng(6)
        vecs = [rng.normal(size=64) for _ in range(4)]
        a = ring_allreduce([v.copy() for v in vecs], mode="thread")
        b = ring_allreduce([v.copy() for v in vecs], mode="simulate")
        assert a[0].tobytes() == b[0].tobytes()

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        vecs = [rng.normal(size=50) for _ in range(4)]
        a = ring_allreduce(vecs, mode="simulate")[0]
        b = ring_allreduce(vecs[::-1], mode="simulate")[0]
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_uneven_length_padding_stripped(self):
        vecs = [np.arange(7.0) + r for r in range(3)]
        out = ring_allreduce(vecs, mode="thread")
        np.testing.assert_allclose(out[0], np.arange(7.0) + 1.0, atol=1e-15)
        assert out[0].shape == (7,)

    def test_single_rank(self):
        v = np.array([5.0, 6.0])
        out = ring_allreduce([v])
        np.testing.assert_array_equal(out[0], v)

    def test_length_mismatch_aborts(self):
        with pytest.raises(ValueError, match="mismatch"):
            ring_allreduce([np.zeros(4), np.zeros(5)])

    def test_inputs_left_unmodified(self):
        vecs = [np.full(9, float(r)) for r in range(3)]
        before = [v.copy() for v in vecs]
        ring_allreduce(vecs, mode="thread")
        for v, b in zip(vecs, before):
            np.testing.assert_array_equal(v, b)


class TestCostModel:
    def test_phase_count(self):
        for w in (2, 4, 8):
            cost = simulate_ring_cost(1000, w)
            assert cost.phases == 2 * (w - 1)

    def test_chunk_arithmetic(self):
        cost = simulate_ring_cost(10, 4)
        assert cost.chunk_elements == 3  # ceil(10/4)
        assert cost.per_rank_elements_sent == 6 * 3
        assert cost.total_elements_sent == 4 * 6 * 3

    def test_single_worker_no_traffic(self):
        assert simulate_ring_cost(100, 1).total_elements_sent == 0


class TestParallelMap:
    def test_preserves_order(self):
        out = parallel_map(lambda x: x * x, range(20), workers=4)
        assert out == [x * x for x in range(20)]

    def test_propagates_exceptions(self):
        def boom(x):
            if x == 3:
                raise RuntimeError("boom")
            return x
        with pytest.raises(RuntimeError, match="boom"):
            parallel_map(boom, range(6), workers=3)


@pytest.fixture(scope="module")
def task():
    items = data.synthetic_items(6, 16, seed=2)
    cfg = classify.TrainConfig(epochs=1, patience=1, lr=0.01, batch_size=2,
                               batchnorm=False)
    return classify.ClassifierTask(items, cfg, backbone_seed=3, seed=0)


class TestDistributedTrain:
    def test_w1_matches_single_process_bitwise(self, task):
        group = WorkerGroup(1, shards=make_shards(12, 1))
        dist = distributed_train(group, task, steps=4)
        single_params, single_losses = train_single(task, group.shards[0], steps=4)
        assert dist.params.tobytes() == single_params.tobytes()
        assert dist.losses == single_losses

    def test_union_batch_oracle_w4(self, task):
        group = WorkerGroup(4, shards=make_shards(12, 4))
        params = task.init_params()
        outs = [task.grad(params, distrib._batch_indices(group.shards[r], 0,
                                                         task.batch_size), 0)
                for r in range(4)]
        averaged = ring_allreduce([g for _, g in outs])[0]
        union = []
        for r in range(4):
            union += distrib._batch_indices(group.shards[r], 0, task.batch_size)
        _, union_grad = task.grad(params, union, 0)
        denom = np.maximum(np.abs(union_grad), 1e-12)
        assert np.max(np.abs(averaged - union_grad) / denom) < 1e-6

    def test_replicas_identical_after_ten_steps(self, task):
        group = WorkerGroup(4, shards=make_shards(12, 4))
        result = distributed_train(group, task, steps=10)
        assert result.replicas_identical

    def test_requires_shards(self, task):
        with pytest.raises(ValueError, match="shard"):
            distributed_train(WorkerGroup(2), task, steps=1)


class TestBenchmark:
    def _quick_workload(self):
        def make_tasks():
            def one():
                a = np.arange(4000.0)
                for _ in range(40):
                    a = np.sqrt(a * a + 1.0)
                return float(a.sum())
            return [one] * 6
        return make_tasks

    def test_w1_speedup_is_exactly_one(self):
        rep = speedup_benchmark(self._quick_workload(), [1], mode="thread")
        assert rep.rows[0][0] == 1 and rep.rows[0][2] == 1.0

    def test_rows_and_flags(self):
        rep = speedup_benchmark(self._quick_workload(), [1, 2, 64], mode="thread")
        assert [r[0] for r in rep.rows] == [1, 2, 64]
        assert 64 in rep.under_provisioned
        for _, seconds, speedup in rep.rows:
            assert seconds > 0 and speedup > 0

    def test_table_contains_reference_rows(self):
        rep = speedup_benchmark(self._quick_workload(), [1], mode="thread")
        table = format_benchmark_table(rep)
        assert "T_p" in table and "T_s" in table
        assert "5.09" in table  # cluster reference row
        assert "hardware threads" in table

    def test_bad_counts_rejected(self):
        with pytest.raises(ValueError):
            speedup_benchmark(self._quick_workload(), [])
        with pytest.raises(ValueError):
            speedup_benchmark(self._quick_workload(), [0, 2])
