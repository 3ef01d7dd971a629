import json

import numpy as np
import pytest

from vlmoe.parallel import ExchangeTrace, WorkerTopology, imbalance_metrics, simulate_layer, trace_from_assignments
from vlmoe.routing import assign_bpr, assign_vanilla, compute_capacity, dispatch_combine
from vlmoe.tensor import Tensor, softmax


def random_case(rng, num_experts=4):
    n, d = int(rng.integers(1, 30)), 5
    k = int(rng.integers(1, 3))
    x = Tensor(rng.standard_normal((n, d)))
    experts = [(Tensor(rng.standard_normal((d, 8)) * 0.4), Tensor(rng.standard_normal((8, d)) * 0.4)) for _ in range(num_experts)]
    gates = softmax(Tensor(rng.standard_normal((n, num_experts)) * 2))
    capacity = compute_capacity(n, num_experts, k, float(rng.uniform(0.5, 2.0)))
    assign = assign_bpr if rng.random() < 0.5 else assign_vanilla
    return x, assign(gates, k, capacity), experts


class TestTopology:
    def test_shard_map(self):
        topo = WorkerTopology(2, 4, expert_capacity=3)
        assert topo.shard_map.tolist() == [0, 0, 1, 1]
        assert topo.worker_capacity == 6

    def test_must_divide(self):
        with pytest.raises(ValueError):
            WorkerTopology(3, 4)


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_matches_reference(workers):
    rng = np.random.default_rng(workers)
    for _ in range(100):
        x, plan, experts = random_case(rng)
        out, trace = simulate_layer(x, plan, WorkerTopology(workers, 4, plan.capacity), experts)
        np.testing.assert_allclose(out, dispatch_combine(x, plan, experts).data, rtol=0, atol=1e-10)
        kept = int(plan.kept.sum())
        assert trace.dispatch.sum() == trace.compute.sum() == trace.returned.sum() == kept
        np.testing.assert_array_equal(trace.dispatch.sum(axis=0), trace.compute)
        np.testing.assert_array_equal(trace.returned, trace.dispatch.T)
        np.testing.assert_array_equal(trace.expert_load, plan.kept_counts())


def test_single_worker_has_no_transfers(rng):
    x, plan, experts = random_case(rng)
    _, trace = simulate_layer(x, plan, WorkerTopology(1, 4, plan.capacity), experts)
    assert imbalance_metrics(trace)["max_transfer"] == 0.0


def test_one_expert_per_worker_balanced():
    n, num_experts = 8, 4
    gates = Tensor(np.eye(num_experts)[np.arange(n) % num_experts] * 0.7 + 0.075)
    plan = assign_vanilla(gates, 1, compute_capacity(n, num_experts, 1, 1.0))
    trace = trace_from_assignments(plan.expert_ids, plan.kept, WorkerTopology(4, 4, plan.capacity))
    assert trace.compute.tolist() == [2, 2, 2, 2]
    assert imbalance_metrics(trace)["load_ratio"] == 1.0


def test_concentrated_load_ratio_equals_workers():
    n = 12
    gates = Tensor(np.tile([0.7, 0.1, 0.1, 0.1], (n, 1)))
    plan = assign_vanilla(gates, 1, n)
    trace = trace_from_assignments(plan.expert_ids, plan.kept, WorkerTopology(4, 4, n))
    assert imbalance_metrics(trace)["load_ratio"] == 4.0


def test_bpr_never_increases_max_load():
    rng = np.random.default_rng(8)
    for _ in range(200):
        n = int(rng.integers(4, 40))
        gates = Tensor(rng.dirichlet([5.0, 0.5, 0.5, 0.5], size=n))
        cap = compute_capacity(n, 4, 1, 1.05)
        topo = WorkerTopology(4, 4, cap)
        loads = [
            trace_from_assignments(p.expert_ids, p.kept, topo).compute.max()
            for p in (assign_vanilla(gates, 1, cap), assign_bpr(gates, 1, cap))
        ]
        assert loads[1] <= loads[0]


def test_metrics():
    trace = ExchangeTrace(
        dispatch=np.array([[3, 2], [1, 4]]),
        returned=np.array([[3, 1], [2, 4]]),
        compute=np.array([4, 6]),
        expert_load=np.array([4, 6]),
        worker_capacity=8,
    )
    m = imbalance_metrics(trace, alpha=0.5)
    assert m["load_ratio"] == pytest.approx(1.2)
    # each worker sends 2 + 1 and receives 1 + 2 cross-worker items over both phases
    assert m["max_transfer"] == 6.0
    assert m["step_time"] == pytest.approx(6 + 0.5 * 6)


def test_threaded_mode_is_identical(rng):
    x, plan, experts = random_case(rng)
    topo = WorkerTopology(4, 4, plan.capacity)
    a, ta = simulate_layer(x, plan, topo, experts, threads=1)
    b, tb = simulate_layer(x, plan, topo, experts, threads=4)
    np.testing.assert_array_equal(a, b)
    assert ta.to_json() == tb.to_json()


def test_trace_json_round_trip(rng):
    x, plan, experts = random_case(rng)
    _, trace = simulate_layer(x, plan, WorkerTopology(2, 4, plan.capacity), experts)
    again = ExchangeTrace.from_dict(json.loads(trace.to_json()))
    assert again.to_json() == trace.to_json()


def test_topology_mismatch(rng):
    x, plan, experts = random_case(rng)
    with pytest.raises(ValueError):
        simulate_layer(x, plan, WorkerTopology(2, 8), experts)
