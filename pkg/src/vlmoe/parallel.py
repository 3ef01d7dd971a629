"""Functional simulation of expert parallelism.

Tokens are sharded contiguously across ``W`` logical workers, experts are
sharded contiguously too. One MoE layer becomes: dispatch (all-to-all of kept
assignments to the expert's owner), local expert compute, return (the mirror
all-to-all), and a combine at the token's home worker. Numerics match
:func:`vlmoe.routing.dispatch_combine`; the trace records who sent what to whom.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .routing import RoutingPlan

DEFAULT_ALPHA = 0.1


@dataclass(frozen=True)
class WorkerTopology:
    workers: int
    experts: int
    expert_capacity: int = 0

    def __post_init__(self):
        if self.workers < 1 or self.experts < 1:
            raise ValueError("need at least one worker and one expert")
        if self.experts % self.workers:
            raise ValueError(f"{self.workers} workers do not evenly divide {self.experts} experts")

    @property
    def experts_per_worker(self) -> int:
        return self.experts // self.workers

    @property
    def shard_map(self) -> np.ndarray:
        return np.arange(self.experts) // self.experts_per_worker

    @property
    def worker_capacity(self) -> int:
        return self.expert_capacity * self.experts_per_worker

    def home_worker(self, n_tokens: int) -> np.ndarray:
        return (np.arange(n_tokens) * self.workers) // max(n_tokens, 1)


@dataclass
class ExchangeTrace:
    dispatch: np.ndarray  # [W, W] tokens sent src -> dst
    returned: np.ndarray  # [W, W] results sent back dst -> src
    compute: np.ndarray  # [W] tokens processed per worker
    expert_load: np.ndarray  # [E] tokens processed per expert
    worker_capacity: int

    def to_dict(self) -> dict:
        return {
            "dispatch": self.dispatch.tolist(),
            "returned": self.returned.tolist(),
            "compute": self.compute.tolist(),
            "expert_load": self.expert_load.tolist(),
            "worker_capacity": int(self.worker_capacity),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExchangeTrace":
        return cls(
            np.asarray(d["dispatch"], dtype=np.int64),
            np.asarray(d["returned"], dtype=np.int64),
            np.asarray(d["compute"], dtype=np.int64),
            np.asarray(d["expert_load"], dtype=np.int64),
            int(d["worker_capacity"]),
        )


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _ffn(x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    h = x @ w1
    return (h * ndtr(h)) @ w2


def trace_from_assignments(expert_ids: np.ndarray, kept: np.ndarray, topology: WorkerTopology) -> ExchangeTrace:
    """Communication/compute counts implied by ``[n, k]`` assignments (no numerics)."""
    expert_ids = np.asarray(expert_ids).reshape(len(expert_ids), -1)
    kept = np.asarray(kept, dtype=bool).reshape(expert_ids.shape)
    n = expert_ids.shape[0]
    w = topology.workers
    home = np.repeat(topology.home_worker(n)[:, None], expert_ids.shape[1], axis=1)[kept]
    dest = topology.shard_map[expert_ids[kept]]
    dispatch = np.zeros((w, w), dtype=np.int64)
    np.add.at(dispatch, (home, dest), 1)
    expert_load = np.bincount(expert_ids[kept], minlength=topology.experts).astype(np.int64)
    compute = expert_load.reshape(w, topology.experts_per_worker).sum(axis=1)
    return ExchangeTrace(dispatch, dispatch.T.copy(), compute, expert_load, topology.worker_capacity)


def simulate_layer(tokens, plan: RoutingPlan, topology: WorkerTopology, experts, threads: int | None = None):
    """Run one MoE layer through the modeled all-to-all; returns ``(output, trace)``.

    ``threads`` > 1 computes workers on a thread pool; results are gathered in
    worker-id order so the trace and output do not depend on scheduling.
    """
    x = _as_array(tokens)
    n = x.shape[0]
    if plan.num_tokens != n:
        raise ValueError(f"plan covers {plan.num_tokens} tokens but {n} were given")
    if topology.experts != plan.num_experts or len(experts) != plan.num_experts:
        raise ValueError(
            f"topology has {topology.experts} experts, plan {plan.num_experts}, weights {len(experts)}"
        )
    weights = [(_as_array(w1), _as_array(w2)) for w1, w2 in experts]
    gates = _as_array(plan.gates)
    home = topology.home_worker(n)
    shard = topology.shard_map
    w = topology.workers

    # dispatch: each home worker posts its kept assignments, in (token, rank) order
    inbox: list[list[tuple[int, int, int, int]]] = [[] for _ in range(w)]  # (expert, slot, token, src)
    for src in range(w):
        for t in np.flatnonzero(home == src):
            for r in range(plan.k):
                if plan.kept[t, r]:
                    e = int(plan.expert_ids[t, r])
                    inbox[shard[e]].append((e, int(plan.slot[t, r]), int(t), src))

    def run_worker(dst: int):
        items = sorted(inbox[dst])
        results = []
        for e in sorted({it[0] for it in items}):
            batch = [it for it in items if it[0] == e]
            toks = np.array([it[2] for it in batch])
            y = _ffn(x[toks], *weights[e]) * gates[toks, e][:, None]
            results += [(it[3], it[2], y[j]) for j, it in enumerate(batch)]
        return results

    cap = threads if threads is not None else int(os.environ.get("VLMOE_THREADS", "1") or 1)
    if cap > 1 and w > 1:
        with ThreadPoolExecutor(max_workers=min(cap, w)) as pool:
            per_worker = list(pool.map(run_worker, range(w)))
    else:
        per_worker = [run_worker(dst) for dst in range(w)]

    # return + combine at the home worker, in fixed worker order
    out = np.zeros_like(x)
    for results in per_worker:
        for _src, t, y in results:
            out[t] += y
    trace = trace_from_assignments(plan.expert_ids, plan.kept, topology)
    if (trace.compute > topology.worker_capacity).any() and topology.expert_capacity:
        raise AssertionError("a worker processed more tokens than its capacity")
    return out, trace


def imbalance_metrics(trace: ExchangeTrace, alpha: float = DEFAULT_ALPHA) -> dict:
    compute = trace.compute.astype(float)
    mean = compute.mean()
    ratio = float(compute.max() / mean) if mean > 0 else 1.0
    cross = trace.dispatch.copy()
    np.fill_diagonal(cross, 0)
    back = trace.returned.copy()
    np.fill_diagonal(back, 0)
    per_worker = cross.sum(axis=1) + cross.sum(axis=0) + back.sum(axis=1) + back.sum(axis=0)
    max_transfer = float(per_worker.max()) if per_worker.size else 0.0
    return {
        "load_ratio": ratio,
        "max_compute": float(compute.max()),
        "p95_transfer": float(np.percentile(per_worker, 95)) if per_worker.size else 0.0,
        "max_transfer": max_transfer,
        "step_time": float(compute.max() + alpha * max_transfer),
        "alpha": alpha,
    }
