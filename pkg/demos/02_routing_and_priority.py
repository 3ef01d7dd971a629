"""Top-1 routing with a fixed expert buffer: which tokens get dropped, and how priority changes that."""

import numpy as np

from vlmoe.routing import (
    RouterParams,
    assign_bpr,
    assign_vanilla,
    compute_capacity,
    dispatch_combine,
    drop_stats,
    gate,
)
from vlmoe.tensor import Tensor

rng = np.random.default_rng(1)
n, d, num_experts = 16, 8, 4

# feature 0 is a constant, and the router reads it as a vote for expert 0
weight = rng.standard_normal((num_experts, d)) * 0.5
weight[0, 0] += 0.8
router = RouterParams(Tensor(weight))
x = rng.standard_normal((n, d))
x[:, 0] = 1.0
tokens = Tensor(x)

gates, clean, noisy = gate(router, tokens, training=True, rng=rng)
capacity = compute_capacity(n, num_experts, 1, 1.05)
print(f"{n} tokens, {num_experts} experts, capacity factor 1.05 -> {capacity} slots per expert")

for name, assign in (("token order", assign_vanilla), ("by max gate", assign_bpr)):
    plan = assign(gates, 1, capacity)
    s = drop_stats(plan)
    kept_mass = float((plan.weights * plan.kept).sum())
    print(f"\n{name}:")
    print("  demand per expert:", s.demand_per_expert.tolist())
    print("  kept per expert:  ", s.kept_per_expert.tolist())
    print(f"  drop rate {s.drop_rate:.3f}, kept gate mass {kept_mass:.3f}")
    dropped = np.flatnonzero(~plan.kept[:, 0])
    print("  dropped tokens:", dropped.tolist(), "with gates", np.round(plan.weights[dropped, 0], 3).tolist())

# dropped tokens get a zero expert output and only survive through the residual path
experts = [(Tensor(rng.standard_normal((d, 4 * d)) * 0.1), Tensor(rng.standard_normal((4 * d, d)) * 0.1))
           for _ in range(num_experts)]
plan = assign_bpr(gates, 1, capacity)
out = dispatch_combine(tokens, plan, experts)
print("\nrows of zeros in the MoE output:", np.flatnonzero(~out.data.any(axis=1)).tolist())
