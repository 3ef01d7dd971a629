"""Top-k routing with fixed expert buffers, Batch Priority Routing and drop accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    concat,
    gelu,
    index_select,
    matmul,
    mul,
    reshape,
    scatter_add_rows,
    softmax,
)


@dataclass
class CapacityPolicy:
    factor_train: float = 1.05
    factor_infer: float = 1.0

    def __post_init__(self):
        if self.factor_train <= 0 or self.factor_infer <= 0:
            raise ValueError("capacity factors must be positive")

    def factor(self, training: bool) -> float:
        return self.factor_train if training else self.factor_infer


@dataclass
class RouterParams:
    weight: Tensor  # [E, D]
    noise_sigma: float | None = None  # None -> 1/E

    def __post_init__(self):
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ValueError(f"router weight must be [E, D] with E, D >= 1, got {self.weight.shape}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def sigma(self) -> float:
        return 1.0 / self.num_experts if self.noise_sigma is None else self.noise_sigma


@dataclass
class RoutingPlan:
    """Per-token expert assignments.

    ``expert_ids``, ``weights``, ``kept`` and ``slot`` are ``[n, k]`` arrays in
    rank order (column 0 is each token's first choice). ``slot`` is -1 for
    dropped assignments.
    """

    gates: Tensor
    expert_ids: np.ndarray
    weights: np.ndarray
    kept: np.ndarray
    slot: np.ndarray
    capacity: int
    priority: np.ndarray = field(repr=False)
    clean_logits: Tensor | None = field(default=None, repr=False)
    noisy_logits: Tensor | None = field(default=None, repr=False)

    @property
    def num_tokens(self) -> int:
        return self.expert_ids.shape[0]

    @property
    def k(self) -> int:
        return self.expert_ids.shape[1]

    @property
    def num_experts(self) -> int:
        return self.gates.shape[1]

    def kept_counts(self) -> np.ndarray:
        return np.bincount(self.expert_ids[self.kept], minlength=self.num_experts)

    def demand_counts(self) -> np.ndarray:
        return np.bincount(self.expert_ids.reshape(-1), minlength=self.num_experts)

    def records(self, layer: int, modality: str, token_offset: int = 0) -> list[dict]:
        """One dict per (token, rank) assignment, matching the routing-log schema."""
        out = []
        for t in range(self.num_tokens):
            for r in range(self.k):
                out.append(
                    {
                        "layer": layer,
                        "modality": modality,
                        "expert_id": int(self.expert_ids[t, r]),
                        "token_id": token_offset + t,
                        "gate": float(self.weights[t, r]),
                        "kept": bool(self.kept[t, r]),
                    }
                )
        return out


def gate(router: RouterParams, tokens: Tensor, training: bool, rng: np.random.Generator | None = None):
    """Return ``(gates, clean_logits, noisy_logits)`` for ``tokens`` of shape [n, D]."""
    if tokens.ndim != 2 or tokens.shape[1] != router.weight.shape[1]:
        raise DimensionError(
            f"token width {tokens.shape} does not match router weight {router.weight.shape}"
        )
    clean = matmul(tokens, router.weight.T)
    noisy = clean
    if training and router.sigma > 0:
        if rng is None:
            raise ValueError("training-mode gating needs a seeded generator")
        eps = rng.standard_normal(clean.shape) * router.sigma
        noisy = clean + Tensor(eps)
    return softmax(noisy, axis=-1), clean, noisy


def compute_capacity(n_tokens: int, num_experts: int, k: int, factor: float) -> int:
    if n_tokens <= 0 or num_experts <= 0 or k <= 0 or factor <= 0:
        raise ValueError("compute_capacity arguments must be positive")
    if math.isinf(factor):
        return n_tokens * k
    # round away float noise before ceil so e.g. 1.05*100/4 does not become 27.000000000000004
    raw = round(factor * k * n_tokens / num_experts, 9)
    return max(1, math.ceil(raw))


def top_k(gates: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k largest entries per row, ties to the lower index."""
    if not 1 <= k <= gates.shape[1]:
        raise ValueError(f"k={k} outside [1, {gates.shape[1]}]")
    order = np.argsort(-gates, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(gates, order, axis=1)


def _assign(gates: Tensor, k: int, capacity: int, priority: np.ndarray) -> RoutingPlan:
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    g = gates.data
    n, num_experts = g.shape
    ids, weights = top_k(g, k)
    kept = np.zeros((n, k), dtype=bool)
    slot = np.full((n, k), -1, dtype=np.int64)
    fill = np.zeros(num_experts, dtype=np.int64)
    for r in range(k):
        e_in_order = ids[priority, r]
        onehot = np.zeros((n, num_experts), dtype=np.int64)
        onehot[np.arange(n), e_in_order] = 1
        position = (np.cumsum(onehot, axis=0) - 1)[np.arange(n), e_in_order] + fill[e_in_order]
        ok = position < capacity
        kept[priority[ok], r] = True
        slot[priority[ok], r] = position[ok]
        fill += np.minimum(onehot.sum(axis=0), np.maximum(capacity - fill, 0))
    return RoutingPlan(gates, ids, weights, kept, slot, capacity, priority)


def assign_vanilla(gates: Tensor, k: int, capacity: int) -> RoutingPlan:
    """Fill buffers in token-index order, one rank round at a time."""
    return _assign(gates, k, capacity, np.arange(gates.shape[0]))


def bpr_priority(gates: np.ndarray) -> np.ndarray:
    n = gates.shape[0]
    return np.lexsort((np.arange(n), -gates.max(axis=1)))


def assign_bpr(gates: Tensor, k: int, capacity: int) -> RoutingPlan:
    """Fill buffers by descending max gate weight (ties to the lower token index)."""
    return _assign(gates, k, capacity, bpr_priority(gates.data))


def ffn(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return matmul(gelu(matmul(x, w1)), w2)


def expert_rows(plan: RoutingPlan, expert: int) -> tuple[np.ndarray, np.ndarray]:
    """Token indices and rank columns of kept assignments to ``expert``, in buffer-slot order."""
    tok, rank = np.nonzero(plan.kept & (plan.expert_ids == expert))
    order = np.argsort(plan.slot[tok, rank], kind="stable")
    return tok[order], rank[order]


def dispatch_combine(tokens: Tensor, plan: RoutingPlan, experts: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Sum of gate-weighted expert outputs over kept assignments; dropped ones give zero."""
    n = tokens.shape[0]
    if plan.num_tokens != n:
        raise ValueError(f"plan covers {plan.num_tokens} tokens but {n} were given")
    if len(experts) != plan.num_experts:
        raise ValueError(f"plan routes over {plan.num_experts} experts, got {len(experts)}")
    parts, rows = [], []
    for e, (w1, w2) in enumerate(experts):
        tok, _ = expert_rows(plan, e)
        if tok.size == 0:
            continue
        y = ffn(index_select(tokens, tok), w1, w2)
        w = reshape(index_select(plan.gates, (tok, np.full(tok.shape, e))), (-1, 1))
        parts.append(mul(y, w))
        rows.append(tok)
    if not parts:
        return Tensor(np.zeros(tokens.shape))
    return scatter_add_rows(concat(parts, axis=0), np.concatenate(rows), n)


@dataclass
class DropStats:
    kept_per_expert: np.ndarray
    demand_per_expert: np.ndarray
    dropped: int
    total: int

    @property
    def drop_rate(self) -> float:
        return self.dropped / self.total if self.total else 0.0

    @property
    def success_rate(self) -> float:
        return 1.0 - self.drop_rate


def drop_stats(plan: RoutingPlan) -> DropStats:
    total = plan.kept.size
    return DropStats(
        kept_per_expert=plan.kept_counts(),
        demand_per_expert=plan.demand_counts(),
        dropped=int(total - plan.kept.sum()),
        total=int(total),
    )
