"""Router balancing losses: importance, load, z-loss, and their v-loss average."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOAD_MEAN_EPS = 1e-12


class AuxLossKind(str, enum.Enum):
    IMPORTANCE = "importance"
    LOAD = "load"
    ZLOSS = "zloss"
    VLOSS = "vloss"


def squared_cv(values: Tensor, eps: float = 0.0) -> Tensor:
    """(population std / mean)^2 of a 1-D tensor."""
    mu = T.mean(values)
    centred = values - mu
    var = T.mean(T.square(centred))
    return var / T.square(mu + eps) if eps else var / T.square(mu)


def importance_loss(gates: Tensor) -> Tensor:
    if gates.shape[0] == 0:
        raise ValueError("importance loss needs at least one token")
    return squared_cv(T.tsum(gates, axis=0))


def selection_probability(
    clean_logits: Tensor, noisy_logits: Tensor, k: int, sigma: float, exclude_self: bool = False
) -> Tensor:
    """p_e(x) = 1 - Phi((eta_k - clean_e) / sigma) per token and expert.

    eta_k is the k-th largest noisy logit of the token, held constant. With
    ``exclude_self`` the threshold for expert e is instead the k-th largest of
    the other experts' noisy logits, which is the exact probability that e
    lands in the top-k when only its own noise is resampled.
    """
    if sigma <= 0:
        raise ValueError("load loss needs sigma > 0")
    noisy = noisy_logits.data
    n, num_experts = noisy.shape
    if not exclude_self:
        eta = np.sort(noisy, axis=1)[:, num_experts - k][:, None]
        eta = np.broadcast_to(eta, noisy.shape)
    else:
        eta = np.empty_like(noisy)
        for e in range(num_experts):
            others = np.delete(noisy, e, axis=1)
            if others.shape[1] < k:
                eta[:, e] = -np.inf
            else:
                eta[:, e] = np.sort(others, axis=1)[:, others.shape[1] - k]
    z = T.scale(Tensor(eta) - clean_logits, 1.0 / sigma)
    return 1.0 - T.standard_normal_cdf(z)


def load_loss(clean_logits: Tensor, noisy_logits: Tensor, k: int, sigma: float) -> Tensor:
    p = selection_probability(clean_logits, noisy_logits, k, sigma)
    return squared_cv(T.tsum(p, axis=0), eps=LOAD_MEAN_EPS)


def z_loss(clean_logits: Tensor) -> Tensor:
    if clean_logits.shape[0] < 1:
        raise ValueError("z-loss needs at least one token")
    return T.mean(T.square(T.logsumexp(clean_logits, axis=-1)))


def v_loss(gates: Tensor, clean_logits: Tensor, noisy_logits: Tensor, k: int, sigma: float) -> Tensor:
    return T.scale(importance_loss(gates) + load_loss(clean_logits, noisy_logits, k, sigma), 0.5)


def router_aux_loss(kind: AuxLossKind | str, gates, clean_logits, noisy_logits, k: int, sigma: float) -> Tensor:
    kind = AuxLossKind(kind)
    if kind is AuxLossKind.IMPORTANCE:
        return importance_loss(gates)
    if kind is AuxLossKind.LOAD:
        return load_loss(clean_logits, noisy_logits, k, sigma)
    if kind is AuxLossKind.ZLOSS:
        return z_loss(clean_logits)
    return v_loss(gates, clean_logits, noisy_logits, k, sigma)


@dataclass
class AuxWeighting:
    weight: float = 0.01

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("aux-loss weight must be nonnegative")


def unweighted_aux(layer_losses: Mapping[str, Sequence]) -> Tensor:
    """Mean over MoE layers within each modality, summed over modalities."""
    total = Tensor(0.0)
    for losses in layer_losses.values():
        if len(losses) == 0:
            continue
        acc = losses[0]
        for extra in losses[1:]:
            acc = acc + extra
        total = total + T.scale(T.as_tensor(acc), 1.0 / len(losses))
    return total


def total_aux(layer_losses: Mapping[str, Sequence], weight: float = 0.01) -> Tensor:
    return T.scale(unweighted_aux(layer_losses), weight)
