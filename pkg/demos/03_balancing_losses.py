"""The router balancing losses on a balanced and a collapsed router, plus a Monte-Carlo look at p_e."""

import math

import numpy as np

from vlmoe import tensor as T
from vlmoe.aux_losses import importance_loss, load_loss, selection_probability, v_loss, z_loss
from vlmoe.tensor import Tensor

rng = np.random.default_rng(2)
n, num_experts = 64, 4
sigma = 1 / num_experts

balanced = rng.standard_normal((n, num_experts)) * 0.1
collapsed = balanced.copy()
collapsed[:, 2] += 3.0

print(f"{'router':>10} {'importance':>11} {'load':>8} {'z-loss':>8} {'v-loss':>8}")
for name, logits in (("balanced", balanced), ("collapsed", collapsed)):
    clean = Tensor(logits)
    noisy = Tensor(logits + sigma * rng.standard_normal(logits.shape))
    gates = T.softmax(noisy)
    print(f"{name:>10} {importance_loss(gates).item():11.4f} {load_loss(clean, noisy, 1, sigma).item():8.4f} "
          f"{z_loss(clean).item():8.4f} {v_loss(gates, clean, noisy, 1, sigma).item():8.4f}")

print("\nz-loss of two zero logits:", z_loss(Tensor([[0.0, 0.0]])).item(), "= (ln 2)^2 =", math.log(2) ** 2)

# selection probability for one token, checked by resampling only the expert's own noise
clean = rng.standard_normal((1, num_experts)) * 0.3
noisy = clean + sigma * rng.standard_normal(clean.shape)
p = selection_probability(Tensor(clean), Tensor(noisy), 1, sigma).data[0]
eta = noisy.max()
mc = [np.mean(clean[0, e] + sigma * rng.standard_normal(200_000) >= eta) for e in range(num_experts)]
print("\nrealized noisy logits:", np.round(noisy[0], 3))
print("p_e (closed form):   ", np.round(p, 4))
print("p_e (Monte Carlo):   ", np.round(mc, 4))
