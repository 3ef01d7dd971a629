"""Build a small computation on the tape, backpropagate, and compare against finite differences."""

import numpy as np

from vlmoe import tensor as T
from vlmoe.gradcheck import check_gradients, numerical_grad
from vlmoe.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# a two-layer perceptron with a layernorm in between
x = Tensor(rng.standard_normal((4, 3)))
w1 = Tensor(rng.standard_normal((3, 8)), requires_grad=True, name="w1")
g = Tensor(np.ones(8), requires_grad=True, name="g")
b = Tensor(np.zeros(8), requires_grad=True, name="b")
w2 = Tensor(rng.standard_normal((8, 5)), requires_grad=True, name="w2")
targets = np.array([0, 3, 1, 4])


def loss():
    h = T.layernorm(T.gelu(x @ w1), g, b)
    return T.cross_entropy(h @ w2, targets)


with Tape() as tape:
    value = loss()
grads = tape.backward(value, {"w1": w1, "g": g, "b": b, "w2": w2})
print(f"loss = {value.item():.6f}")
for name, grad in grads.items():
    print(f"  d loss / d {name}: shape {grad.shape}, norm {np.linalg.norm(grad):.4f}")

# central differences perturb one entry at a time; they know nothing about the tape
fd = numerical_grad(loss, w2)
print("max |tape - fd| for w2:", np.abs(grads["w2"] - fd).max())

errors = check_gradients(loss, {"w1": w1, "g": g, "b": b, "w2": w2})
print("relative errors:", {k: f"{v:.1e}" for k, v in errors.items()})

# softmax is shift invariant and sums to one
p = T.softmax(Tensor([1000.0, 999.0, 0.0]))
print("softmax of large logits:", np.round(p.data, 6), "sum", p.data.sum())

# a tape can only be replayed once
try:
    tape.backward(value)
except T.TapeError as exc:
    print("second backward:", exc)
