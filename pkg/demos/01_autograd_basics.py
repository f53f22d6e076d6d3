"""A tour of the autograd core: build a small computation, backpropagate,
and confirm the gradients against central finite differences.

Run:  python3 demos/01_autograd_basics.py
"""

import numpy as np

from lcmae import Tensor, grad_check, l2_normalize, layer_norm, matmul, softmax_lastdim

rng = np.random.default_rng(0)

# --- forward/backward on a tiny two-layer network -------------------------
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
gamma = Tensor(np.ones(5), requires_grad=True)
beta = Tensor(np.zeros(5), requires_grad=True)

hidden = layer_norm(matmul(x, w1), gamma, beta, 1e-6)
logits = matmul(hidden, w2)
probs = softmax_lastdim(logits)
loss = ((probs - 0.5) ** 2).sum()
loss.backward()

print(f"loss                  {float(loss.data):.6f}")
print(f"|dL/dw1|              {np.abs(w1.grad).sum():.6f}")
print(f"|dL/dw2|              {np.abs(w2.grad).sum():.6f}")

# --- the same loss as a function of w1, checked numerically ---------------
def f(w):
    h = layer_norm(matmul(x, w), gamma, beta, 1e-6)
    p = softmax_lastdim(matmul(h, w2))
    return ((p - 0.5) ** 2).sum()

err = grad_check(f, w1.data.copy())
print(f"finite-diff rel error {err:.3e}  (tolerance 1e-4)")

# --- l2_normalize is scale invariant; its gradient kills radial motion ----
v = Tensor(rng.normal(size=(1, 6)), requires_grad=True)
l2_normalize(v).sum().backward()
radial = float((v.grad * v.data).sum())
print(f"radial gradient       {radial:+.2e}  (zero up to rounding)")
