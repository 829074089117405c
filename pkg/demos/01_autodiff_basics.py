"""The reverse-mode tensor core: tapes, gradients, and the finite-difference check.

Everything in this package differentiates through the same small engine:
float64 numpy buffers, a per-step tape, and explicit backward rules. This
script walks through the moving parts on functions small enough to verify by
hand.
"""

import numpy as np

from dcvae.autodiff import Tape, Tensor, grad_check, matmul, mul, parameter, softmax, tanh, tsum

rng = np.random.default_rng(0)

# A tape records primitive applications while it is active. Without a tape
# (inference) the same calls are plain numpy.
x = parameter(np.array([1.0, 2.0, 3.0]))
with Tape() as tape:
    loss = tsum(mul(x, x))          # sum of squares
    tape.backward(loss)
print("d/dx sum(x^2) =", x.grad, "(expect 2x = [2, 4, 6])")

# Gradients accumulate across reuse, exactly like the chain rule says.
w = parameter(rng.uniform(-0.5, 0.5, (3, 3)))
v = parameter(rng.uniform(-0.5, 0.5, (3, 2)))
with Tape() as tape:
    out = tsum(tanh(matmul(matmul(w, w), v)))   # w appears twice
    tape.backward(out)
print("grad norm through repeated use of w:", np.linalg.norm(w.grad))

# softmax rows always sum to one, so the gradient of their sum vanishes.
s = parameter(rng.uniform(-2, 2, 5))
with Tape() as tape:
    total = tsum(softmax(s))
    tape.backward(total)
print("d/dx sum(softmax(x)) =", np.abs(s.grad).max(), "(expect ~0)")

# The central-difference oracle used throughout the test suite: max relative
# error between tape gradients and numeric differentiation.
p = Tensor(rng.uniform(-1, 1, (4, 3)))
q = Tensor(rng.uniform(-1, 1, (3, 2)))
err = grad_check(lambda a, b: tsum(tanh(matmul(a, b))), [p, q], eps=1e-5)
print(f"grad_check on tanh(a @ b): max relative error {err:.2e}")
