"""A short tour of the reverse-mode tape underneath everything else."""

import numpy as np

import mixvi.tensor_ad as ad
from mixvi.tensor_ad import Tape, Variable

# leaves that need gradients are flagged explicitly
w = Variable(np.array([[0.5, -1.0], [2.0, 0.3]]), requires_grad=True)
x = Variable(np.array([[1.0], [2.0]]))

with Tape() as tape:
    h = ad.matmul(w, x)
    y = ad.logsumexp(h)
    gw = tape.backward(y, [w])[w]

print("y =", y.value)
# d/dW logsumexp(Wx) = softmax(Wx) x^T
expected = np.exp(h.value - y.value) @ x.value.T
print("tape gradient:\n", gw)
print("closed form:\n", expected)

# stop_gradient keeps the value but cuts the path
with Tape() as tape:
    a = ad.mul(w, ad.stop_gradient(w))
    # ad.backward returns a list in the order requested
    (g,) = ad.backward(ad.sum(a), [w])
print("gradient of sum(w * stop(w)) equals w:", np.allclose(g, w.value))

# outside a tape nothing is recorded, so plain evaluation is cheap
print("no tape:", ad.sum(ad.square(w)).value)
