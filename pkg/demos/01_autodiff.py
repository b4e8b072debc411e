# %% [markdown]
# # Reverse-mode autodiff on numpy arrays
#
# Every model in the package is built from `distilbench.tensor` ops. Each op
# records how to push a gradient back to its inputs, and `backward()` walks that
# tape once in reverse.

# %%
import numpy as np

from distilbench import tensor as T
from distilbench.gradcheck import check_gradients
from distilbench.tensor import Tensor

rng = np.random.default_rng(0)

# %% [markdown]
# A two-layer perceptron with a GELU and a softmax cross-entropy on top.

# %%
w1 = Tensor(rng.normal(size=(5, 8)) * 0.5, requires_grad=True)
w2 = Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
x = rng.normal(size=(4, 5))
labels = np.array([0, 2, 1, -1])          # -1 rows are ignored


def loss_fn():
    hidden = T.gelu(T.matmul(Tensor(x), w1))
    return T.cross_entropy(T.matmul(hidden, w2), labels)


loss = loss_fn()
loss.backward()
print("loss", loss.item())
print("grad norm of w1", np.linalg.norm(w1.grad))

# %% [markdown]
# Central finite differences agree with the tape to about 1e-9.

# %%
print(check_gradients(loss_fn, {"w1": w1, "w2": w2}))

# %% [markdown]
# The tape is consumed by a backward pass, so a second call is refused, and
# `no_grad` skips recording entirely.

# %%
try:
    loss.backward()
except T.GraphError as exc:
    print("second backward:", exc)

with T.no_grad():
    print("recorded under no_grad:", loss_fn().requires_grad)
