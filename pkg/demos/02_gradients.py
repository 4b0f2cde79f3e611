# %% [markdown]
# # Checking the autodiff engine
# Every primitive and every model block carries a central-difference check.

# %%
import numpy as np

from geohand import tensor as T
from geohand.gradcheck import report, run_checks
from geohand.tensor import Tensor, backward, grad_check

# %% a hand-rolled function
x = Tensor(np.random.default_rng(0).standard_normal((4, 5)), requires_grad=True)
w = Tensor(np.random.default_rng(1).standard_normal((5, 3)), requires_grad=True)


def f(x, w):
    return T.tsum(T.square(T.tanh(x @ w)))


loss = f(x, w)
backward(loss)
print("loss", float(loss.data), "grad norm", np.linalg.norm(w.grad))
print(grad_check(f, [x, w]))

# %% the whole registry, grouped by module
results = run_checks()
print(report(results))

# %% a broken backward rule is caught by name
prim = T.PRIMITIVES["tanh"]
good = prim.backward
prim.backward = lambda g, saved, attrs: tuple(1.1 * v for v in good(g, saved, attrs))
try:
    print(run_checks(["tensorcore/tanh"])[0].line())
finally:
    prim.backward = good
