"""
Stochastic training: natural gradients versus plain Adam
========================================================

The uncollapsed bound can be estimated from mini-batches. Here both variational
Gaussians are moved either by natural-gradient steps (hyperparameters by Adam)
or everything by Adam alone. The full-batch bound is printed every 100
iterations next to the bound reached by full-batch conjugate gradients.
"""

from vshgp.core import init_model, train_vshgp
from vshgp.data import gen_toy1d
from vshgp.stochastic import SvshgpConfig, train_svshgp

X, y = gen_toy1d(500, seed=0).normalized()
model = init_model(X, y, 20, 20, seed=0)

_, cgd = train_vshgp(model, budget=100, variational_budget=30)
print("full-batch CGD bound:", round(cgd[-1], 2))

traces = {}
for method in ("ngd+adam", "adam"):
    cfg = SvshgpConfig(batch_size=50, iterations=1000, method=method, eval_every=100, seed=0)
    res = train_svshgp(model, cfg)
    traces[method] = dict(res.full_trace)
    print(f"{method}: {res.trace[-1][2]:.1f}s for 1000 iterations")

print("\niteration   ngd+adam       adam")
for it in sorted(traces["adam"]):
    print(f"{it:9d}  {traces['ngd+adam'][it]:9.2f}  {traces['adam'][it]:9.2f}")
