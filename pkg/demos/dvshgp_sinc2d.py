"""
Distributed experts on a two-dimensional problem
================================================

Four thousand noisy samples of sinc(0.1 x1 x2) are split by k-means into
8 experts. Each expert owns its inducing points and variational parameters,
while the kernels and the noise prior mean are shared. Predictions of the
experts are combined with the robust Bayesian committee machine and scored
on a 70 x 70 test grid.
"""

import time

from vshgp.data import gen_sinc2d, sinc2d_grid
from vshgp.distributed import DvshgpConfig, init_dvshgp, predict_dvshgp, train_dvshgp
from vshgp.metrics import msll, smse
from vshgp.predictive import log_predictive_density

train = gen_sinc2d(4000, seed=1)
test = sinc2d_grid(70, seed=2)
nz = train.normalizer
X, y = train.normalized()

model = init_dvshgp(X, y, M=8, m0=40, u0=40, seed=0)
print("expert sizes:", model.partition.sizes().tolist())

t = time.perf_counter()
model, trace = train_dvshgp(model, DvshgpConfig(variational_budget=30, joint_budget=70, workers=2))
print(f"trained in {time.perf_counter() - t:.1f}s, bound {trace[-1][1]:.1f}")

Xt, yt = nz.transform_x(test.X), nz.transform_y(test.y)
pred = predict_dvshgp(model, Xt)
print("points where aggregation failed:", int(pred.failed.sum()))

lpd = log_predictive_density(pred.latent(), yt)
print("test points:", test.n)
print("SMSE:", round(smse(yt, pred.mu), 4))
print("MSLL:", round(msll(yt, lpd, y.mean(), y.var()), 4))
