"""The two routes to a meta-gradient, on a problem with a known answer.

For quadratic support/query losses the bilevel gradient has a closed
form: (I + H/lambda)^{-1} g_query at the inner stationary point.  The
implicit route (CG over Hessian-vector products) hits it directly; the
unrolled route approaches it as the inner loop runs longer -- at a
linearly growing memory price, which is the whole point of going
implicit.
"""

import numpy as np

from metaseg import models
from metaseg.autodiff import ops
from metaseg.inner_loop import InnerConfig, descend
from metaseg.losses import quadratic_penalty
from metaseg.meta_gradient import (CGConfig, implicit_gradient, implicit_meta_grad,
                                   unrolled_gradient, unrolled_meta_grad)
from metaseg.models import AttnUNetConfig
from metaseg.params import ParamVector, Segment, vector_grad
from metaseg.tasks import EpisodeConfig, SynthFamilyConfig, generate_pool, sample_task
from metaseg.verify import closed_form_meta_gradient

rng = np.random.default_rng(3)
n, lam = 10, 5.0
r1, r2 = rng.normal(size=(n, n)), rng.normal(size=(n, n))
A = r1 @ r1.T / n + 0.5 * np.eye(n)       # support curvature
Bq = r2 @ r2.T / n + 0.2 * np.eye(n)      # query curvature
b, c = rng.normal(size=n), rng.normal(size=n)
theta = ParamVector((Segment("x", (n,), 0),), rng.normal(size=n))


def quadratic(M, center):
    from metaseg.autodiff import constant
    Mc, cc = constant(M), constant(center)

    def f(ts):
        d = ops.sub(ts["x"], cc)
        Md = ops.reshape(ops.matmul(Mc, ops.reshape(d, (n, 1))), (n,))
        return ops.mul(ops.asum(ops.mul(d, Md)), 0.5)

    return f


support, query = quadratic(A, b), quadratic(Bq, c)
oracle = closed_form_meta_gradient(A, b, Bq, c, theta.data, lam)

# implicit: inner to stationarity, then a CG solve
phi, _ = descend(lambda ts: ops.add(support(ts), quadratic_penalty(ts, theta, lam)),
                 theta, steps=500, lr=0.12)
_, gq = vector_grad(query, phi)
meta, cg = implicit_gradient(support, gq, phi, lam, CGConfig(max_iters=n))
print(f"implicit vs closed form: rel gap "
      f"{np.linalg.norm(meta.data - oracle) / np.linalg.norm(oracle):.2e} "
      f"({cg.iterations} CG iterations)")

# unrolled: longer inner loops close the gap
eigs = np.linalg.eigvalsh(A)
lr = 1.4 / (eigs.min() + eigs.max() + 2 * lam)
print("unrolled gap by inner steps:")
for steps in (1, 2, 5, 10, 25):
    m, _, _ = unrolled_gradient(support, query, theta, steps, lr, lam)
    gap = np.linalg.norm(m.data - oracle) / np.linalg.norm(oracle)
    print(f"  T={steps:2d}: {gap:.3e}")

# --- the memory story on the real segmentation model -------------------------
model = models.init(AttnUNetConfig(input_size=16, base_channels=2, depth=2, seed=0))
pools = [generate_pool(SynthFamilyConfig(image_size=16, seed=1), 30, "a"),
         generate_pool(SynthFamilyConfig(image_size=16, contrast=-0.8, seed=2), 30, "b")]
task = sample_task(pools, EpisodeConfig(n_ways=2, k_shots=2, seed=4), 0)
print("peak live tape nodes by inner steps (implicit vs unrolled):")
for steps in (5, 10, 25):
    icfg = InnerConfig(steps=steps, learning_rate=1e-2)
    ir = implicit_meta_grad(model, model.params, task, icfg, CGConfig(max_iters=3))
    ur = unrolled_meta_grad(model, model.params, task, icfg)
    print(f"  T={steps:2d}: implicit {ir.peak_tape_nodes:6d}   "
          f"unrolled {ur.peak_tape_nodes:6d}")
