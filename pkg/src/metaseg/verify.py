"""Built-in oracle suite: cross-checks the solver stack on problems with
independently computable answers (dense solves, closed-form bilevel
quadratics, finite differences).  Runs in seconds; used by the CLI
``verify`` subcommand and mirrored by the test suite.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, constant, grad, hvp, leaf, ops
from .inner_loop import descend
from .losses import quadratic_penalty
from .meta_gradient import CGConfig, conjugate_gradient, implicit_gradient, unrolled_gradient
from .params import ParamVector, Segment, vector_grad


def _quadratic(matrix: np.ndarray, center: np.ndarray):
    n = center.size
    m_c, c_c = constant(matrix), constant(center)

    def f(ts):
        d = ops.sub(ts["x"], c_c)
        md = ops.reshape(ops.matmul(m_c, ops.reshape(d, (n, 1))), (n,))
        return ops.mul(ops.asum(ops.mul(d, md)), 0.5)

    return f


def _vector(data: np.ndarray) -> ParamVector:
    return ParamVector((Segment("x", (data.size,), 0),), data)


def _spd(rng: np.random.Generator, n: int, ridge: float = 0.5) -> np.ndarray:
    r = rng.normal(size=(n, n))
    return r @ r.T / n + ridge * np.eye(n)


def check_cg_against_dense(rng: np.random.Generator, systems: int = 20,
                           max_n: int = 50) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(systems):
        n = int(rng.integers(2, max_n + 1))
        a = _spd(rng, n)
        b = rng.normal(size=n)
        res = conjugate_gradient(lambda v: a @ v, b,
                                 CGConfig(max_iters=n, residual_tol=0.0))
        rel = np.linalg.norm(a @ res.x - b) / np.linalg.norm(b)
        worst = max(worst, rel)
        direct = np.linalg.solve(a, b)
        worst = max(worst, np.linalg.norm(res.x - direct) / np.linalg.norm(direct))
    return worst < 1e-8, f"worst relative residual {worst:.2e} over {systems} systems"


def closed_form_meta_gradient(a: np.ndarray, b: np.ndarray, bq: np.ndarray,
                              c: np.ndarray, theta: np.ndarray, lam: float) -> np.ndarray:
    """Bilevel quadratic oracle, derived by hand:

    inner argmin of 0.5(x-b)'A(x-b) + lam/2 ||x-theta||^2 is
    phi* = (A+lam I)^{-1}(A b + lam theta); the query gradient there is
    Bq(phi*-c); and d phi*/d theta = lam (A+lam I)^{-1}, so the
    meta-gradient is (I + A/lam)^{-1} Bq (phi* - c).
    """
    n = theta.size
    phi_star = np.linalg.solve(a + lam * np.eye(n), a @ b + lam * theta)
    gq = bq @ (phi_star - c)
    return np.linalg.solve(np.eye(n) + a / lam, gq)


def check_implicit_vs_closed_form(rng: np.random.Generator, trials: int = 5,
                                  n: int = 12, lam: float = 5.0) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(trials):
        a, bq = _spd(rng, n), _spd(rng, n, 0.2)
        b, c = rng.normal(size=n), rng.normal(size=n)
        theta = _vector(rng.normal(size=n))
        support, query = _quadratic(a, b), _quadratic(bq, c)

        def prox(ts):
            return ops.add(support(ts), quadratic_penalty(ts, theta, lam))

        phi, _ = descend(prox, theta, 500, 0.15)
        _, gq = vector_grad(query, phi)
        meta, _ = implicit_gradient(support, gq, phi, lam,
                                    CGConfig(max_iters=n, residual_tol=0.0))
        oracle = closed_form_meta_gradient(a, b, bq, c, theta.data, lam)
        worst = max(worst, np.linalg.norm(meta.data - oracle) / np.linalg.norm(oracle))
    return worst < 1e-6, f"worst relative gap to closed form {worst:.2e}"


def check_unrolled_convergence(rng: np.random.Generator, n: int = 10,
                               lam: float = 5.0) -> tuple[bool, str]:
    a, bq = _spd(rng, n), _spd(rng, n, 0.2)
    b, c = rng.normal(size=n), rng.normal(size=n)
    theta = _vector(rng.normal(size=n))
    support, query = _quadratic(a, b), _quadratic(bq, c)
    oracle = closed_form_meta_gradient(a, b, bq, c, theta.data, lam)
    eigs = np.linalg.eigvalsh(a)
    lr = 1.4 / (eigs.min() + eigs.max() + 2 * lam)
    gaps = []
    for steps in (1, 5, 10, 25):
        meta, _, _ = unrolled_gradient(support, query, theta, steps, lr, lam)
        gaps.append(np.linalg.norm(meta.data - oracle) / np.linalg.norm(oracle))
    monotone = all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:]))
    ok = monotone and gaps[-1] < 1e-3
    return ok, ("gaps " + ", ".join(f"{g:.2e}" for g in gaps)
                + ("" if monotone else " (not monotone)"))


def check_hvp(rng: np.random.Generator) -> tuple[bool, str]:
    n = 7
    w = rng.normal(size=n)

    def loss(x):
        z = ops.asum(ops.mul(x, constant(w)))
        return ops.log(ops.add(ops.cosh(z), ops.mul(ops.asum(ops.mul(x, x)), 0.3)))

    at, v = rng.normal(size=n), rng.normal(size=n)
    h = 1e-4

    def g_at(z):
        with Tape():
            x = leaf(z)
            return grad(loss(x), x).data.copy()

    fd = (g_at(at + h * v) - g_at(at - h * v)) / (2 * h)
    hv = hvp(loss, at, v)
    rel = np.linalg.norm(hv - fd) / max(np.linalg.norm(fd), 1e-12)

    u, w2 = rng.normal(size=n), rng.normal(size=n)
    lin = np.linalg.norm(
        hvp(loss, at, 2.0 * u + 0.5 * w2) - 2.0 * hvp(loss, at, u) - 0.5 * hvp(loss, at, w2)
    )
    sym = abs(u @ hvp(loss, at, w2) - w2 @ hvp(loss, at, u))
    ok = rel < 1e-4 and lin < 1e-10 and sym < 1e-8
    return ok, f"fd rel {rel:.2e}, linearity {lin:.2e}, symmetry {sym:.2e}"


def run_verification(log=print) -> bool:
    rng = np.random.default_rng(2024)
    checks = [
        ("conjugate gradient vs dense solve", check_cg_against_dense),
        ("implicit meta-gradient vs closed form", check_implicit_vs_closed_form),
        ("unrolled converges to implicit", check_unrolled_convergence),
        ("hessian-vector products", check_hvp),
    ]
    all_ok = True
    for name, fn in checks:
        ok, detail = fn(rng)
        all_ok &= ok
        log(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
