import numpy as np
import pytest

from metaseg.autodiff import Tape, constant, grad, leaf, ops
from metaseg.params import ParamVector, Segment


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def flat_vector(data) -> ParamVector:
    data = np.asarray(data, dtype=np.float64)
    return ParamVector((Segment("x", (data.size,), 0),), data)


def quadratic_loss(matrix: np.ndarray, center: np.ndarray):
    """ts -> 0.5 (x-c)' M (x-c) over the single segment 'x'."""
    n = center.size
    m_c, c_c = constant(matrix), constant(center)

    def f(ts):
        d = ops.sub(ts["x"], c_c)
        md = ops.reshape(ops.matmul(m_c, ops.reshape(d, (n, 1))), (n,))
        return ops.mul(ops.asum(ops.mul(d, md)), 0.5)

    return f


def spd(rng: np.random.Generator, n: int, ridge: float = 0.5) -> np.ndarray:
    r = rng.normal(size=(n, n))
    return r @ r.T / n + ridge * np.eye(n)


def fd_gradcheck(fn, arrays, rng, probes=20, h=1e-6, rtol=1e-5):
    """Central-difference check of d fn / d arrays at random coordinates.

    ``fn`` maps tensors to a scalar tensor and must be deterministic.
    Returns the worst relative error seen.
    """
    with Tape():
        ts = [leaf(a) for a in arrays]
        out = fn(*ts)
        gs = grad(out, ts)

    def value(mod):
        return float(fn(*[constant(a) for a in mod]).data)

    worst = 0.0
    for _ in range(probes):
        k = int(rng.integers(0, len(arrays)))
        a = arrays[k]
        idx = tuple(rng.integers(0, d) for d in a.shape) if a.shape else ()
        plus = [x.copy() for x in arrays]
        minus = [x.copy() for x in arrays]
        plus[k][idx] += h
        minus[k][idx] -= h
        fd = (value(plus) - value(minus)) / (2 * h)
        an = gs[k].data[idx] if a.shape else float(gs[k].data)
        rel = abs(an - fd) / max(1.0, abs(fd), abs(an))
        worst = max(worst, rel)
    assert worst < rtol, f"finite-difference mismatch: worst rel err {worst:.3e}"
    return worst
