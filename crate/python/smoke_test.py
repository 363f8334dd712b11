"""Smoke test for the lara_attention extension module.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/lara_attention-*.whl
"""

import math

import numpy as np

import lara_attention as la


def softmax_oracle(q, k, v):
    s = q @ k.T / math.sqrt(q.shape[1])
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    return (p / p.sum(axis=1, keepdims=True)) @ v


def main():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal(shape) for shape in [(5, 4), (7, 4), (7, 4)])
    x = la.AttentionInputs(q.tolist(), k.tolist(), v.tolist())
    assert (x.n, x.m, x.d) == (5, 7, 4), x

    exact = np.array(la.softmax_attention(x))
    assert np.allclose(exact, softmax_oracle(q, k, v), atol=1e-12)

    root = la.RandomSource(42)
    assert root.split(1).seed == la.RandomSource(42).split(1).seed
    for name, fn in [
        ("rfa", lambda r: la.rfa_attention(x, samples=256, rng=r)),
        ("ra", lambda r: la.ra_attention(x, samples=64, rng=r)),
        ("lara", lambda r: la.lara_attention(x, proposals=4, rng=r)),
    ]:
        y = np.array(fn(root.split_named(name)))
        assert y.shape == exact.shape
        assert np.array_equal(y, np.array(fn(root.split_named(name)))), name
        print(f"{name:5s} mse vs softmax {np.mean((y - exact) ** 2):.3e}")

    # Averaging single-sample RA runs approaches exact attention.
    mean = np.mean([la.ra_attention(x, rng=root.split(t)) for t in range(4000)], axis=0)
    assert np.abs(mean - exact).max() < 0.1, np.abs(mean - exact).max()

    a, b = [0.3, -0.2, 0.1], [0.1, 0.4, -0.5]
    est = la.kernel_estimate(a, b, 200_000, rng=root)
    assert abs(est - math.exp(np.dot(a, b))) < 0.02, est

    for bad in [
        lambda: la.AttentionInputs([[1.0]], [[1.0, 2.0]], [[1.0]]),
        lambda: la.lara_attention(x, weighting="nope"),
        lambda: la.lara_attention(x, weighting="decoupled", beta=-1.0),
    ]:
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")
    assert issubclass(la.NumericalError, ArithmeticError)
    print("smoke test passed")


if __name__ == "__main__":
    main()
