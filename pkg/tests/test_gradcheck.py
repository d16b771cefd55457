import numpy as np
import pytest

from occudet.gradcheck import finite_diff_gradcheck
from occudet.ops import NonFiniteError, dense, relu
from occudet.rng import Rng
from occudet.sampling import trilinear_sample_3d


def gen(seed=0):
    return Rng(seed).stream(71).generator()


def test_dense_layer_tight():
    g = gen()
    err = finite_diff_gradcheck(
        lambda x, w, b: dense(x, w, b),
        [g.standard_normal((4, 4)), g.standard_normal((4, 4)),
         g.standard_normal(4)], rng=Rng(0))
    assert err < 1e-6


def test_trilinear_nonlattice_tight():
    g = gen(1)
    vol = g.standard_normal((2, 5, 5, 4))
    pts = np.stack([g.uniform(0.3, 3.6, 6), g.uniform(0.3, 3.6, 6),
                    g.uniform(0.3, 2.6, 6)], axis=1)
    pts = np.floor(pts) + np.clip(pts - np.floor(pts), 0.2, 0.8)

    def fn(v, p):
        out, _, vjp = trilinear_sample_3d(v, p)
        return out, lambda d: vjp(d)

    err = finite_diff_gradcheck(fn, [vol, pts], rng=Rng(1))
    assert err < 1e-5


def test_relu_away_from_kink_tight():
    g = gen(2)
    x = g.standard_normal((6, 6))
    x = np.sign(x) * (np.abs(x) + 0.11)
    err = finite_diff_gradcheck(lambda a: relu(a), [x], rng=Rng(2))
    assert err < 1e-6


def test_rejects_float32_inputs():
    with pytest.raises(ValueError):
        finite_diff_gradcheck(lambda a: relu(a),
                              [np.zeros(3, dtype=np.float32)], rng=Rng(0))


def test_surfaces_nonfinite_forward():
    def bad(x):
        y = x.copy()
        y[0] = np.nan
        return y, lambda d: (d,)
    with pytest.raises(NonFiniteError):
        finite_diff_gradcheck(bad, [np.ones(3)], rng=Rng(0))


def test_entry_subsampling_deterministic():
    g = gen(3)
    x = g.standard_normal((20, 20))
    w = g.standard_normal((20, 4))
    a = finite_diff_gradcheck(lambda q, r: dense(q, r), [x, w], rng=Rng(5),
                              max_entries=10)
    b = finite_diff_gradcheck(lambda q, r: dense(q, r), [x, w], rng=Rng(5),
                              max_entries=10)
    assert a == b
