import numpy as np
import pytest

from lcforge.autodiff import default_dtype


def naive_conv2d(x, w, stride=1, padding=0):
    """Six nested loops, float64 throughout: the reference cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def naive_fold(pointwise, spatial):
    c_out, hidden = pointwise.shape[:2]
    out = np.zeros((c_out,) + spatial.shape[1:])
    for i in range(c_out):
        for j in range(hidden):
            out[i] += float(pointwise[i, j, 0, 0]) * spatial[j].astype(np.float64)
    return out


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
