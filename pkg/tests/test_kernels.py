"""The numba and numpy kernel paths must agree bit for bit."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoexo import kernels
from egoexo.tensor import conv_out_size

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not importable")


@st.composite
def conv_case(draw):
    b = draw(st.integers(1, 3))
    c = draw(st.integers(1, 4))
    h = draw(st.integers(3, 9))
    w = draw(st.integers(3, 9))
    k = draw(st.sampled_from([1, 3]))
    s = draw(st.integers(1, 2))
    seed = draw(st.integers(0, 2**16))
    return b, c, h, w, k, s, seed


@settings(max_examples=40, deadline=None)
@given(conv_case())
def test_im2col_col2im_parity(case):
    b, c, h, w, k, s, seed = case
    rng = np.random.default_rng(seed)
    xp = rng.standard_normal((b, c, h, w)).astype(np.float32)
    ho, wo = conv_out_size(h, k, s, 0), conv_out_size(w, k, s, 0)
    a = kernels.im2col(xp, k, k, s, ho, wo, use_numba=False)
    n = kernels.im2col(xp, k, k, s, ho, wo, use_numba=True)
    assert a.dtype == n.dtype and np.array_equal(a, n)
    cols = rng.standard_normal(a.shape).astype(np.float32)
    assert np.array_equal(kernels.col2im(cols, xp.shape, k, k, s, ho, wo, use_numba=False),
                          kernels.col2im(cols, xp.shape, k, k, s, ho, wo, use_numba=True))


@settings(max_examples=40, deadline=None)
@given(conv_case())
def test_col2im_is_adjoint_of_im2col(case):
    b, c, h, w, k, s, seed = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c, h, w))
    ho, wo = conv_out_size(h, k, s, 0), conv_out_size(w, k, s, 0)
    cols = rng.standard_normal((b * ho * wo, c * k * k))
    lhs = np.sum(kernels.im2col(x, k, k, s, ho, wo) * cols)
    rhs = np.sum(x * kernels.col2im(cols, x.shape, k, k, s, ho, wo))
    assert np.isclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(2, 8), st.integers(2, 3), st.integers(0, 2**16))
def test_maxpool_parity(b, c, h, k, seed):
    if k > h:
        return
    rng = np.random.default_rng(seed)
    # rounded values create ties; both paths must pick the first maximum
    x = np.round(rng.standard_normal((b, c, h, h)), 1).astype(np.float32)
    ho = conv_out_size(h, k, k, 0)
    va, ia = kernels.maxpool(x, k, k, ho, ho, use_numba=False)
    vn, in_ = kernels.maxpool(x, k, k, ho, ho, use_numba=True)
    assert np.array_equal(va, vn) and np.array_equal(ia, in_)
    g = rng.standard_normal(va.shape).astype(np.float32)
    assert np.array_equal(kernels.maxpool_backward(g, ia, x.shape, k, k, use_numba=False),
                          kernels.maxpool_backward(g, ia, x.shape, k, k, use_numba=True))


def test_env_flag_parsing(monkeypatch):
    for v in ("0", "false", "OFF", "no"):
        monkeypatch.setenv("EXGN_NUMBA", v)
        assert not kernels._flag_enabled()
    monkeypatch.setenv("EXGN_NUMBA", "1")
    assert kernels._flag_enabled()
    monkeypatch.delenv("EXGN_NUMBA")
    assert kernels._flag_enabled()


def test_numpy_fallback_subprocess(tmp_path):
    import subprocess
    import sys

    code = "from egoexo import kernels; print(kernels.USE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env={"EXGN_NUMBA": "0", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
