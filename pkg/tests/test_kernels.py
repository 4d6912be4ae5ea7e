import os
import subprocess
import sys

import numpy as np
import pytest

from pixbis import kernels
from pixbis.kernels import _numpy as ref

nb = kernels.numba_impl
needs_numba = pytest.mark.skipif(nb is None, reason="numba not importable")


def _shape(h, k, stride):
    return (h - k) // stride + 1


@needs_numba
@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (7, 2), (2, 2)])
def test_im2col_col2im_twins_agree(rng, k, stride):
    xp = rng.normal(size=(2, 3, 11, 9))
    ho, wo = _shape(11, k, stride), _shape(9, k, stride)
    a = ref.im2col(xp, k, k, stride, ho, wo)
    b = nb.im2col(xp, k, k, stride, ho, wo)
    np.testing.assert_array_equal(a, b)
    back_a = ref.col2im(a, 2, 3, 11, 9, k, k, stride, ho, wo)
    back_b = nb.col2im(a, 2, 3, 11, 9, k, k, stride, ho, wo)
    np.testing.assert_allclose(back_a, back_b, rtol=1e-12, atol=1e-12)


def test_col2im_is_adjoint_of_im2col(rng):
    # <im2col(x), c> == <x, col2im(c)>
    xp = rng.normal(size=(2, 2, 8, 8))
    ho = wo = _shape(8, 3, 2)
    c = rng.normal(size=(2 * 9, 2 * ho * wo))
    lhs = np.sum(ref.im2col(xp, 3, 3, 2, ho, wo) * c)
    rhs = np.sum(xp * ref.col2im(c, 2, 2, 8, 8, 3, 3, 2, ho, wo))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_numba
def test_maxpool_twins_agree_including_ties(rng):
    xp = rng.integers(0, 3, size=(2, 3, 9, 9)).astype(np.float64)  # many ties
    ho = wo = _shape(9, 3, 2)
    out_a, idx_a = ref.maxpool_forward(xp, 3, 2, ho, wo)
    out_b, idx_b = nb.maxpool_forward(xp, 3, 2, ho, wo)
    np.testing.assert_array_equal(out_a, out_b)
    np.testing.assert_array_equal(idx_a, idx_b)
    g = rng.normal(size=out_a.shape)
    np.testing.assert_allclose(ref.maxpool_backward(g, idx_a, 9, 9), nb.maxpool_backward(g, idx_b, 9, 9))


def test_maxpool_index_points_at_the_first_maximum():
    xp = np.ones((1, 1, 2, 2))
    out, idx = ref.maxpool_forward(xp, 2, 2, 1, 1)
    assert out[0, 0, 0, 0] == 1 and idx[0, 0, 0, 0] == 0


@needs_numba
def test_lbp_twins_agree(rng):
    gray = rng.integers(0, 256, size=(17, 23)).astype(np.float64)
    np.testing.assert_array_equal(ref.lbp_codes(gray), nb.lbp_codes(gray))


def test_lbp_code_bits_follow_offsets():
    gray = np.zeros((3, 3))
    gray[0, 0] = 5.0  # only the top-left neighbour exceeds the centre...
    code = ref.lbp_codes(gray)[0, 0]
    assert code == 255  # ...but ties count as set, so every bit is on
    gray = -np.ones((3, 3))
    gray[1, 1] = 0
    gray[0, 1] = 1  # offset index 1
    assert ref.lbp_codes(gray)[0, 0] == 0b10


def test_env_flag_forces_numpy_backend():
    env = dict(os.environ, PIXBIS_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from pixbis import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_backend_reports_numba_by_default():
    assert kernels.BACKEND == ("numba" if nb is not None else "numpy")
