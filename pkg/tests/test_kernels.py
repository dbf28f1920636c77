import os
import subprocess
import sys

import numpy as np
import pytest

from spoofmamba import kernels

py = kernels.get_backend("python")
needs_compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")


def scan_inputs(rng, nb=2, L=37, D=3, N=4):
    return (rng.standard_normal((nb, L, D)), rng.uniform(1e-3, 0.5, (nb, L, D)), -rng.uniform(0.2, 3.0, (D, N)),
            rng.standard_normal((nb, L, N)), rng.standard_normal((nb, L, N)), rng.standard_normal(D))


@needs_compiled
class TestCompiledMatchesFallback:
    cc = kernels.get_backend("compiled") if kernels.compiled_available() else None

    def test_scan_forward(self, rng):
        args = scan_inputs(rng)
        y1, h1 = self.cc.scan_forward(*args, True)
        y2, h2 = py.scan_forward(*args, True)
        np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(h1, h2, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("chunk", [1, 5, 37, 100])
    def test_scan_chunked(self, rng, chunk):
        args = scan_inputs(rng)
        np.testing.assert_allclose(self.cc.scan_forward_chunked(*args, chunk),
                                   py.scan_forward_chunked(*args, chunk), rtol=1e-12, atol=1e-12)

    def test_scan_backward(self, rng):
        args = scan_inputs(rng)
        _, hs = py.scan_forward(*args, True)
        dy = rng.standard_normal(args[0].shape)
        for g1, g2 in zip(self.cc.scan_backward(*args, hs, dy), py.scan_backward(*args, hs, dy)):
            np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-12)

    def test_abs_maxpool(self, rng):
        y = rng.standard_normal((6, 50))
        o1, c1 = self.cc.abs_maxpool(y, 3)
        o2, c2 = py.abs_maxpool(y, 3)
        np.testing.assert_array_equal(o1, o2)
        np.testing.assert_array_equal(c1, c2)
        g = rng.standard_normal(o1.shape)
        np.testing.assert_array_equal(self.cc.abs_maxpool_backward(g, c1, 3, 50),
                                      py.abs_maxpool_backward(g, c2, 3, 50))

    def test_fused_bn_kernels(self, rng):
        x = rng.standard_normal((3, 4, 20))
        m1, v1 = self.cc.channel_moments(x)
        m2, v2 = py.channel_moments(x)
        np.testing.assert_allclose(m1, m2, rtol=1e-13)
        np.testing.assert_allclose(v1, v2, rtol=1e-13)
        scale, shift = rng.uniform(0.5, 2, 4), rng.standard_normal(4)
        o1, i1 = self.cc.affine_selu_maxpool(x, scale, shift, 2, 3)
        o2, i2 = py.affine_selu_maxpool(x, scale, shift, 2, 3)
        np.testing.assert_allclose(o1, o2, rtol=1e-13)
        np.testing.assert_array_equal(i1, i2)
        g = rng.standard_normal(o1.shape)
        np.testing.assert_allclose(self.cc.affine_selu_maxpool_backward(x, scale, shift, i1, g),
                                   py.affine_selu_maxpool_backward(x, scale, shift, i2, g), rtol=1e-13)


class TestBackendSelection:
    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.get_backend("gpu")

    def test_pure_python_env(self):
        env = dict(os.environ, SPOOFMAMBA_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "from spoofmamba import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"

    @needs_compiled
    def test_compiled_is_default(self):
        env = {k: v for k, v in os.environ.items() if k != "SPOOFMAMBA_PURE_PYTHON"}
        out = subprocess.run([sys.executable, "-c", "from spoofmamba import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "compiled"
