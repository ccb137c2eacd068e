import os
import subprocess
import sys

import numpy as np
import pytest

from fbmlab import _kernels as python_backend
from fbmlab import kernels

BACKENDS = [pytest.param(python_backend, id="python")]
if kernels.compiled_backend is not None:
    BACKENDS.append(pytest.param(kernels.compiled_backend, id="cython"))


def _dbeta_inputs(P=2, N=6, n=2, seed=0):
    r = np.random.default_rng(seed)
    A, A2 = 0.3 * r.normal(size=(2, P, N, n, n))
    Q, Q2 = 0.3 * r.normal(size=(2, P, N, n, n, n))
    jump = r.normal(size=(P, N + 1, n, n, n))
    c = r.normal(size=(P, N + 1, n, n))
    return A, A2, Q, Q2, jump, c


def _dbeta_loops(A, A2, Q, Q2, jump, c, heun):
    """Scalar-loop reference of the linearised propagation."""
    P, N, n, _ = A.shape
    out = np.zeros((P, N + 1, n, N + 1, n, n))
    for p in range(P):
        for s in range(N + 1):
            for m in range(n):
                Y = jump[p, s, m].copy()
                out[p, s, m, s] = Y
                for v in range(s, N):
                    src = np.einsum("bij,b->ij", Q[p, v], c[p, s, :, m])
                    k1 = A[p, v] @ Y + src
                    if heun:
                        src2 = np.einsum("bij,b->ij", Q2[p, v], c[p, s, :, m])
                        Y = Y + 0.5 * (k1 + A2[p, v] @ (Y + k1) + src2)
                    else:
                        Y = Y + k1
                    out[p, s, m, v + 1] = Y
    return out


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("heun", [True, False])
def test_propagate_dbeta_matches_loops(backend, heun):
    args = _dbeta_inputs()
    out = backend.propagate_dbeta(*[np.ascontiguousarray(a) for a in args], heun=heun)
    assert np.allclose(out, _dbeta_loops(*args, heun), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_holder_seminorm_backend(backend):
    r = np.random.default_rng(3)
    t = np.sort(r.uniform(size=40))
    f = r.normal(size=(40, 3))
    brute = max(np.linalg.norm(f[u] - f[v]) / (t[u] - t[v]) ** 0.4 for u in range(40) for v in range(u))
    assert backend.holder_seminorm(t, f, 0.4) == pytest.approx(brute, rel=1e-13)


@pytest.mark.skipif(kernels.compiled_backend is None, reason="extension not built")
def test_backends_agree_on_large_input():
    args = [np.ascontiguousarray(a) for a in _dbeta_inputs(P=3, N=20, n=3, seed=5)]
    a = python_backend.propagate_dbeta(*args, heun=True)
    b = kernels.compiled_backend.propagate_dbeta(*args, heun=True)
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


def test_pure_python_switch():
    env = dict(os.environ, FBMLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from fbmlab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
