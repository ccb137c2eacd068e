"""Pure numpy implementations of the hot kernels (fallback backend).

The compiled module ``_ckernels`` exposes the same functions with the same
signatures; ``fbmlab.kernels`` picks one at import time.
"""
import numpy as np


def holder_seminorm(times, values, gamma):
    """max_{v<u} |f(u) - f(v)| / (u - v)^gamma, with ``values`` shaped (K, d)."""
    best = 0.0
    for lag in range(1, len(times)):
        num = np.sqrt(np.sum((values[lag:] - values[:-lag]) ** 2, axis=1))
        ratio = num / (times[lag:] - times[:-lag]) ** gamma
        best = max(best, float(ratio.max()))
    return best


def propagate_dbeta(A, A2, Q, Q2, jump, c, heun=True):
    """Solve the linearised beta equation from every start node.

    Shapes (P paths, N cells, n dimension):
      A, A2     (P, N, n, n)        increment-contracted generator at the left
                                    and right node of each cell
      Q, Q2     (P, N, n, n, n)     source coefficients, indexed [b, i, j]
      jump      (P, N+1, n, n, n)   initial values, indexed [s, m, i, j]
      c         (P, N+1, n, n)      J^-1 V at the start node, indexed [s, b, m]
    Returns Y with shape (P, N+1, n, N+1, n, n), ``Y[p, s, m, v] = D^m_s beta(v)``
    (zero for v < s).
    """
    P, N, n, _ = A.shape
    out = np.zeros((P, N + 1, n, N + 1, n, n))
    cur = np.zeros((P, N + 1, n, n, n))
    for v in range(N):
        cur[:, v] = jump[:, v]
        out[:, v, :, v] = jump[:, v]
        Y = cur[:, : v + 1]
        cs = c[:, : v + 1]
        src1 = np.einsum("pbij,psbm->psmij", Q[:, v], cs)
        k1 = np.einsum("pik,psmkj->psmij", A[:, v], Y) + src1
        if heun:
            src2 = np.einsum("pbij,psbm->psmij", Q2[:, v], cs)
            k2 = np.einsum("pik,psmkj->psmij", A2[:, v], Y + k1) + src2
            Y += 0.5 * (k1 + k2)
        else:
            Y += k1
        out[:, : v + 1, :, v + 1] = Y
    out[:, N, :, N] = jump[:, N]
    return out
