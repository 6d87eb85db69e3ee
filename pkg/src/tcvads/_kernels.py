"""Compiled inner loops for the decaying-memory time-mixing recurrence.

Both kernels touch each (t, j) element a constant number of times, so cost
is linear in n * d.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def mix_forward(k, v, lam, r0, out_t, out_r):
    """Fill ``out_t`` with sigmoid(k*v + R) and ``out_r`` with the state R_t.

    R_t is the memory entering step t; the returned vector is the state after
    the last step, ready to carry into the next chunk.
    """
    n, d = k.shape
    r = r0.copy()
    for t in range(n):
        for j in range(d):
            u = k[t, j] * v[t, j]
            a = u + r[j]
            if a < -500.0:
                a = -500.0
            elif a > 500.0:
                a = 500.0
            out_r[t, j] = r[j]
            out_t[t, j] = 1.0 / (1.0 + np.exp(-a))
            r[j] = lam[j] * r[j] + u
    return r


@njit(cache=True)
def mix_backward(d_a, k, v, lam, states, g_next, d_k, d_v, d_lam):
    """Reverse-time pass.

    ``d_a`` is the gradient w.r.t. the pre-activation k*v + R. ``g_next`` is the
    gradient flowing into the state after the last step (from a later chunk).
    Returns the gradient w.r.t. the incoming state of the first step.
    """
    n, d = k.shape
    g = g_next.copy()
    for t in range(n - 1, -1, -1):
        for j in range(d):
            # g holds dL/dR_{t+1}; R_{t+1} = lam*R_t + k_t*v_t
            du = d_a[t, j] + g[j]
            d_k[t, j] = du * v[t, j]
            d_v[t, j] = du * k[t, j]
            d_lam[j] += g[j] * states[t, j]
            g[j] = d_a[t, j] + lam[j] * g[j]
    return g
