"""Masked-softmax kernels for the attention op.

The forward is vectorized numpy (SIMD exp beats a scalar loop here). The
backward is a fused numba kernel when numba is importable, with a numpy
fallback of identical semantics (forbidden entries exactly zero). Set
OMNIBOT_NO_NUMBA=1 to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

HAVE_NUMBA = False
if not os.environ.get("OMNIBOT_NO_NUMBA"):
    try:
        import numba

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover
        HAVE_NUMBA = False


if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def layer_norm_fwd(x2, gain, bias, eps, out2, xhat2, inv1):
        """Row-wise normalization. x2: [R, d]; xhat2/inv1 are outputs for bwd."""
        rows, d = x2.shape
        for r in range(rows):
            mu = 0.0
            for j in range(d):
                mu += x2[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                dx = x2[r, j] - mu
                var += dx * dx
            var /= d
            inv = 1.0 / np.sqrt(var + eps)
            inv1[r] = inv
            for j in range(d):
                xh = (x2[r, j] - mu) * inv
                xhat2[r, j] = xh
                out2[r, j] = xh * gain[j] + bias[j]

    @numba.njit(cache=True, fastmath=False)
    def layer_norm_bwd(g2, xhat2, inv1, gain, dx2, dgain, dbias):
        rows, d = g2.shape
        for j in range(d):
            dgain[j] = 0.0
            dbias[j] = 0.0
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gj = g2[r, j]
                xh = xhat2[r, j]
                dgain[j] += gj * xh
                dbias[j] += gj
                dxh = gj * gain[j]
                m1 += dxh
                m2 += dxh * xh
            m1 /= d
            m2 /= d
            inv = inv1[r]
            for j in range(d):
                dx2[r, j] = inv * (g2[r, j] * gain[j] - m1 - xhat2[r, j] * m2)

    @numba.njit(cache=True, fastmath=False)
    def masked_softmax_grad(weights, gw, mask, out):
        """Backward of the masked softmax; forbidden score grads exactly 0."""
        nb, nh, nt, ns = weights.shape
        for b in range(nb):
            for h in range(nh):
                for i in range(nt):
                    dot = 0.0
                    for j in range(ns):
                        dot += weights[b, h, i, j] * gw[b, h, i, j]
                    for j in range(ns):
                        if mask[b, i, j]:
                            out[b, h, i, j] = weights[b, h, i, j] * (gw[b, h, i, j] - dot)
                        else:
                            out[b, h, i, j] = 0.0


def masked_softmax(scores: np.ndarray, additive: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Softmax restricted to permitted keys; forbidden weights exactly 0.

    `additive` carries the -inf sentinel (0 on permitted entries): exp
    underflows forbidden entries to exactly +0.0, and the final multiply
    by the 0/1 `keep` factors is the hard zero rewrite. Mutates `scores`
    in place (callers pass an owned buffer).
    """
    scores += additive
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    scores *= keep
    return scores


def masked_softmax_grad_numpy(weights: np.ndarray, gw: np.ndarray, keep: np.ndarray) -> np.ndarray:
    dot = (weights * gw).sum(axis=-1, keepdims=True)
    gs = np.subtract(gw, dot)
    gs *= weights
    gs *= keep
    return gs
