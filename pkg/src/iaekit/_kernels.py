"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The numba path is the default; set ``IAE_NO_NUMBA=1`` to force the numpy
fallback (or it is selected automatically when numba is unavailable).
``iaekit.cli bench`` compares the two backends.
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("IAE_NO_NUMBA", "0") not in ("", "0")

try:
    if _FORCE_NUMPY:
        raise ImportError("numba disabled by IAE_NO_NUMBA")
    import numba as _nb

    HAVE_NUMBA = True
except ImportError:
    _nb = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# Fused kernel-matrix assembly
#
# K[p, j] = sum_h w2[h] * relu(U[p, h] + V[j, h])
#
# U holds per-source-point features after the first affine layer, V holds the
# per-target-point features (bias folded in).  The fused form never
# materialises the (P, m, h) activation; the backward pass recomputes the
# relu mask instead, keeping memory at O(P*m).
# ---------------------------------------------------------------------------


def _kernel_matrix_fwd_np(U, V, w2):
    P, h = U.shape
    m = V.shape[0]
    K = np.empty((P, m), dtype=np.float64)
    # chunk source points to bound the (chunk, m, h) temporary
    chunk = max(1, int(4_000_000 // max(1, m * h)))
    for start in range(0, P, chunk):
        stop = min(P, start + chunk)
        H = U[start:stop, None, :] + V[None, :, :]
        np.maximum(H, 0.0, out=H)
        K[start:stop] = H @ w2
    return K


def _kernel_matrix_bwd_np(U, V, w2, gK):
    P, h = U.shape
    m = V.shape[0]
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)
    gw2 = np.zeros_like(w2)
    chunk = max(1, int(4_000_000 // max(1, m * h)))
    for start in range(0, P, chunk):
        stop = min(P, start + chunk)
        H = U[start:stop, None, :] + V[None, :, :]
        mask = H > 0.0
        np.maximum(H, 0.0, out=H)
        g = gK[start:stop]
        gw2 += np.einsum("pm,pmh->h", g, H)
        GH = (g[:, :, None] * w2[None, None, :]) * mask
        gU[start:stop] = GH.sum(axis=1)
        gV += GH.sum(axis=0)
    return gU, gV, gw2


if HAVE_NUMBA:

    @_nb.njit(cache=True, fastmath=False)
    def _kernel_matrix_fwd_nb(U, V, w2):
        P, h = U.shape
        m = V.shape[0]
        K = np.empty((P, m), dtype=np.float64)
        for p in range(P):
            for j in range(m):
                acc = 0.0
                for k in range(h):
                    z = U[p, k] + V[j, k]
                    if z > 0.0:
                        acc += w2[k] * z
                K[p, j] = acc
        return K

    @_nb.njit(cache=True, fastmath=False)
    def _kernel_matrix_bwd_nb(U, V, w2, gK):
        P, h = U.shape
        m = V.shape[0]
        gU = np.zeros((P, h), dtype=np.float64)
        gV = np.zeros((m, h), dtype=np.float64)
        gw2 = np.zeros(h, dtype=np.float64)
        for p in range(P):
            for j in range(m):
                g = gK[p, j]
                if g == 0.0:
                    continue
                for k in range(h):
                    z = U[p, k] + V[j, k]
                    if z > 0.0:
                        gw2[k] += g * z
                        gu = g * w2[k]
                        gU[p, k] += gu
                        gV[j, k] += gu
        return gU, gV, gw2


# ---------------------------------------------------------------------------
# Five-point variable-coefficient stencil (flux form) for the Darcy solver.
# Operates on interior unknowns u (n, n); face coefficients are precomputed.
# ---------------------------------------------------------------------------


def _stencil_matvec_np(ae, aw, an, as_, u, h2):
    n = u.shape[0]
    up = np.zeros((n + 2, n + 2), dtype=np.float64)
    up[1:-1, 1:-1] = u
    c = up[1:-1, 1:-1]
    out = (
        ae * (c - up[2:, 1:-1])
        + aw * (c - up[:-2, 1:-1])
        + an * (c - up[1:-1, 2:])
        + as_ * (c - up[1:-1, :-2])
    ) / h2
    return out


if HAVE_NUMBA:

    @_nb.njit(cache=True, fastmath=False)
    def _stencil_matvec_nb(ae, aw, an, as_, u, h2):
        n = u.shape[0]
        out = np.empty((n, n), dtype=np.float64)
        for i in range(n):
            for j in range(n):
                c = u[i, j]
                ue = u[i + 1, j] if i + 1 < n else 0.0
                uw = u[i - 1, j] if i - 1 >= 0 else 0.0
                un = u[i, j + 1] if j + 1 < n else 0.0
                us = u[i, j - 1] if j - 1 >= 0 else 0.0
                out[i, j] = (
                    ae[i, j] * (c - ue)
                    + aw[i, j] * (c - uw)
                    + an[i, j] * (c - un)
                    + as_[i, j] * (c - us)
                ) / h2
        return out


# ---------------------------------------------------------------------------
# Batched tridiagonal (Thomas) solve for natural cubic splines.
# Solves tri(lo, di, up) x = b for each right-hand-side row of b (B, n).
# ---------------------------------------------------------------------------


def _thomas_solve_np(lo, di, up, b):
    n = di.shape[0]
    B = b.shape[0]
    cp = np.empty(n, dtype=np.float64)
    dp = np.empty((B, n), dtype=np.float64)
    cp[0] = up[0] / di[0]
    dp[:, 0] = b[:, 0] / di[0]
    for i in range(1, n):
        denom = di[i] - lo[i] * cp[i - 1]
        cp[i] = up[i] / denom if i < n - 1 else 0.0
        dp[:, i] = (b[:, i] - lo[i] * dp[:, i - 1]) / denom
    x = np.empty_like(dp)
    x[:, n - 1] = dp[:, n - 1]
    for i in range(n - 2, -1, -1):
        x[:, i] = dp[:, i] - cp[i] * x[:, i + 1]
    return x


if HAVE_NUMBA:

    @_nb.njit(cache=True, fastmath=False)
    def _thomas_solve_nb(lo, di, up, b):
        n = di.shape[0]
        B = b.shape[0]
        cp = np.empty(n, dtype=np.float64)
        x = np.empty((B, n), dtype=np.float64)
        for r in range(B):
            dp = np.empty(n, dtype=np.float64)
            cp[0] = up[0] / di[0]
            dp[0] = b[r, 0] / di[0]
            for i in range(1, n):
                denom = di[i] - lo[i] * cp[i - 1]
                cp[i] = up[i] / denom if i < n - 1 else 0.0
                dp[i] = (b[r, i] - lo[i] * dp[i - 1]) / denom
            x[r, n - 1] = dp[n - 1]
            for i in range(n - 2, -1, -1):
                x[r, i] = dp[i] - cp[i] * x[r, i + 1]
        return x


if HAVE_NUMBA:
    kernel_matrix_fwd = _kernel_matrix_fwd_nb
    kernel_matrix_bwd = _kernel_matrix_bwd_nb
    stencil_matvec = _stencil_matvec_nb
    thomas_solve = _thomas_solve_nb
    BACKEND = "numba"
else:
    kernel_matrix_fwd = _kernel_matrix_fwd_np
    kernel_matrix_bwd = _kernel_matrix_bwd_np
    stencil_matvec = _stencil_matvec_np
    thomas_solve = _thomas_solve_np
    BACKEND = "numpy"

# numpy reference implementations are always importable for benchmarking
kernel_matrix_fwd_np = _kernel_matrix_fwd_np
kernel_matrix_bwd_np = _kernel_matrix_bwd_np
stencil_matvec_np = _stencil_matvec_np
thomas_solve_np = _thomas_solve_np
