"""Hot numeric kernels with a numba path and a pure-numpy path.

The backend is picked once at import time from ``BYZFED_BACKEND``
(``numba`` or ``numpy``). When unset, numba is used if it imports.
Both implementations of every kernel stay importable under explicit
names (``*_numpy`` / ``*_numba``) so tests and the benchmark can
compare them directly.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("BYZFED_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ImportError(f"BYZFED_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = "numpy" if _requested == "numpy" or not HAVE_NUMBA else "numba"

# |  Weiszfeld on explicit points  |


def weiszfeld_points_numpy(points, z0, max_iter, tol, guard):
    """Weiszfeld iteration on an (L, d) array starting from ``z0``.

    Returns ``(z, iterations, objective_trace)``; the trace holds the
    objective at ``z0`` followed by one value per completed iteration.
    """
    z = z0.copy()
    dist = np.sqrt(((points - z) ** 2).sum(axis=1))
    trace = [dist.sum()]
    it = 0
    while it < max_iter:
        w = 1.0 / np.maximum(dist, guard)
        z_new = (w @ points) / w.sum()
        step = np.sqrt(((z_new - z) ** 2).sum())
        z = z_new
        dist = np.sqrt(((points - z) ** 2).sum(axis=1))
        trace.append(dist.sum())
        it += 1
        if step < tol:
            break
    return z, it, np.asarray(trace)


def _weiszfeld_points_loop(points, z0, max_iter, tol, guard):
    L, d = points.shape
    z = z0.copy()
    dist = np.empty(L)
    trace = np.empty(max_iter + 1)
    for i in range(L):
        s = 0.0
        for j in range(d):
            t = points[i, j] - z[j]
            s += t * t
        dist[i] = np.sqrt(s)
    trace[0] = dist.sum()
    it = 0
    z_new = np.empty(d)
    while it < max_iter:
        z_new[:] = 0.0
        wsum = 0.0
        for i in range(L):
            w = 1.0 / max(dist[i], guard)
            wsum += w
            for j in range(d):
                z_new[j] += w * points[i, j]
        step = 0.0
        for j in range(d):
            z_new[j] /= wsum
            t = z_new[j] - z[j]
            step += t * t
            z[j] = z_new[j]
        for i in range(L):
            s = 0.0
            for j in range(d):
                t = points[i, j] - z[j]
                s += t * t
            dist[i] = np.sqrt(s)
        it += 1
        trace[it] = dist.sum()
        if np.sqrt(step) < tol:
            break
    return z, it, trace[: it + 1].copy()


# |  Weiszfeld in Gram coordinates  |
#
# Every Weiszfeld iterate started from a convex combination of the points
# stays a convex combination z = sum_i w_i z_i, so distances only need the
# Gram matrix G_ij = <z_i, z_j>:
#     ||z - z_j||^2 = w'Gw - 2 (Gw)_j + G_jj


def weiszfeld_gram_numpy(gram, w0, max_iter, tol, guard):
    """Weiszfeld iteration over convex weights given the points' Gram matrix.

    Returns ``(weights, distances, iterations, objective_trace)``.
    """
    w = w0.copy()
    diag = np.diag(gram).copy()

    def dists(w):
        gw = gram @ w
        return np.sqrt(np.maximum(w @ gw - 2.0 * gw + diag, 0.0))

    dist = dists(w)
    trace = [dist.sum()]
    it = 0
    while it < max_iter:
        inv = 1.0 / np.maximum(dist, guard)
        w_new = inv / inv.sum()
        dw = w_new - w
        step = np.sqrt(max(dw @ gram @ dw, 0.0))
        w = w_new
        dist = dists(w)
        trace.append(dist.sum())
        it += 1
        if step < tol:
            break
    return w, dist, it, np.asarray(trace)


def _weiszfeld_gram_loop(gram, w0, max_iter, tol, guard):
    L = gram.shape[0]
    w = w0.copy()
    dist = np.empty(L)
    gw = np.empty(L)
    trace = np.empty(max_iter + 1)

    for i in range(L):
        s = 0.0
        for j in range(L):
            s += gram[i, j] * w[j]
        gw[i] = s
    wgw = 0.0
    for i in range(L):
        wgw += w[i] * gw[i]
    for i in range(L):
        dist[i] = np.sqrt(max(wgw - 2.0 * gw[i] + gram[i, i], 0.0))
    trace[0] = dist.sum()

    it = 0
    w_new = np.empty(L)
    while it < max_iter:
        tot = 0.0
        for i in range(L):
            w_new[i] = 1.0 / max(dist[i], guard)
            tot += w_new[i]
        for i in range(L):
            w_new[i] /= tot
        step2 = 0.0
        for i in range(L):
            di = w_new[i] - w[i]
            for j in range(L):
                step2 += di * gram[i, j] * (w_new[j] - w[j])
        w[:] = w_new
        for i in range(L):
            s = 0.0
            for j in range(L):
                s += gram[i, j] * w[j]
            gw[i] = s
        wgw = 0.0
        for i in range(L):
            wgw += w[i] * gw[i]
        for i in range(L):
            dist[i] = np.sqrt(max(wgw - 2.0 * gw[i] + gram[i, i], 0.0))
        it += 1
        trace[it] = dist.sum()
        if np.sqrt(max(step2, 0.0)) < tol:
            break
    return w, dist, it, trace[: it + 1].copy()


# |  LRCS per-node least squares + gradient  |


def lrcs_node_step_numpy(A, Y, U):
    """Column-wise least squares and the node gradient.

    A: (q, m, n) sensing matrices, Y: (q, m) measurements, U: (n, r).
    Returns ``(B, grad, min_sv)`` with B of shape (r, q), grad (n, r) and
    the smallest singular value over all ``A_k U``.
    """
    q, m, n = A.shape
    r = U.shape[1]
    M = (A.reshape(q * m, n) @ U).reshape(q, m, r)
    Q, R = np.linalg.qr(M)
    min_sv = np.linalg.svd(R, compute_uv=False).min()
    qty = np.einsum("kmr,km->kr", Q, Y)
    Bt = np.linalg.solve(R, qty[:, :, None])[:, :, 0]  # (q, r)
    res = np.einsum("kmr,kr->km", M, Bt) - Y
    W = np.matmul(res[:, None, :], A)[:, 0, :]  # (q, n): A_k^T res_k
    grad = W.T @ Bt
    return Bt.T.copy(), grad, min_sv


def _lrcs_node_step_loop(A, Y, U):
    q, m, n = A.shape
    r = U.shape[1]
    Bt = np.empty((q, r))
    grad = np.zeros((n, r))
    min_sv = np.inf
    R = np.empty((r, r))
    for k in range(q):
        Ak = A[k]
        M = Ak @ U  # (m, r)
        V = np.empty((m, r + 1))
        V[:, :r] = M
        V[:, r] = Y[k]
        # Modified Gram-Schmidt on the augmented matrix [M | y]; the last
        # column's projections give Q^T y (Bjorck's stable LS variant).
        qty = np.empty(r)
        R[:, :] = 0.0
        for j in range(r):
            nrm = 0.0
            for i in range(m):
                nrm += V[i, j] * V[i, j]
            nrm = np.sqrt(nrm)
            R[j, j] = nrm
            if nrm > 0.0:
                for i in range(m):
                    V[i, j] /= nrm
            for c in range(j + 1, r + 1):
                s = 0.0
                for i in range(m):
                    s += V[i, j] * V[i, c]
                if c < r:
                    R[j, c] = s
                else:
                    qty[j] = s
                for i in range(m):
                    V[i, c] -= s * V[i, j]
        sv = np.linalg.svd(R)[1]
        smin = sv[r - 1]
        if smin < min_sv:
            min_sv = smin
        b = np.empty(r)
        for j in range(r - 1, -1, -1):
            s = qty[j]
            for c in range(j + 1, r):
                s -= R[j, c] * b[c]
            b[j] = s / R[j, j] if R[j, j] != 0.0 else 0.0
        Bt[k] = b
        res = M @ b - Y[k]
        wk = Ak.T @ res
        for i in range(n):
            for j in range(r):
                grad[i, j] += wk[i] * b[j]
    return Bt.T.copy(), grad, min_sv


def backproject_numpy(A, Y):
    """Stack ``A_k^T y_k`` as the columns of an (n, q) matrix."""
    return np.matmul(Y[:, None, :], A)[:, 0, :].T.copy()


def _backproject_loop(A, Y):
    q, m, n = A.shape
    out = np.empty((n, q))
    for k in range(q):
        out[:, k] = A[k].T @ Y[k]
    return out


if HAVE_NUMBA:
    weiszfeld_points_numba = njit(cache=True)(_weiszfeld_points_loop)
    weiszfeld_gram_numba = njit(cache=True)(_weiszfeld_gram_loop)
    lrcs_node_step_numba = njit(cache=True)(_lrcs_node_step_loop)
    backproject_numba = njit(cache=True)(_backproject_loop)
else:  # pragma: no cover
    weiszfeld_points_numba = None
    weiszfeld_gram_numba = None
    lrcs_node_step_numba = None
    backproject_numba = None


def _pick(name):
    return globals()[f"{name}_{BACKEND}"]


def weiszfeld_points(points, z0, max_iter, tol, guard):
    return _pick("weiszfeld_points")(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(z0, dtype=np.float64),
        int(max_iter),
        float(tol),
        float(guard),
    )


def weiszfeld_gram(gram, w0, max_iter, tol, guard):
    return _pick("weiszfeld_gram")(
        np.ascontiguousarray(gram, dtype=np.float64),
        np.ascontiguousarray(w0, dtype=np.float64),
        int(max_iter),
        float(tol),
        float(guard),
    )


def lrcs_node_step(A, Y, U):
    return _pick("lrcs_node_step")(
        np.ascontiguousarray(A, dtype=np.float64),
        np.ascontiguousarray(Y, dtype=np.float64),
        np.ascontiguousarray(U, dtype=np.float64),
    )


def backproject(A, Y):
    return _pick("backproject")(
        np.ascontiguousarray(A, dtype=np.float64),
        np.ascontiguousarray(Y, dtype=np.float64),
    )
