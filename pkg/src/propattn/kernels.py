"""Hot loops for causal linear attention.

The fused primitive is

    out[i] = sum_{j <= i} (a[i] . b[j]) * v[j]

over the last two axes, batched over any leading axes. It is the
numerator (and, with ``v`` a column of ones, the denominator) of every
causal linear-attention kernel in this package, so it carries its own
backward rule instead of being assembled from autodiff primitives.

Two implementations exist: an explicit running-state loop compiled with
numba, and a chunked numpy version (quadratic inside a chunk, carried
d x e state between chunks). ``PROPATTN_DISABLE_NUMBA=1`` selects numpy.
"""
import numpy as np

from ._jit import USE_NUMBA, njit

CHUNK = 64


def _flat3(x):
    return np.ascontiguousarray(x.reshape((-1,) + x.shape[-2:]), dtype=np.float64)


# ---------------------------------------------------------------------------
# numba path


@njit
def _prefix_fwd_nb(a, b, v):
    B, N, d = a.shape
    e = v.shape[2]
    out = np.zeros((B, N, e))
    for bi in range(B):
        S = np.zeros((d, e))
        for i in range(N):
            for k in range(d):
                bk = b[bi, i, k]
                if bk != 0.0:
                    for m in range(e):
                        S[k, m] += bk * v[bi, i, m]
            for k in range(d):
                ak = a[bi, i, k]
                if ak != 0.0:
                    for m in range(e):
                        out[bi, i, m] += ak * S[k, m]
    return out


@njit
def _prefix_bwd_nb(a, b, v, g):
    B, N, d = a.shape
    e = v.shape[2]
    da = np.zeros((B, N, d))
    db = np.zeros((B, N, d))
    dv = np.zeros((B, N, e))
    for bi in range(B):
        S = np.zeros((d, e))
        for i in range(N):
            for k in range(d):
                for m in range(e):
                    S[k, m] += b[bi, i, k] * v[bi, i, m]
            for k in range(d):
                acc = 0.0
                for m in range(e):
                    acc += S[k, m] * g[bi, i, m]
                da[bi, i, k] = acc
        T = np.zeros((d, e))
        for j in range(N - 1, -1, -1):
            for k in range(d):
                for m in range(e):
                    T[k, m] += a[bi, j, k] * g[bi, j, m]
            for k in range(d):
                acc = 0.0
                for m in range(e):
                    acc += T[k, m] * v[bi, j, m]
                db[bi, j, k] = acc
            for m in range(e):
                acc = 0.0
                for k in range(d):
                    acc += T[k, m] * b[bi, j, k]
                dv[bi, j, m] = acc
    return da, db, dv


# ---------------------------------------------------------------------------
# numpy path


def _prefix_fwd_np(a, b, v, chunk=CHUNK):
    B, N, d = a.shape
    e = v.shape[2]
    out = np.empty((B, N, e))
    S = np.zeros((B, d, e))
    for s in range(0, N, chunk):
        t = min(s + chunk, N)
        ac, bc, vc = a[:, s:t], b[:, s:t], v[:, s:t]
        tri = np.tril(np.ones((t - s, t - s)))
        out[:, s:t] = (ac @ bc.transpose(0, 2, 1) * tri) @ vc + ac @ S
        S += bc.transpose(0, 2, 1) @ vc
    return out


def _prefix_bwd_np(a, b, v, g, chunk=CHUNK):
    B, N, d = a.shape
    e = v.shape[2]
    da = np.empty((B, N, d))
    db = np.empty((B, N, d))
    dv = np.empty((B, N, e))
    S = np.zeros((B, d, e))
    for s in range(0, N, chunk):
        t = min(s + chunk, N)
        bc, vc, gc = b[:, s:t], v[:, s:t], g[:, s:t]
        tri = np.tril(np.ones((t - s, t - s)))
        da[:, s:t] = (gc @ vc.transpose(0, 2, 1) * tri) @ bc + gc @ S.transpose(0, 2, 1)
        S += bc.transpose(0, 2, 1) @ vc
    T = np.zeros((B, d, e))
    starts = list(range(0, N, chunk))
    for s in reversed(starts):
        t = min(s + chunk, N)
        ac, bc, vc, gc = a[:, s:t], b[:, s:t], v[:, s:t], g[:, s:t]
        tri = np.tril(np.ones((t - s, t - s)))
        gv = (gc @ vc.transpose(0, 2, 1) * tri)  # [i, j] = g_i . v_j, j <= i
        ab = (ac @ bc.transpose(0, 2, 1) * tri)
        db[:, s:t] = gv.transpose(0, 2, 1) @ ac + vc @ T.transpose(0, 2, 1)
        dv[:, s:t] = ab.transpose(0, 2, 1) @ gc + bc @ T
        T += ac.transpose(0, 2, 1) @ gc
    return da, db, dv


# ---------------------------------------------------------------------------
# dispatch


def prefix_forward(a, b, v, use_numba=None):
    """Causal prefix product; ``a``, ``b`` are (..., N, d), ``v`` is (..., N, e)."""
    if a.shape != b.shape or a.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"prefix_forward: incompatible shapes {a.shape}, {b.shape}, {v.shape}")
    lead = a.shape[:-2]
    fa, fb, fv = _flat3(a), _flat3(b), _flat3(v)
    use = USE_NUMBA if use_numba is None else use_numba
    out = _prefix_fwd_nb(fa, fb, fv) if use else _prefix_fwd_np(fa, fb, fv)
    return out.reshape(lead + out.shape[-2:])


def prefix_backward(a, b, v, g, use_numba=None):
    """Gradients of ``sum(g * prefix_forward(a, b, v))`` w.r.t. ``a``, ``b``, ``v``."""
    lead = a.shape[:-2]
    fa, fb, fv, fg = _flat3(a), _flat3(b), _flat3(v), _flat3(g)
    use = USE_NUMBA if use_numba is None else use_numba
    da, db, dv = _prefix_bwd_nb(fa, fb, fv, fg) if use else _prefix_bwd_np(fa, fb, fv, fg)
    return (da.reshape(lead + da.shape[-2:]), db.reshape(lead + db.shape[-2:]),
            dv.reshape(lead + dv.shape[-2:]))
