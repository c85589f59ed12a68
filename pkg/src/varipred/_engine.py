"""Compiled NUTS transition.

Same algorithm and random-number consumption order as ``sampler._Kernel``,
but the recursive doubling is unrolled into a stack of pending subtrees so
the whole transition runs inside numba. The target is a jitted function
``fn(q, data) -> (log_density, gradient)``.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

DIVERGENCE_THRESHOLD = 1000.0


@nb.njit(cache=True, error_model="numpy")
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@nb.njit(cache=True, error_model="numpy")
def _dot(a, b):
    s = 0.0
    for i in range(a.size):
        s += a[i] * b[i]
    return s


@nb.njit(cache=True, error_model="numpy")
def _criterion(ps_a, ps_b, r1, r2):
    """U-turn test against the momentum sum ``r1 + r2``."""
    sa = 0.0
    sb = 0.0
    for i in range(r1.size):
        r = r1[i] + r2[i]
        sa += ps_a[i] * r
        sb += ps_b[i] * r
    return sa > 0.0 and sb > 0.0


@nb.njit(cache=True, error_model="numpy")
def _put(dst, row, src):
    for i in range(src.size):
        dst[row, i] = src[i]


@nb.njit(cache=True, error_model="numpy")
def _move(arr, dst_row, src_row):
    for i in range(arr.shape[1]):
        arr[dst_row, i] = arr[src_row, i]


@nb.njit(error_model="numpy")
def transition(fn, data, q0, lp0, g0, step, inv, rng, max_depth):
    dim = q0.size
    p0 = rng.standard_normal(dim)
    for i in range(dim):
        p0[i] = p0[i] / math.sqrt(inv[i])
    ps0 = inv * p0
    h0 = -lp0 + 0.5 * _dot(p0, ps0)

    # edges of the whole trajectory: row 0 = left, row 1 = right
    edge_q = np.empty((2, dim))
    edge_p = np.empty((2, dim))
    edge_g = np.empty((2, dim))
    edge_ps = np.empty((2, dim))
    for s in range(2):
        _put(edge_q, s, q0)
        _put(edge_p, s, p0)
        _put(edge_g, s, g0)
        _put(edge_ps, s, ps0)
    rho = p0.copy()
    log_w = 0.0
    prop_q = q0.copy()
    prop_g = g0.copy()
    prop_lp = lp0

    # pending subtrees; rows are stack slots
    n = max_depth + 1
    st_in_p = np.empty((n, dim))
    st_in_ps = np.empty((n, dim))
    st_out_p = np.empty((n, dim))
    st_out_ps = np.empty((n, dim))
    st_rho = np.empty((n, dim))
    st_q = np.empty((n, dim))
    st_g = np.empty((n, dim))
    st_lp = np.empty(n)
    st_w = np.empty(n)
    st_size = np.empty(n, dtype=np.int64)

    cq = np.empty(dim)
    cp = np.empty(dim)
    cg = np.empty(dim)
    ps = np.empty(dim)
    c_lp = 0.0

    depth = 0
    n_steps = 0
    sum_accept = 0.0
    divergent = False
    while depth < max_depth:
        direction = 1 if rng.random() < 0.5 else -1
        side = 1 if direction == 1 else 0
        for i in range(dim):
            cq[i] = edge_q[side, i]
            cp[i] = edge_p[side, i]
            cg[i] = edge_g[side, i]
        eps = direction * step
        top = 0
        valid = True
        for _leaf in range(1 << depth):
            for i in range(dim):
                cp[i] += 0.5 * eps * cg[i]
                cq[i] += eps * inv[i] * cp[i]
            c_lp, g = fn(cq, data)
            kinetic = 0.0
            for i in range(dim):
                cg[i] = g[i]
                cp[i] += 0.5 * eps * g[i]
                ps[i] = inv[i] * cp[i]
                kinetic += cp[i] * ps[i]
            h = -c_lp + 0.5 * kinetic
            if not math.isfinite(h):
                h = np.inf
            n_steps += 1
            dh = h - h0
            sum_accept += 1.0 if dh <= 0.0 else math.exp(-dh)
            if dh > DIVERGENCE_THRESHOLD:
                divergent = True
                valid = False
                break
            for i in range(dim):
                st_in_p[top, i] = cp[i]
                st_in_ps[top, i] = ps[i]
                st_out_p[top, i] = cp[i]
                st_out_ps[top, i] = ps[i]
                st_rho[top, i] = cp[i]
                st_q[top, i] = cq[i]
                st_g[top, i] = cg[i]
            st_lp[top] = c_lp
            st_w[top] = -dh
            st_size[top] = 1
            top += 1
            while top >= 2 and st_size[top - 1] == st_size[top - 2]:
                a = top - 2
                b = top - 1
                lw = _logaddexp(st_w[a], st_w[b])
                if st_w[b] > lw or rng.random() < math.exp(st_w[b] - lw):
                    _move(st_q, a, b)
                    _move(st_g, a, b)
                    st_lp[a] = st_lp[b]
                st_w[a] = lw
                ok = _criterion(st_in_ps[a], st_out_ps[b], st_rho[a], st_rho[b])
                if ok:
                    ok = _criterion(st_in_ps[a], st_in_ps[b], st_rho[a], st_in_p[b])
                if ok:
                    ok = _criterion(st_out_ps[a], st_out_ps[b], st_rho[b], st_out_p[a])
                for i in range(dim):
                    st_rho[a, i] += st_rho[b, i]
                _move(st_out_p, a, b)
                _move(st_out_ps, a, b)
                st_size[a] *= 2
                top -= 1
                if not ok:
                    valid = False
                    break
            if not valid:
                break
        depth += 1
        if not valid:
            break
        if st_w[0] > log_w or rng.random() < math.exp(st_w[0] - log_w):
            for i in range(dim):
                prop_q[i] = st_q[0, i]
                prop_g[i] = st_g[0, i]
            prop_lp = st_lp[0]
        log_w = _logaddexp(log_w, st_w[0])
        inner = 1 - side
        ok = _criterion(edge_ps[inner], st_out_ps[0], rho, st_rho[0])
        if ok:
            ok = _criterion(edge_ps[inner], st_in_ps[0], rho, st_in_p[0])
        if ok:
            ok = _criterion(edge_ps[side], st_out_ps[0], st_rho[0], edge_p[side])
        for i in range(dim):
            rho[i] += st_rho[0, i]
            edge_q[side, i] = cq[i]
            edge_p[side, i] = cp[i]
            edge_g[side, i] = cg[i]
            edge_ps[side, i] = st_out_ps[0, i]
        if not ok:
            break
    return prop_q, prop_lp, prop_g, sum_accept / max(n_steps, 1), depth, n_steps, divergent
