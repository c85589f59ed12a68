"""Compiled log posterior and gradient for :class:`model.VariabilityModel`.

Mirrors ``VariabilityModel._evaluate`` term for term; the numpy version is
the reference the tests compare against.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG_PI = math.log(math.pi)


@nb.njit(cache=True, error_model="numpy")
def digamma(x):
    result = 0.0
    while x < 6.0:
        result -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    result += (
        math.log(x)
        - 0.5 * inv
        - inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 / 132))))
    )
    return result


@nb.njit(cache=True, error_model="numpy")
def _safe_exp(u):
    return math.exp(u) if u < 700.0 else np.inf


@nb.njit(cache=True, error_model="numpy")
def log_density_and_grad(theta, data):
    (subj, v, x, counts, vbar, ss, z, y, med, dims, prior) = data
    n = dims[0]
    p = dims[1]
    kz = dims[2]
    n_alpha = dims[3]
    mediation = dims[4] == 1
    n_obs = v.size
    coef_mean = prior[0]
    coef_sd = prior[1]
    hc_loc = prior[2]
    hc_scale = prior[3]
    hc_norm = prior[4]

    o_mu = 4
    o_ls = o_mu + n
    o_v = o_ls + n
    o_yb = o_v + p
    o_ym = o_yb + kz
    o_ya = o_ym + (1 if mediation else 0)
    o_sy = o_ya + n_alpha
    o_mb = o_sy + 1
    o_ma = o_mb + kz
    o_sm = o_ma + n_alpha

    grad = np.zeros(theta.size)
    mu_mu = theta[0]
    sig_mu = _safe_exp(theta[1])
    shape = _safe_exp(theta[2])
    rate = _safe_exp(theta[3])

    sig = np.empty(n)
    inv_var = np.empty(n)
    sum_lsig = 0.0
    sum_sig = 0.0
    for j in range(n):
        ls = theta[o_ls + j]
        sig[j] = _safe_exp(ls)
        inv_var[j] = 1.0 / (sig[j] * sig[j]) if sig[j] < np.inf else 0.0
        sum_lsig += ls
        sum_sig += sig[j]

    # observations
    lp = -0.5 * LOG_2PI * n_obs
    q = np.zeros(n)
    if p > 0:
        for i in range(n_obs):
            j = subj[i]
            r = v[i] - theta[o_mu + j]
            for c in range(p):
                r -= x[i, c] * theta[o_v + c]
            q[j] += r * r
            w = r * inv_var[j]
            grad[o_mu + j] += w
            for c in range(p):
                grad[o_v + c] += x[i, c] * w
    else:
        for j in range(n):
            d = vbar[j] - theta[o_mu + j]
            q[j] = ss[j] + counts[j] * d * d
            grad[o_mu + j] += counts[j] * d * inv_var[j]
    for j in range(n):
        lp -= counts[j] * theta[o_ls + j] + 0.5 * q[j] * inv_var[j]
        grad[o_ls + j] += -counts[j] + q[j] * inv_var[j]

    # subject means
    zz = 0.0
    zsum = 0.0
    for j in range(n):
        zj = (theta[o_mu + j] - mu_mu) / sig_mu
        zz += zj * zj
        zsum += zj
        grad[o_mu + j] -= zj / sig_mu
    lp += -0.5 * LOG_2PI * n - n * theta[1] - 0.5 * zz
    grad[0] += zsum / sig_mu
    grad[1] += -n + zz

    # subject SDs
    if shape < np.inf:
        lp += n * (shape * theta[3] - math.lgamma(shape))
    else:
        lp = -np.inf
    lp += (shape - 1.0) * sum_lsig - rate * sum_sig
    for j in range(n):
        grad[o_ls + j] += (shape - 1.0) - rate * sig[j]
    grad[2] += shape * (n * theta[3] - n * digamma(shape) + sum_lsig)
    grad[3] += n * shape - rate * sum_sig

    # outcome regression
    lp += _regression(theta, grad, z, y, med, sig, n, kz, n_alpha, o_mu, o_ls, o_yb, o_ya,
                      o_sy, o_ym if mediation else -1)
    if mediation:
        lp += _regression(theta, grad, z, med, med, sig, n, kz, n_alpha, o_mu, o_ls, o_mb,
                          o_ma, o_sm, -1)

    # normal priors
    inv_sd2 = 1.0 / (coef_sd * coef_sd)
    norm_const = -0.5 * LOG_2PI - math.log(coef_sd)
    lp += _normal_block(theta, grad, 0, 1, coef_mean, inv_sd2, norm_const)
    lp += _normal_block(theta, grad, o_v, o_sy, coef_mean, inv_sd2, norm_const)
    if mediation:
        lp += _normal_block(theta, grad, o_mb, o_sm, coef_mean, inv_sd2, norm_const)

    # half-Cauchy priors and log-Jacobians of the exp transforms
    lp += _half_cauchy(theta, grad, 1, hc_loc, hc_scale, hc_norm)
    lp += _half_cauchy(theta, grad, 2, hc_loc, hc_scale, hc_norm)
    lp += _half_cauchy(theta, grad, 3, hc_loc, hc_scale, hc_norm)
    lp += _half_cauchy(theta, grad, o_sy, hc_loc, hc_scale, hc_norm)
    if mediation:
        lp += _half_cauchy(theta, grad, o_sm, hc_loc, hc_scale, hc_norm)
    lp += sum_lsig
    for j in range(n):
        grad[o_ls + j] += 1.0

    if not math.isfinite(lp):
        return -np.inf, grad
    for i in range(grad.size):
        if not math.isfinite(grad[i]):
            return -np.inf, grad
    return lp, grad


@nb.njit(cache=True, error_model="numpy")
def _regression(theta, grad, z, y, med, sig, n, kz, n_alpha, o_mu, o_ls, o_b, o_a, o_s, o_m):
    u = theta[o_s]
    inv_v = math.exp(-2.0 * u)
    a1 = theta[o_a]
    a2 = theta[o_a + 1] if n_alpha == 2 else 0.0
    bm = theta[o_m] if o_m >= 0 else 0.0
    ee = 0.0
    for j in range(n):
        pred = a1 * sig[j]
        for c in range(kz):
            pred += z[j, c] * theta[o_b + c]
        if n_alpha == 2:
            pred += a2 * theta[o_mu + j]
        if o_m >= 0:
            pred += bm * med[j]
        e = y[j] - pred
        ee += e * e
        w = e * inv_v
        for c in range(kz):
            grad[o_b + c] += z[j, c] * w
        grad[o_a] += sig[j] * w
        grad[o_ls + j] += a1 * sig[j] * w
        if n_alpha == 2:
            grad[o_a + 1] += theta[o_mu + j] * w
            grad[o_mu + j] += a2 * w
        if o_m >= 0:
            grad[o_m] += med[j] * w
    grad[o_s] += -n + ee * inv_v
    return -0.5 * LOG_2PI * n - n * u - 0.5 * ee * inv_v


@nb.njit(cache=True, error_model="numpy")
def _normal_block(theta, grad, start, stop, mean, inv_sd2, norm_const):
    lp = 0.0
    for i in range(start, stop):
        d = theta[i] - mean
        lp += norm_const - 0.5 * d * d * inv_sd2
        grad[i] -= d * inv_sd2
    return lp


@nb.njit(cache=True, error_model="numpy")
def _half_cauchy(theta, grad, i, loc, scale, norm):
    u = theta[i]
    xv = _safe_exp(u)
    zc = (xv - loc) / scale
    lp = norm - LOG_PI - math.log(scale) - math.log1p(zc * zc) + u
    grad[i] += xv * (-2.0 * zc / (scale * (1.0 + zc * zc))) + 1.0
    return lp
