"""Compiled log posterior and gradient of the cause model.

Mirrors ``CauseModel._numpy_log_density_and_gradient`` loop for loop; the two
are checked against each other in the test suite.
"""

import numpy as np
from numba import njit

SIGMA_BETA_SCALE = 1.0
V_SCALE = 3.0
SIGMA_TYPE_SCALE = 0.25


@njit(cache=True, error_model="numpy")
def _cpc_forward(y, K, L):
    L[:, :] = 0.0
    L[0, 0] = 1.0
    logj = 0.0
    pos = 0
    for i in range(1, K):
        logw = 0.0
        for k in range(i):
            z = np.tanh(y[pos + k])
            l1 = np.log1p(-z * z)
            L[i, k] = z * np.exp(logw)
            logw += 0.5 * l1
            logj += (K - k) / 2.0 * l1
        L[i, i] = np.exp(logw)
        pos += i
    return logj


@njit(cache=True, error_model="numpy")
def _cpc_backward(y, K, L, gL, out, off):
    pos = 0
    for i in range(1, K):
        tail = gL[i, i] * L[i, i]
        # walk k downwards so that tail holds sum over j > k
        for k in range(i - 1, -1, -1):
            z = np.tanh(y[pos + k])
            w = L[i, k] / z if z != 0.0 else 0.0
            if z == 0.0:
                w = 1.0
                for j in range(k):
                    zj = np.tanh(y[pos + j])
                    w *= np.sqrt(1.0 - zj * zj)
            out[off + pos + k] = (1.0 - z * z) * gL[i, k] * w - z * tail - z * (K - k)
            tail += gL[i, k] * L[i, k]
        pos += i


@njit(cache=True, error_model="numpy")
def log_density_grad(x, grad, K, R, C, N, y, mask, D, logD, ylogy, obs_region, obs_country,
                     qidx, qtype, n_types, intercept_scale, offset_phi, centered, const):
    J = K + 1
    grad[:] = 0.0
    # slices
    o_b0 = 0
    o_br = o_b0 + K
    o_sb = o_br + R * K
    o_u = o_sb + 1
    o_lv = o_u + C * K
    o_cpc = o_lv + K
    ncpc = K * (K - 1) // 2
    o_q = o_cpc + ncpc
    Nq = 0
    for n in range(N):
        if qidx[n] >= 0:
            Nq += 1
    o_st = o_q + Nq * K
    o_phi = o_st + n_types

    lsb = x[o_sb]
    sb = np.exp(lsb)
    v = np.exp(x[o_lv:o_lv + K])
    st = np.exp(x[o_st:o_st + n_types])
    L = np.empty((K, K))
    logj = _cpc_forward(x[o_cpc:o_cpc + ncpc], K, L)
    A = np.empty((K, K))
    for i in range(K):
        for j in range(K):
            A[i, j] = v[i] * L[i, j]

    U = np.empty((C, K))
    Z = np.empty((C, K))
    if centered:
        for c in range(C):
            for i in range(K):
                U[c, i] = x[o_u + c * K + i]
            for i in range(K):
                s = U[c, i]
                for j in range(i):
                    s -= A[i, j] * Z[c, j]
                Z[c, i] = s / A[i, i]
    else:
        for c in range(C):
            for j in range(K):
                Z[c, j] = x[o_u + c * K + j]
            for i in range(K):
                s = 0.0
                for j in range(i + 1):
                    s += A[i, j] * Z[c, j]
                U[c, i] = s

    lp = const
    geta = np.empty(K)
    full = np.empty(J)
    for n in range(N):
        r = obs_region[n]
        c = obs_country[n]
        qi = qidx[n]
        for k in range(K):
            e = x[o_b0 + k] + sb * x[o_br + r * K + k] + U[c, k]
            if qi >= 0:
                e += st[qtype[qi]] * x[o_q + qi * K + k]
            full[k] = e
        full[K] = 0.0
        phi = x[o_phi + n]
        if offset_phi:
            mx = -np.inf
            for j in range(J):
                if mask[n, j] and full[j] > mx:
                    mx = full[j]
            G = 0.0
            for j in range(J):
                if mask[n, j]:
                    G += np.exp(full[j] - mx)
            logG = mx + np.log(G)
            es = np.exp(phi)
            yf = 0.0
            for j in range(J):
                if mask[n, j]:
                    yf += y[n, j] * full[j]
            lp += yf - D[n] * logG + D[n] * phi - D[n] * es
            for k in range(K):
                if mask[n, k]:
                    geta[k] = y[n, k] - D[n] * np.exp(full[k] - mx) / G
                else:
                    geta[k] = 0.0
            grad[o_phi + n] = D[n] - D[n] * es
        else:
            musum = 0.0
            for j in range(J):
                if mask[n, j]:
                    mu = np.exp(full[j] + phi)
                    lp += y[n, j] * (full[j] + phi) - mu
                    musum += mu
                    if j < K:
                        geta[j] = y[n, j] - mu
                elif j < K:
                    geta[j] = 0.0
            grad[o_phi + n] = D[n] - musum
        for k in range(K):
            g = geta[k]
            grad[o_b0 + k] += g
            grad[o_br + r * K + k] += g  # scaled below
            grad[o_u + c * K + k] += g   # holds dlp/du for now
            if qi >= 0:
                grad[o_q + qi * K + k] += g  # dlp/dq for now

    if offset_phi:
        lp += ylogy

    # intercepts
    if intercept_scale > 0:
        for k in range(K):
            b = x[o_b0 + k]
            lp -= 0.5 * b * b / (intercept_scale * intercept_scale)
            grad[o_b0 + k] -= b / (intercept_scale * intercept_scale)

    # region effects
    gsb = 0.0
    for i in range(R * K):
        raw = x[o_br + i]
        g = grad[o_br + i]
        gsb += g * raw
        grad[o_br + i] = sb * g - raw
        lp -= 0.5 * raw * raw
    lp += -0.5 * (sb / SIGMA_BETA_SCALE) ** 2 + lsb
    grad[o_sb] = sb * gsb - (sb / SIGMA_BETA_SCALE) ** 2 + 1.0

    # country effects
    gA = np.zeros((K, K))
    if centered:
        # w_c = A^{-T} z_c
        W = np.empty(K)
        for c in range(C):
            for i in range(K - 1, -1, -1):
                s = Z[c, i]
                for j in range(i + 1, K):
                    s -= A[j, i] * W[j]
                W[i] = s / A[i, i]
            for i in range(K):
                lp -= 0.5 * Z[c, i] * Z[c, i]
                grad[o_u + c * K + i] -= W[i]
                for j in range(i + 1):
                    gA[i, j] += W[i] * Z[c, j]
        for k in range(K):
            lp -= C * np.log(A[k, k])
            gA[k, k] -= C / A[k, k]
    else:
        for c in range(C):
            gu = grad[o_u + c * K:o_u + (c + 1) * K].copy()
            for j in range(K):
                s = 0.0
                for i in range(j, K):
                    s += gu[i] * A[i, j]
                grad[o_u + c * K + j] = s - Z[c, j]
                lp -= 0.5 * Z[c, j] * Z[c, j]
            for i in range(K):
                for j in range(i + 1):
                    gA[i, j] += gu[i] * Z[c, j]
    gL = np.zeros((K, K))
    for i in range(K):
        gv = 0.0
        for j in range(i + 1):
            gv += gA[i, j] * L[i, j]
            gL[i, j] = v[i] * gA[i, j]
        lp += -0.5 * (v[i] / V_SCALE) ** 2 + x[o_lv + i]
        grad[o_lv + i] = gv * v[i] - (v[i] / V_SCALE) ** 2 + 1.0
    lp += logj
    _cpc_backward(x[o_cpc:o_cpc + ncpc], K, L, gL, grad, o_cpc)

    # quality errors
    if n_types > 0:
        gst = np.zeros(n_types)
        for n in range(N):
            qi = qidx[n]
            if qi < 0:
                continue
            t = qtype[qi]
            for k in range(K):
                raw = x[o_q + qi * K + k]
                g = grad[o_q + qi * K + k]
                gst[t] += g * raw
                grad[o_q + qi * K + k] = st[t] * g - raw
                lp -= 0.5 * raw * raw
        for t in range(n_types):
            lp += -0.5 * (st[t] / SIGMA_TYPE_SCALE) ** 2 + x[o_st + t]
            grad[o_st + t] = gst[t] * st[t] - (st[t] / SIGMA_TYPE_SCALE) ** 2 + 1.0
    return lp
