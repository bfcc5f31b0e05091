"""Compiled inner loops: Kalman smoothing and pseudo-observation updates.

Everything here is numba-compiled with ``nogil=True`` so that independent
chains (and disjoint observation ranges) can run concurrently from a thread
pool.  All functions are deterministic: no reduction order depends on how
work is partitioned across threads.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)

# likelihood codes
LIK_PROBIT = 0
LIK_LOGIT = 1
LIK_ORDINAL_PROBIT = 2
LIK_POISSON_EXP = 3
LIK_GAUSSIAN = 4

# objective codes
OBJ_EP = 0
OBJ_KL = 1


# ---------------------------------------------------------------------------
# scalar normal helpers
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def log_ndtr(z):
    """log of the standard normal CDF, stable over the whole real line."""
    if z >= 0.0:
        return math.log1p(-0.5 * math.erfc(z * _INV_SQRT2))
    if z > -36.0:
        return math.log(0.5 * math.erfc(-z * _INV_SQRT2))
    # asymptotic tail expansion
    zi = 1.0 / (z * z)
    series = zi * (-1.0 + zi * (3.0 - 15.0 * zi))
    return -0.5 * z * z - 0.5 * LOG_2PI - math.log(-z) + math.log1p(series)


@njit(cache=True, nogil=True)
def mills(z):
    """Inverse Mills ratio pdf(z)/cdf(z)."""
    return math.exp(-0.5 * z * z - 0.5 * LOG_2PI - log_ndtr(z))


# ---------------------------------------------------------------------------
# observation log-densities and their derivatives in the score difference
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def log_pdf(code, param, y, d):
    if code == LIK_PROBIT:
        return log_ndtr(y * d)
    if code == LIK_LOGIT:
        t = -y * d
        if t > 0.0:
            return -(t + math.log1p(math.exp(-t)))
        return -math.log1p(math.exp(t))
    if code == LIK_ORDINAL_PROBIT:
        if y != 0.0:
            return log_ndtr(y * d - param)
        # tie mass is even in d; |d| keeps the CDF terms separated in logs
        dm = abs(d)
        la = log_ndtr(param - dm)
        lb = log_ndtr(-dm - param)
        return la + math.log1p(-math.exp(lb - la))
    if code == LIK_POISSON_EXP:
        return y * d - np.exp(d) - math.lgamma(y + 1.0)
    # gaussian; param is the observation noise variance
    r = y - d
    return -0.5 * (LOG_2PI + math.log(param)) - 0.5 * r * r / param


@njit(cache=True, nogil=True)
def dlog_pdf(code, param, y, d):
    if code == LIK_PROBIT:
        return y * mills(y * d)
    if code == LIK_LOGIT:
        return y / (1.0 + math.exp(y * d))
    if code == LIK_ORDINAL_PROBIT:
        if y != 0.0:
            return y * mills(y * d - param)
        lp = log_pdf(code, param, y, d)
        a = d - param
        b = -d - param
        ra = math.exp(-0.5 * a * a - 0.5 * LOG_2PI - lp)
        rb = math.exp(-0.5 * b * b - 0.5 * LOG_2PI - lp)
        return rb - ra
    if code == LIK_POISSON_EXP:
        return y - np.exp(d)
    return (y - d) / param


@njit(cache=True, nogil=True)
def d2log_pdf(code, param, y, d):
    if code == LIK_PROBIT:
        z = y * d
        r = mills(z)
        return -r * (z + r)
    if code == LIK_LOGIT:
        p = 1.0 / (1.0 + math.exp(-d))
        return -p * (1.0 - p)
    if code == LIK_ORDINAL_PROBIT:
        if y != 0.0:
            z = y * d - param
            r = mills(z)
            return -r * (z + r)
        lp = log_pdf(code, param, y, d)
        a = d - param
        b = -d - param
        ra = math.exp(-0.5 * a * a - 0.5 * LOG_2PI - lp)
        rb = math.exp(-0.5 * b * b - 0.5 * LOG_2PI - lp)
        g = rb - ra
        return a * ra + b * rb - g * g
    if code == LIK_POISSON_EXP:
        return -np.exp(d)
    return -1.0 / param


# ---------------------------------------------------------------------------
# EP log-partition and reverse-KL expected log-likelihood, with derivatives
# taken in the (cavity or posterior) mean of the score difference
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def ep_stats(code, param, y, mu, var, ghx, ghlw):
    """(log Z, dlogZ/dmu, d2logZ/dmu2) for Z = E_{N(mu,var)}[p(y|u)]."""
    if code == LIK_PROBIT or (code == LIK_ORDINAL_PROBIT and y != 0.0):
        margin = param if code == LIK_ORDINAL_PROBIT else 0.0
        s2 = 1.0 + var
        s = math.sqrt(s2)
        z = (y * mu - margin) / s
        r = mills(z)
        return log_ndtr(z), y * r / s, -r * (z + r) / s2
    if code == LIK_ORDINAL_PROBIT:
        # tie: Z = Phi(-a) - Phi(b), computed from |mu| (Z is even in mu)
        s2 = 1.0 + var
        s = math.sqrt(s2)
        a = (mu - param) / s
        b = (-mu - param) / s
        am = (abs(mu) - param) / s
        bm = (-abs(mu) - param) / s
        la = log_ndtr(-am)
        lb = log_ndtr(bm)
        logz = la + math.log1p(-math.exp(lb - la))
        ra = math.exp(-0.5 * a * a - 0.5 * LOG_2PI - logz)
        rb = math.exp(-0.5 * b * b - 0.5 * LOG_2PI - logz)
        d1 = (rb - ra) / s
        d2 = (a * ra + b * rb) / s2 - d1 * d1
        return logz, d1, d2
    if code == LIK_GAUSSIAN:
        v = param + var
        r = y - mu
        logz = -0.5 * (LOG_2PI + math.log(v)) - 0.5 * r * r / v
        return logz, r / v, -1.0 / v
    # adaptive quadrature (logit, poisson-exp): first pass centered on the
    # cavity estimates the tilted moments; the second pass recenters there
    # with importance correction and reads off log Z and the moments
    sig = math.sqrt(2.0 * var)
    n = ghx.shape[0]
    lmax = -np.inf
    for i in range(n):
        ll = ghlw[i] + log_pdf(code, param, y, mu + sig * ghx[i])
        if ll > lmax:
            lmax = ll
    zsum = 0.0
    m1 = 0.0
    m2 = 0.0
    for i in range(n):
        du = sig * ghx[i]
        w = math.exp(ghlw[i] + log_pdf(code, param, y, mu + du) - lmax)
        zsum += w
        m1 += w * du
        m2 += w * du * du
    m1 /= zsum
    m2 /= zsum
    center = mu + m1
    spread = m2 - m1 * m1
    floor = 1e-12 * var
    if spread < floor:
        spread = floor
    sig2 = math.sqrt(2.0 * spread)
    half_logratio = 0.5 * math.log(spread / var)
    lmax = -np.inf
    for i in range(n):
        u = center + sig2 * ghx[i]
        diff = u - mu
        dc = u - center
        ll = ghlw[i] + log_pdf(code, param, y, u) + half_logratio \
            - 0.5 * diff * diff / var + 0.5 * dc * dc / spread
        if ll > lmax:
            lmax = ll
    # two derivative identities with complementary stability: tilted
    # moments (polynomial integrands, but cancel as var -> 0) vs tilted
    # expectations of the log-density derivatives (exact at tiny var)
    small = var < 1e-6
    zsum = 0.0
    e1 = 0.0
    e2 = 0.0
    for i in range(n):
        u = center + sig2 * ghx[i]
        diff = u - mu
        dc = u - center
        ll = ghlw[i] + log_pdf(code, param, y, u) + half_logratio \
            - 0.5 * diff * diff / var + 0.5 * dc * dc / spread
        w = math.exp(ll - lmax)
        zsum += w
        if small:
            g1 = dlog_pdf(code, param, y, u)
            g2 = d2log_pdf(code, param, y, u)
            e1 += w * g1
            e2 += w * (g2 + g1 * g1)
        else:
            e1 += w * diff
            e2 += w * diff * diff
    e1 /= zsum
    e2 /= zsum
    logz = lmax + math.log(zsum)
    if small:
        return logz, e1, e2 - e1 * e1
    return logz, e1 / var, (e2 - e1 * e1) / (var * var) - 1.0 / var


@njit(cache=True, nogil=True)
def kl_stats(code, param, y, mu, var, ghx, ghwn):
    """(L, dL/dmu, d2L/dmu2) for L = E_{N(mu,var)}[log p(y|u)].

    The mu-derivatives equal the expectations of the u-derivatives of the
    integrand (Gaussian shift identities), which keeps the quadrature exact
    for polynomially-bounded integrands.
    """
    if code == LIK_GAUSSIAN:
        r = y - mu
        val = -0.5 * (LOG_2PI + math.log(param)) - 0.5 * (r * r + var) / param
        return val, r / param, -1.0 / param
    sig = math.sqrt(2.0 * var)
    n = ghx.shape[0]
    acc0 = 0.0
    acc1 = 0.0
    acc2 = 0.0
    for i in range(n):
        u = mu + sig * ghx[i]
        w = ghwn[i]
        acc0 += w * log_pdf(code, param, y, u)
        acc1 += w * dlog_pdf(code, param, y, u)
        acc2 += w * d2log_pdf(code, param, y, u)
    return acc0, acc1, acc2


# ---------------------------------------------------------------------------
# Kalman filtering + RTS smoothing against natural-parameter pseudo-obs
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def filter_smooth_1d(a_link, q_link, m0, p0, alpha, beta, fm, fp, sm, sp):
    """Scalar-state chain (order-1 kernels).  Returns the log-normalizer."""
    n = alpha.shape[0]
    lognorm = 0.0
    mp = m0
    pp = p0
    for i in range(n):
        if i > 0:
            a = a_link[i - 1]
            mp = a * fm[i - 1]
            pp = a * a * fp[i - 1] + q_link[i - 1]
        b = beta[i]
        if b > 0.0:
            den = 1.0 + pp * b
            r = alpha[i] - b * mp
            lognorm += 0.5 * (math.log(b) - math.log(den) - LOG_2PI) \
                - 0.5 * r * r / (b * den)
            fm[i] = mp + pp * r / den
            fp[i] = pp / den
        else:
            fm[i] = mp
            fp[i] = pp
    if n > 0:
        sm[n - 1] = fm[n - 1]
        sp[n - 1] = fp[n - 1]
        for i in range(n - 2, -1, -1):
            a = a_link[i]
            ppred = a * a * fp[i] + q_link[i]
            g = fp[i] * a / ppred if ppred > 0.0 else 0.0
            sm[i] = fm[i] + g * (sm[i + 1] - a * fm[i])
            sp[i] = fp[i] + g * g * (sp[i + 1] - ppred)
    return lognorm


@njit(cache=True, nogil=True)
def filter_smooth_nd(A, Q, h, m0, P0, alpha, beta, fm, fP, sm, sP):
    """General-order chain.  Same contract as the 1-d version.

    The smoother gain uses a pseudo-inverse because degenerate links are
    legal (a linear-trend component has a rank-one state covariance).
    """
    n = alpha.shape[0]
    K = h.shape[0]
    lognorm = 0.0
    mp = m0.copy()
    Pp = P0.copy()
    tmp = np.empty((K, K))
    Ph = np.empty(K)
    for i in range(n):
        if i > 0:
            Ai = A[i - 1]
            Qi = Q[i - 1]
            for j in range(K):
                acc = 0.0
                for l in range(K):
                    acc += Ai[j, l] * fm[i - 1, l]
                mp[j] = acc
            for j in range(K):
                for k in range(K):
                    acc = 0.0
                    for l in range(K):
                        acc += Ai[j, l] * fP[i - 1, l, k]
                    tmp[j, k] = acc
            for j in range(K):
                for k in range(K):
                    acc = Qi[j, k]
                    for l in range(K):
                        acc += tmp[j, l] * Ai[k, l]
                    Pp[j, k] = acc
            for j in range(K):
                for k in range(j + 1, K):
                    v = 0.5 * (Pp[j, k] + Pp[k, j])
                    Pp[j, k] = v
                    Pp[k, j] = v
        b = beta[i]
        if b > 0.0:
            s2 = 0.0
            mh = 0.0
            for j in range(K):
                acc = 0.0
                for l in range(K):
                    acc += Pp[j, l] * h[l]
                Ph[j] = acc
            for j in range(K):
                s2 += h[j] * Ph[j]
                mh += h[j] * mp[j]
            den = 1.0 + s2 * b
            r = alpha[i] - b * mh
            lognorm += 0.5 * (math.log(b) - math.log(den) - LOG_2PI) \
                - 0.5 * r * r / (b * den)
            c1 = r / den
            c2 = b / den
            for j in range(K):
                fm[i, j] = mp[j] + Ph[j] * c1
                for k in range(K):
                    fP[i, j, k] = Pp[j, k] - c2 * Ph[j] * Ph[k]
        else:
            for j in range(K):
                fm[i, j] = mp[j]
                for k in range(K):
                    fP[i, j, k] = Pp[j, k]
    if n > 0:
        for j in range(K):
            sm[n - 1, j] = fm[n - 1, j]
            for k in range(K):
                sP[n - 1, j, k] = fP[n - 1, j, k]
        dvec = np.empty(K)
        G = np.empty((K, K))
        FAt = np.empty((K, K))
        D = np.empty((K, K))
        GD = np.empty((K, K))
        for i in range(n - 2, -1, -1):
            Ai = A[i]
            Qi = Q[i]
            # predicted covariance to the next node
            for j in range(K):
                for k in range(K):
                    acc = 0.0
                    for l in range(K):
                        acc += Ai[j, l] * fP[i, l, k]
                    tmp[j, k] = acc
            for j in range(K):
                for k in range(K):
                    acc = Qi[j, k]
                    for l in range(K):
                        acc += tmp[j, l] * Ai[k, l]
                    Pp[j, k] = acc
            for j in range(K):
                for k in range(j + 1, K):
                    v = 0.5 * (Pp[j, k] + Pp[k, j])
                    Pp[j, k] = v
                    Pp[k, j] = v
            Pinv = np.linalg.pinv(Pp)
            for j in range(K):
                for k in range(K):
                    acc = 0.0
                    for l in range(K):
                        acc += fP[i, j, l] * Ai[k, l]
                    FAt[j, k] = acc
            for j in range(K):
                for k in range(K):
                    acc = 0.0
                    for l in range(K):
                        acc += FAt[j, l] * Pinv[l, k]
                    G[j, k] = acc
            for j in range(K):
                acc = 0.0
                for l in range(K):
                    acc += Ai[j, l] * fm[i, l]
                dvec[j] = sm[i + 1, j] - acc
            for j in range(K):
                acc = 0.0
                for l in range(K):
                    acc += G[j, l] * dvec[l]
                sm[i, j] = fm[i, j] + acc
            for j in range(K):
                for k in range(K):
                    D[j, k] = sP[i + 1, j, k] - Pp[j, k]
            for j in range(K):
                for k in range(K):
                    acc = 0.0
                    for l in range(K):
                        acc += G[j, l] * D[l, k]
                    GD[j, k] = acc
            for j in range(K):
                for k in range(K):
                    acc = 0.0
                    for l in range(K):
                        acc += GD[j, l] * G[k, l]
                    sP[i, j, k] = fP[i, j, k] + acc
            for j in range(K):
                for k in range(j + 1, K):
                    v = 0.5 * (sP[i, j, k] + sP[i, k, j])
                    sP[i, j, k] = v
                    sP[i, k, j] = v
    return lognorm


# ---------------------------------------------------------------------------
# pseudo-observation updates (one sweep over a range of observations)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def update_sites_range(start, stop, obs_ptr, inc_node, inc_coeff, yv,
                       mu_nodes, var_nodes, alpha, beta,
                       lik_code, lik_param, objective, lam, apply_updates,
                       ghx, ghlw, ghwn, maxw,
                       corr, guard, clamped):
    """Update pseudo-observation parameters for observations [start, stop).

    Each observation reads a snapshot of the node marginals (``mu_nodes``,
    ``var_nodes``) and reads/writes only its own site slots, so disjoint
    ranges can run concurrently.  ``corr[n]`` collects the observation's
    evidence correction  log Z_n - sum_m log N(site_m | cavity_m); ``guard``
    and ``clamped`` record skipped and floor-clamped updates.

    With ``apply_updates == 0`` the sites are left untouched and the
    corrections are evaluated at the current sites (used for reporting the
    log-marginal without advancing the fit).
    """
    cav_m = np.empty(maxw)
    cav_v = np.empty(maxw)
    newa = np.empty(maxw)
    newb = np.empty(maxw)
    skip = np.empty(maxw, dtype=np.uint8)
    for n in range(start, stop):
        lo = obs_ptr[n]
        hi = obs_ptr[n + 1]
        corr[n] = 0.0
        guard[n] = 0
        clamped[n] = 0
        # joint moments of the score difference under the factorized posterior
        mu_q = 0.0
        var_q = 0.0
        for k in range(lo, hi):
            j = inc_node[k]
            x = inc_coeff[k]
            mu_q += x * mu_nodes[j]
            var_q += x * x * var_nodes[j]
        # cavity moments (per feature and for the score difference)
        cav_ok = True
        mu_c = 0.0
        var_c = 0.0
        for k in range(lo, hi):
            j = inc_node[k]
            x = inc_coeff[k]
            v = var_nodes[j]
            if v <= 0.0:
                # node pinned by a zero-variance prior: point mass
                cm = mu_nodes[j]
                cv = 0.0
            else:
                cprec = 1.0 / v - beta[j]
                if cprec <= 0.0:
                    cav_ok = False
                    break
                cv = 1.0 / cprec
                cm = cv * (mu_nodes[j] / v - alpha[j])
            cav_m[k - lo] = cm
            cav_v[k - lo] = cv
            mu_c += x * cm
            var_c += x * x * cv
        if objective == OBJ_EP and not cav_ok:
            guard[n] = 1
            continue
        # candidate site parameters
        nclamp = 0
        if apply_updates == 1:
            if objective == OBJ_EP:
                lz, d1, d2 = ep_stats(lik_code, lik_param, yv[n], mu_c, var_c,
                                      ghx, ghlw)
                ok = True
                for k in range(lo, hi):
                    x = inc_coeff[k]
                    cv = cav_v[k - lo]
                    if cv <= 0.0:
                        skip[k - lo] = 1
                        continue
                    den = 1.0 + cv * x * x * d2
                    if den <= 0.0:
                        ok = False
                        break
                    j = inc_node[k]
                    skip[k - lo] = 0
                    newa[k - lo] = (1.0 - lam) * alpha[j] \
                        + lam * (x * d1 - cav_m[k - lo] * x * x * d2) / den
                    newb[k - lo] = (1.0 - lam) * beta[j] \
                        + lam * (-x * x * d2) / den
                if not ok:
                    guard[n] = 1
                    continue
            else:
                _, d1, d2 = kl_stats(lik_code, lik_param, yv[n], mu_q, var_q,
                                     ghx, ghwn)
                for k in range(lo, hi):
                    j = inc_node[k]
                    x = inc_coeff[k]
                    if var_nodes[j] <= 0.0:
                        skip[k - lo] = 1
                        continue
                    skip[k - lo] = 0
                    newa[k - lo] = (1.0 - lam) * alpha[j] \
                        + lam * (x * d1 - mu_nodes[j] * x * x * d2)
                    newb[k - lo] = (1.0 - lam) * beta[j] \
                        + lam * (-x * x * d2)
            for k in range(lo, hi):
                if skip[k - lo] == 1:
                    continue
                if newb[k - lo] < 0.0:
                    newb[k - lo] = 0.0
                    nclamp += 1
                if newb[k - lo] == 0.0:
                    # a zero-precision site is vacuous; drop its tilt
                    newa[k - lo] = 0.0
        else:
            for k in range(lo, hi):
                j = inc_node[k]
                if cav_ok and cav_v[k - lo] > 0.0:
                    skip[k - lo] = 0
                    newa[k - lo] = alpha[j]
                    newb[k - lo] = beta[j]
                else:
                    skip[k - lo] = 1
        clamped[n] = nclamp
        # evidence correction: log Z under the cavity minus the log-density
        # of each (proper) site under its cavity moments
        if cav_ok:
            lz, _, _ = ep_stats(lik_code, lik_param, yv[n], mu_c, var_c,
                                ghx, ghlw)
            c = lz
            for k in range(lo, hi):
                if skip[k - lo] == 1:
                    continue
                nb = newb[k - lo]
                if nb <= 0.0:
                    continue
                na = newa[k - lo]
                cm = cav_m[k - lo]
                cv = cav_v[k - lo]
                den = 1.0 + nb * cv
                r = na - nb * cm
                c -= 0.5 * (math.log(nb) - math.log(den) - LOG_2PI) \
                    - 0.5 * r * r / (nb * den)
            corr[n] = c
        # commit
        if apply_updates == 1:
            for k in range(lo, hi):
                if skip[k - lo] == 1:
                    continue
                j = inc_node[k]
                alpha[j] = newa[k - lo]
                beta[j] = newb[k - lo]
