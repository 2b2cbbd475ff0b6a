"""Compiled inner loops for the elapsed-time solver.

Content is indexed by birth cell. For the potential queue, ``src[n0 + b]`` is
the arrival mass of time cell b >= 0 and ``src[n0 - 1 - k]`` is the initial
mass of age cell k divided by its average survival; at step j, age cell i
holds ``src[n0 + j - 1 - i] * avg_sf[i]``. The service layer uses the same
layout with K-increments in place of arrivals.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def frac(i, chi, dt):
    f = chi / dt - i
    if f <= 0.0:
        return 0.0
    if f >= 1.0:
        return 1.0
    return f


@njit(cache=True)
def frontier(j, q, src, n0, avg_sf, dt):
    """Age where the cumulative potential-queue mass reaches q; clamp flag."""
    if q <= 0.0:
        return 0.0, False
    cum = 0.0
    imax = n0 + j - 1
    for i in range(imax + 1):
        cm = src[n0 + j - 1 - i] * avg_sf[i]
        if cum + cm >= q:
            if cm > 0.0:
                return dt * (i + (q - cum) / cm), False
            return dt * i, False
        cum += cm
    return dt * (imax + 1), True


@njit(cache=True)
def abandon_step(j, chi_prev, chi_new, src, n0, avg_sf, dt):
    """Queue mass lost to patience expiry over step j given the frontier at both ends."""
    total = src[n0 + j - 1] * (1.0 - avg_sf[0]) * frac(0, chi_new, dt)
    top = chi_prev if chi_prev > chi_new else chi_new
    imax = int(top / dt) + 2
    if imax > n0 + j - 1:
        imax = n0 + j - 1
    for i in range(1, imax + 1):
        fp = frac(i - 1, chi_prev, dt)
        fn = frac(i, chi_new, dt)
        if fp == 0.0 and fn == 0.0:
            continue
        total += src[n0 + j - 1 - i] * (avg_sf[i - 1] - avg_sf[i]) * 0.5 * (fp + fn)
    return total


@njit(cache=True)
def march(j0, j1, dt, E, dE, X0, B0, src, n_eta, avg_gr, srck, n_nu, avg_gs, n_gs,
          b_atom, hist, X, B, Q, K, D, R, chi, kappa, iters, flags, max_iter, tol):
    """Advance steps j0..j1-1 (state at index j-1 known). Returns -1 or the failing step."""
    c0 = avg_gs[0]
    for j in range(j0, j1):
        # service content from earlier entries, seen at t_j
        top = n_nu + j - 1
        if top > n_gs:
            top = n_gs
        if hist > 0 and top > hist:
            top = hist
        b_old = b_atom[j]
        for i in range(1, top + 1):
            b_old += srck[n_nu + j - 1 - i] * avg_gs[i]
        d_old = B0 + K[j - 1] - b_old
        cap = Q[j - 1] + dE[j - 1]

        chi_in = chi[j - 1]
        done = False
        x = 0.0
        r = 0.0
        dk = 0.0
        chi_out = 0.0
        clamp = False
        n_it = 0
        for it in range(max_iter):
            n_it = it + 1
            dr = abandon_step(j, chi[j - 1], chi_in, src, n_eta, avg_gr, dt)
            if dr > cap:
                dr = cap
            r = R[j - 1] + dr
            a = E[j] + X0 - d_old - r
            dk = a - b_old
            lim = (1.0 - b_old) / c0
            if lim < dk:
                dk = lim
            if dk < 0.0:
                dk = 0.0
            x = a - (1.0 - c0) * dk
            q = x - 1.0 if x > 1.0 else 0.0
            chi_out, clamp = frontier(j, q, src, n_eta, avg_gr, dt)
            if abs(chi_out - chi_in) <= tol:
                done = True
                break
            chi_in = chi_out
        iters[j] = n_it
        if not done:
            return j
        srck[n_nu + j - 1] = dk
        X[j] = x
        B[j] = x if x < 1.0 else 1.0
        Q[j] = x - 1.0 if x > 1.0 else 0.0
        K[j] = K[j - 1] + dk
        D[j] = d_old + (1.0 - c0) * dk
        R[j] = r
        chi[j] = chi_out
        kappa[j] = dk / dt
        flags[j] = 1 if clamp else 0
    return -1


@njit(cache=True)
def hazard_below_frontier(J, src, n0, avg_sf, haz_mid, chi, dt):
    """Rate of patience expiry among queued content at each grid time."""
    out = np.zeros(J + 1)
    for j in range(J + 1):
        imax = int(chi[j] / dt) + 1
        if imax > n0 + j - 1:
            imax = n0 + j - 1
        s = 0.0
        for i in range(imax + 1):
            f = frac(i, chi[j], dt)
            if f == 0.0:
                break
            s += src[n0 + j - 1 - i] * avg_sf[i] * haz_mid[i] * f
        out[j] = s
    return out


@njit(cache=True)
def arrival_abandon_rate(J, lam_half, gr_nodes, gr_cut, cut, dt):
    """int_0^{s ^ chi(s)} lambda(s - x) dG(x) at each grid time s_j."""
    out = np.zeros(J + 1)
    for j in range(J + 1):
        c = cut[j]
        i0 = int(c / dt)
        if i0 > j:
            i0 = j
        s = 0.0
        for i in range(i0):
            s += lam_half[j - i] * (gr_nodes[i + 1] - gr_nodes[i])
        if c > i0 * dt and i0 < j + 1:
            s += lam_half[j - i0] * (gr_cut[j] - gr_nodes[i0])
        out[j] = s
    return out


@njit(cache=True)
def initial_abandon(J, w, sf_mid0, gr_half, chi, dt):
    """Cumulative expiry of initially queued content while still ahead of the frontier."""
    out = np.zeros(J + 1)
    n = w.shape[0]
    for j in range(1, J + 1):
        s = 0.0
        kmax = int(max(chi[j - 1], chi[j]) / dt) + 2 - (j - 1)
        if kmax > n:
            kmax = n
        for k in range(kmax):
            if w[k] == 0.0:
                continue
            fp = frac(k + j - 1, chi[j - 1], dt)
            fn = frac(k + j, chi[j], dt)
            if fp == 0.0 and fn == 0.0:
                continue
            s += w[k] / sf_mid0[k] * (gr_half[k + j] - gr_half[k + j - 1]) * 0.5 * (fp + fn)
        out[j] = out[j - 1] + s
    return out
