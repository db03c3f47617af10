"""Numba inner loops shared by the PDE solver and the SPDE simulator."""

import math

import numba as nb
import numpy as np


@nb.njit(cache=True)
def heat_riccati_steps(V, W, r, dt, nsteps, tangent):
    """Strang-split steps of V_t = V''/2 - V^2/2 with zero Dirichlet ends.

    The reaction is integrated exactly (1/V -> 1/V + dt/2) and the diffusion
    explicitly with r = dt/(2 dx^2).  When ``tangent`` is set, W follows the
    derivative of V with respect to its initial data.
    """
    n = V.size
    tmp = np.empty(n)
    tmpw = np.empty(n)
    h = 0.25 * dt
    for _ in range(nsteps):
        for j in range(n):
            d = 1.0 + h * V[j]
            V[j] /= d
            if tangent:
                W[j] /= d * d
        tmp[0] = 0.0
        tmp[n - 1] = 0.0
        tmpw[0] = 0.0
        tmpw[n - 1] = 0.0
        for j in range(1, n - 1):
            tmp[j] = V[j] + r * (V[j + 1] - 2.0 * V[j] + V[j - 1])
            if tangent:
                tmpw[j] = W[j] + r * (W[j + 1] - 2.0 * W[j] + W[j - 1])
        for j in range(n):
            d = 1.0 + h * tmp[j]
            V[j] = tmp[j] / d
            if tangent:
                W[j] = tmpw[j] / (d * d)


@nb.njit(cache=True)
def _poisson(lam):
    if lam < 30.0:
        L = math.exp(-lam)
        k = 0
        p = np.random.random()
        while p > L:
            k += 1
            p *= np.random.random()
        return k
    return np.random.poisson(lam)


@nb.njit(cache=True)
def spde_run(X, dx, dt, nsteps, scheme, periodic, mass_cap):
    """Advance a density field in place; returns (status, steps_done).

    scheme 0: Euler step with Gaussian noise sqrt(X dt/dx), clamped at 0.
    scheme 1: exact per-node Feller step (Poisson-Gamma) after the diffusion.
    status 0 ok, 1 extinct, 2 mass cap exceeded, 3 non-finite value.
    Only the active range (plus one node each side) is updated; with
    ``periodic`` the whole ring is updated every step.
    """
    n = X.size
    Y = np.empty(n)
    a = dt / (2.0 * dx * dx)
    sd = math.sqrt(dt / dx)
    rate = 2.0 * dx / dt
    scale = dt / (2.0 * dx)
    lo = n
    hi = -1
    for j in range(n):
        if X[j] > 0.0:
            if j < lo:
                lo = j
            hi = j
    if hi < 0:
        return 1, 0
    for s in range(nsteps):
        if periodic:
            l = 0
            h = n - 1
        else:
            l = lo - 1 if lo > 1 else 1
            h = hi + 1 if hi < n - 2 else n - 2
        for j in range(l, h + 1):
            if periodic:
                jm = j - 1 if j > 0 else n - 1
                jp = j + 1 if j < n - 1 else 0
                Y[j] = X[j] + a * (X[jp] - 2.0 * X[j] + X[jm])
            else:
                Y[j] = X[j] + a * (X[j + 1] - 2.0 * X[j] + X[j - 1])
        newlo = n
        newhi = -1
        mass = 0.0
        for j in range(l, h + 1):
            v = Y[j]
            if v > 0.0:
                if scheme == 0:
                    v = v + math.sqrt(v) * sd * np.random.standard_normal()
                    if v < 0.0:
                        v = 0.0
                else:
                    k = _poisson(rate * v)
                    v = np.random.gamma(k, scale) if k > 0 else 0.0
            else:
                v = 0.0
            X[j] = v
            if v > 0.0:
                if j < newlo:
                    newlo = j
                newhi = j
                mass += v
        if not math.isfinite(mass):
            return 3, s + 1
        if mass * dx > mass_cap:
            return 2, s + 1
        if newhi < 0:
            return 1, s + 1
        lo = newlo
        hi = newhi
    return 0, nsteps


@nb.njit(cache=True)
def seed_numba(seed):
    np.random.seed(seed)


@nb.njit(cache=True)
def _lerp(tab, x0, dx, x):
    u = (x - x0) / dx
    n = tab.size
    if u <= 0.0:
        return tab[0]
    if u >= n - 1:
        return tab[n - 1]
    i = int(u)
    f = u - i
    return tab[i] * (1.0 - f) + tab[i + 1] * f


@nb.njit(cache=True)
def _bilerp(tab, a0, da, b0, db, a, b):
    na, nbb = tab.shape
    u = (a - a0) / da
    v = (b - b0) / db
    if u < 0.0:
        u = 0.0
    if u > na - 1.0:
        u = na - 1.0
    if v < 0.0:
        v = 0.0
    if v > nbb - 1.0:
        v = nbb - 1.0
    i = min(int(u), na - 2)
    j = min(int(v), nbb - 2)
    f = u - i
    g = v - j
    return ((1.0 - f) * ((1.0 - g) * tab[i, j] + g * tab[i, j + 1])
            + f * ((1.0 - g) * tab[i + 1, j] + g * tab[i + 1, j + 1]))


@nb.njit(cache=True)
def _immortal_drift(y, r_tab, r0, rdx, bound, lam0):
    # Outside the tabulated range psi_0 grows like |y|^(2 lambda_0).
    if y > bound or y < -bound:
        return -0.5 * y + 2.0 * lam0 / y
    return -0.5 * y + _lerp(r_tab, r0, rdx, y)


@nb.njit(cache=True)
def immortal_paths(x0s, dt, nsteps, r_tab, r0, rdx, bound, lam0):
    """Euler-Maruyama paths of dY = (-Y/2 + psi_0'/psi_0(Y)) dt + dB."""
    n = x0s.size
    out = np.empty((n, nsteps + 1))
    sq = math.sqrt(dt)
    for p in range(n):
        y = x0s[p]
        out[p, 0] = y
        for k in range(1, nsteps + 1):
            y += _immortal_drift(y, r_tab, r0, rdx, bound, lam0) * dt + sq * np.random.standard_normal()
            out[p, k] = y
    return out


@nb.njit(cache=True)
def immortal_log_z(x0s, dt, nsteps, r_tab, r0, rdx, bound, lam0,
                   g_tab, s0, ds, y0, dy, every):
    """log Z along immortal paths, recorded every ``every`` steps.

    ``g_tab[i, j]`` is the nonnegative integrand F(y) - V at time index i
    (s = s0 + i ds) and y = y0 + j dy; s beyond the table uses the last row.
    """
    n = x0s.size
    ncp = nsteps // every + 1
    out = np.zeros((n, ncp))
    sq = math.sqrt(dt)
    for p in range(n):
        y = x0s[p]
        acc = 0.0
        gprev = _bilerp(g_tab, s0, ds, y0, dy, 0.0, y)
        for k in range(1, nsteps + 1):
            y += _immortal_drift(y, r_tab, r0, rdx, bound, lam0) * dt + sq * np.random.standard_normal()
            g = _bilerp(g_tab, s0, ds, y0, dy, k * dt, y)
            acc += 0.5 * (gprev + g) * dt
            gprev = g
            if k % every == 0:
                out[p, k // every] = acc
    return out


@nb.njit(cache=True)
def _f2_value(a, b, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc):
    # table indexed by separation and lower point; far apart F2 = F(a) + F(b)
    lo = a if a < b else b
    d = abs(b - a)
    nd, nc = f2_tab.shape
    if d >= d0 + (nd - 1) * dd or lo < c0 or lo + d > c0 + (nc - 1) * dc:
        return _lerp(f_tab, f0, fdx, abs(a)) + _lerp(f_tab, f0, fdx, abs(b))
    return _bilerp(f2_tab, d0, dd, c0, dc, d, lo)


@nb.njit(cache=True)
def _pair_excess(a, b, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc):
    # F(a) - F2(a, b) <= 0
    e = _lerp(f_tab, f0, fdx, abs(a)) - _f2_value(a, b, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc)
    return e if e < 0.0 else 0.0


@nb.njit(cache=True)
def immortal_log_w(x0s, z2s, dt, nsteps, r_tab, r0, rdx, bound, lam0,
                   f_tab, f0, fdx, f2_tab, d0, dd, c0, dc, cutoff):
    """log W along immortal paths started at x0s, against partner points z2s.

    Integration stops once the partner has drifted ``cutoff`` beyond the
    path, where the integrand is below F at that distance.
    """
    n = x0s.size
    out = np.zeros(n)
    sq = math.sqrt(dt)
    for p in range(n):
        y = x0s[p]
        c = z2s[p] - x0s[p]
        acc = 0.0
        eprev = _pair_excess(y, y + c, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc)
        for k in range(1, nsteps + 1):
            y += _immortal_drift(y, r_tab, r0, rdx, bound, lam0) * dt + sq * np.random.standard_normal()
            sep = math.exp(0.5 * k * dt) * c
            b = y + sep
            e = _pair_excess(y, b, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc)
            acc += 0.5 * (eprev + e) * dt
            eprev = e
            if abs(b) > cutoff and abs(sep) > 2.0 * cutoff:
                break
        out[p] = acc
    return out


@nb.njit(cache=True)
def _log_psi0(y, lp_tab, r0, rdx, bound, lam0):
    # same continuation as the drift: psi_0 ~ |y|^(2 lambda_0) beyond the table
    if y > bound:
        return lp_tab[lp_tab.size - 1] + 2.0 * lam0 * math.log(y / bound)
    if y < -bound:
        return lp_tab[0] + 2.0 * lam0 * math.log(-y / bound)
    return _lerp(lp_tab, r0, rdx, y)


@nb.njit(cache=True)
def immortal_pair_killing(z1s, z2s, dt, nsteps, rate, r_tab, r0, rdx, bound, lam0, lp_tab,
                          f_tab, f0, fdx, f2_tab, d0, dd, c0, dc):
    """Immortal paths Y from z1 weighted by exp(-int (F2 - F)(Y, Y + e^{-s/2}(z2 - z1))).

    Returns per path: int_0^T e^{rate s} exp(-A_s) / psi_0(Y_s) ds, exp(-A_T)
    and Y_T, where A is the accumulated excess killing and T = nsteps dt.
    """
    n = z1s.size
    body = np.empty(n)
    wend = np.empty(n)
    yend = np.empty(n)
    sq = math.sqrt(dt)
    for p in range(n):
        y = z1s[p]
        c = z2s[p] - z1s[p]
        e_prev = _pair_excess(y, y + c, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc)
        g_prev = math.exp(-_log_psi0(y, lp_tab, r0, rdx, bound, lam0))
        A = 0.0
        acc = 0.0
        for k in range(1, nsteps + 1):
            y += _immortal_drift(y, r_tab, r0, rdx, bound, lam0) * dt + sq * np.random.standard_normal()
            s = k * dt
            e = _pair_excess(y, y + math.exp(-0.5 * s) * c, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc)
            A -= 0.5 * (e_prev + e) * dt
            e_prev = e
            g = math.exp(rate * s - A - _log_psi0(y, lp_tab, r0, rdx, bound, lam0))
            acc += 0.5 * (g_prev + g) * dt
            g_prev = g
        body[p] = acc
        wend[p] = math.exp(-A)
        yend[p] = y
    return body, wend, yend


@nb.njit(cache=True)
def ou_pair_killing(z1s, z2s, dt, nsteps, shift, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc):
    """OU paths Y from z1 killed at rate F2(Y, Y + e^{-s/2}(z2 - z1)).

    Returns per path: int_0^T e^{shift s} exp(-A_s) ds, exp(-A_T) and Y_T,
    where A is the accumulated killing and T = nsteps dt.
    """
    n = z1s.size
    body = np.empty(n)
    surv = np.empty(n)
    yend = np.empty(n)
    a = math.exp(-0.5 * dt)
    sd = math.sqrt(1.0 - a * a)
    for p in range(n):
        y = z1s[p]
        c = z2s[p] - z1s[p]
        k_prev = _f2_value(y, y + c, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc)
        A = 0.0
        g_prev = 1.0
        acc = 0.0
        for k in range(1, nsteps + 1):
            y = a * y + sd * np.random.standard_normal()
            s = k * dt
            kk = _f2_value(y, y + math.exp(-0.5 * s) * c, f_tab, f0, fdx, f2_tab, d0, dd, c0, dc)
            A += 0.5 * (k_prev + kk) * dt
            k_prev = kk
            g = math.exp(shift * s - A)
            acc += 0.5 * (g_prev + g) * dt
            g_prev = g
            if A > 60.0:
                break
        body[p] = acc
        surv[p] = math.exp(-A)
        yend[p] = y
    return body, surv, yend
