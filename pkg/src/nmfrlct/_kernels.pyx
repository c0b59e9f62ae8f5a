# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: Gibbs sweeps, predictive statistics, VB iterations.

Random variates come from numpy's C distribution functions on the caller's
bit generator, in the same order as the pure numpy fallback.
"""

import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport pow, exp, log, fabs, isfinite
from libc.string cimport memset
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport (
    random_standard_gamma, random_standard_uniform, random_binomial, binomial_t)

from scipy.special.cython_special cimport psi, gammaln

from .model import NumericalError

cnp.import_array()


cdef bitgen_t* _bitgen(object rng) except NULL:
    capsule = rng.bit_generator.capsule
    return <bitgen_t*> PyCapsule_GetPointer(capsule, "BitGenerator")


cdef void _gamma_fill(bitgen_t* bg, double* shape, double* out, Py_ssize_t size) noexcept nogil:
    # boosted draw for shape < 1: G(a+1) * (1-U)**(1/a), uniforms drawn after all gammas
    cdef Py_ssize_t t
    for t in range(size):
        if shape[t] < 1.0:
            out[t] = random_standard_gamma(bg, shape[t] + 1.0)
        else:
            out[t] = random_standard_gamma(bg, shape[t])
    for t in range(size):
        if shape[t] < 1.0:
            out[t] *= pow(1.0 - random_standard_uniform(bg), 1.0 / shape[t])


def gibbs_sweeps(rng, const cnp.int64_t[:, ::1] xsum, Py_ssize_t n,
                 double[:, ::1] U, double[:, ::1] V,
                 double phi_u, double theta_u, double phi_v, double theta_v,
                 Py_ssize_t burn_in, Py_ssize_t thin, Py_ssize_t K):
    cdef Py_ssize_t M = U.shape[0], H = U.shape[1], N = V.shape[1]
    cdef Py_ssize_t i, j, k, sweep, kept = 0, total = burn_in + thin * K
    cdef double[:, :, ::1] Ud = np.empty((K, M, H))
    cdef double[:, :, ::1] Vd = np.empty((K, H, N))
    cdef double[:, :, ::1] w = np.empty((M, N, H))
    cdef double[:, :, ::1] tail = np.empty((M, N, H))
    cdef cnp.int64_t[:, ::1] remaining = np.empty((M, N), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] su = np.empty((M, H), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] sv = np.empty((H, N), dtype=np.int64)
    cdef double[:, ::1] shape_u = np.empty((M, H))
    cdef double[:, ::1] shape_v = np.empty((H, N))
    cdef double[::1] acc = np.empty(H)
    cdef cnp.int64_t s
    cdef double p, r
    cdef binomial_t binom
    cdef bitgen_t* bg = _bitgen(rng)
    cdef bint degenerate = False

    memset(&binom, 0, sizeof(binomial_t))
    with rng.bit_generator.lock:
      with nogil:
        for sweep in range(1, total + 1):
            # latent allocation, aggregated into su / sv
            for i in range(M):
                for j in range(N):
                    for k in range(H):
                        w[i, j, k] = U[i, k] * V[k, j]
                    tail[i, j, H - 1] = w[i, j, H - 1]
                    for k in range(H - 2, -1, -1):
                        tail[i, j, k] = tail[i, j, k + 1] + w[i, j, k]
                    if tail[i, j, 0] <= 0 and xsum[i, j] > 0:
                        degenerate = True
                    remaining[i, j] = xsum[i, j]
            if degenerate:
                break
            memset(&su[0, 0], 0, M * H * sizeof(cnp.int64_t))
            memset(&sv[0, 0], 0, H * N * sizeof(cnp.int64_t))
            for k in range(H - 1):
                for i in range(M):
                    for j in range(N):
                        p = w[i, j, k] / tail[i, j, k] if tail[i, j, k] > 0 else 0.0
                        s = random_binomial(bg, p, remaining[i, j], &binom)
                        remaining[i, j] -= s
                        su[i, k] += s
                        sv[k, j] += s
            for i in range(M):
                for j in range(N):
                    su[i, H - 1] += remaining[i, j]
                    sv[H - 1, j] += remaining[i, j]

            # U | V, sources
            for k in range(H):
                acc[k] = V[k, 0]
                for j in range(1, N):
                    acc[k] += V[k, j]
            for i in range(M):
                for k in range(H):
                    shape_u[i, k] = phi_u + <double> su[i, k]
            _gamma_fill(bg, &shape_u[0, 0], &U[0, 0], M * H)
            for i in range(M):
                for k in range(H):
                    U[i, k] = U[i, k] / (theta_u + n * acc[k])

            # V | U, sources
            for k in range(H):
                acc[k] = U[0, k]
                for i in range(1, M):
                    acc[k] += U[i, k]
            for k in range(H):
                for j in range(N):
                    shape_v[k, j] = phi_v + <double> sv[k, j]
            _gamma_fill(bg, &shape_v[0, 0], &V[0, 0], H * N)
            for k in range(H):
                r = theta_v + n * acc[k]
                for j in range(N):
                    V[k, j] = V[k, j] / r

            if sweep > burn_in and (sweep - burn_in) % thin == 0:
                for i in range(M):
                    for k in range(H):
                        Ud[kept, i, k] = U[i, k]
                for k in range(H):
                    for j in range(N):
                        Vd[kept, k, j] = V[k, j]
                kept += 1
    if degenerate:
        raise NumericalError("all allocation weights vanish at an entry with a positive count")
    return np.asarray(Ud), np.asarray(Vd)


def predictive_stats(const cnp.int64_t[:, ::1] X, const double[::1] lfact,
                     log_rates, const double[::1] rate_sums):
    """Per-observation log-mean-exp, mean and population variance over draws."""
    cdef double[:, ::1] lrt = np.ascontiguousarray(np.asarray(log_rates).T)
    cdef Py_ssize_t n = X.shape[0], E = X.shape[1], K = lrt.shape[1]
    cdef Py_ssize_t i, k, e
    cdef double[::1] lme = np.empty(n)
    cdef double[::1] mean = np.empty(n)
    cdef double[::1] var = np.empty(n)
    cdef double[::1] ell = np.empty(K)
    cdef double mx, acc, m, d, x, logK = log(<double> K)
    with nogil:
        for i in range(n):
            for k in range(K):
                ell[k] = -rate_sums[k] - lfact[i]
            for e in range(E):
                if X[i, e] != 0:
                    x = <double> X[i, e]
                    for k in range(K):
                        ell[k] += x * lrt[e, k]
            mx = ell[0]
            m = 0.0
            for k in range(K):
                m += ell[k]
                if ell[k] > mx:
                    mx = ell[k]
            m /= K
            acc = 0.0
            d = 0.0
            for k in range(K):
                acc += exp(ell[k] - mx)
                d += (ell[k] - m) * (ell[k] - m)
            lme[i] = mx + log(acc) - logK
            mean[i] = m
            var[i] = d / K
    return np.asarray(lme), np.asarray(mean), np.asarray(var)


cdef inline double _digamma(double x) noexcept nogil:
    return psi[double](x)


cdef double _gamma_kl(double[:, ::1] a, double[:, ::1] b, double phi, double theta) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double tot = 0.0, lgphi = gammaln(phi), lth = log(theta)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            tot += ((a[i, j] - phi) * _digamma(a[i, j]) - gammaln(a[i, j]) + lgphi
                    + phi * (log(b[i, j]) - lth) + a[i, j] * (theta - b[i, j]) / b[i, j])
    return tot


cdef void _expect(double[:, ::1] a, double[:, ::1] b, double[:, ::1] el, double[:, ::1] e) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            el[i, j] = _digamma(a[i, j]) - log(b[i, j])
            e[i, j] = a[i, j] / b[i, j]


cdef double _free_energy(const double[:, ::1] Xs, double n, double lfact_total,
                         double[:, ::1] a_u, double[:, ::1] b_u, double[:, ::1] a_v, double[:, ::1] b_v,
                         double[:, ::1] elu, double[:, ::1] eu, double[:, ::1] elv, double[:, ::1] ev,
                         double phi_u, double theta_u, double phi_v, double theta_v) noexcept nogil:
    cdef Py_ssize_t M = a_u.shape[0], H = a_u.shape[1], N = a_v.shape[1], i, j, k
    cdef double F, mx, s, rate
    F = _gamma_kl(a_u, b_u, phi_u, theta_u) + _gamma_kl(a_v, b_v, phi_v, theta_v)
    if n == 0:
        return F
    for i in range(M):
        for j in range(N):
            mx = elu[i, 0] + elv[0, j]
            rate = 0.0
            for k in range(H):
                if elu[i, k] + elv[k, j] > mx:
                    mx = elu[i, k] + elv[k, j]
                rate += eu[i, k] * ev[k, j]
            s = 0.0
            for k in range(H):
                s += exp(elu[i, k] + elv[k, j] - mx)
            F += n * rate - Xs[i, j] * (mx + log(s))
    return F + lfact_total


cdef void _update_side(const double[:, ::1] Xs, double n, double[:, ::1] elu, double[:, ::1] elv,
                       double[:, ::1] other_mean, double[:, ::1] a, double[:, ::1] b,
                       double phi, double theta, bint side_u, double[::1] w) noexcept nogil:
    # side_u: refresh q(U) (a, b are M x H); else q(V) (a, b are H x N)
    cdef Py_ssize_t M = elu.shape[0], H = elu.shape[1], N = elv.shape[1], i, j, k
    cdef double mx, s, acc
    if side_u:
        for i in range(M):
            for k in range(H):
                a[i, k] = phi
        for k in range(H):
            acc = 0.0
            for j in range(N):
                acc += other_mean[k, j]
            for i in range(M):
                b[i, k] = theta + n * acc
    else:
        for k in range(H):
            for j in range(N):
                a[k, j] = phi
            acc = 0.0
            for i in range(M):
                acc += other_mean[i, k]
            for j in range(N):
                b[k, j] = theta + n * acc
    for i in range(M):
        for j in range(N):
            if Xs[i, j] == 0:
                continue
            mx = elu[i, 0] + elv[0, j]
            for k in range(1, H):
                if elu[i, k] + elv[k, j] > mx:
                    mx = elu[i, k] + elv[k, j]
            s = 0.0
            for k in range(H):
                w[k] = exp(elu[i, k] + elv[k, j] - mx)
                s += w[k]
            for k in range(H):
                if side_u:
                    a[i, k] += Xs[i, j] * w[k] / s
                else:
                    a[k, j] += Xs[i, j] * w[k] / s


def vb_iterate(const double[:, ::1] Xs, double n, double lfact_total,
               double[:, ::1] a_u, double[:, ::1] b_u, double[:, ::1] a_v, double[:, ::1] b_v,
               double phi_u, double theta_u, double phi_v, double theta_v,
               Py_ssize_t max_iters, double tol, bint relative):
    """Coordinate-ascent VB until the free-energy decrease falls below tol.

    Parameter arrays are updated in place.  Returns (trajectory, converged).
    """
    cdef Py_ssize_t M = a_u.shape[0], H = a_u.shape[1], N = a_v.shape[1], it, count = 0
    cdef double[:, ::1] elu = np.empty((M, H))
    cdef double[:, ::1] eu = np.empty((M, H))
    cdef double[:, ::1] elv = np.empty((H, N))
    cdef double[:, ::1] ev = np.empty((H, N))
    cdef double[::1] w = np.empty(H)
    cdef double[::1] traj = np.empty(max_iters + 1)
    cdef double F, F_new, thresh
    cdef bint converged = False
    with nogil:
        _expect(a_u, b_u, elu, eu)
        _expect(a_v, b_v, elv, ev)
        F = _free_energy(Xs, n, lfact_total, a_u, b_u, a_v, b_v, elu, eu, elv, ev,
                         phi_u, theta_u, phi_v, theta_v)
        traj[0] = F
        count = 1
        for it in range(max_iters):
            _update_side(Xs, n, elu, elv, ev, a_u, b_u, phi_u, theta_u, True, w)
            _expect(a_u, b_u, elu, eu)
            _update_side(Xs, n, elu, elv, eu, a_v, b_v, phi_v, theta_v, False, w)
            _expect(a_v, b_v, elv, ev)
            F_new = _free_energy(Xs, n, lfact_total, a_u, b_u, a_v, b_v, elu, eu, elv, ev,
                                 phi_u, theta_u, phi_v, theta_v)
            traj[count] = F_new
            count += 1
            if not isfinite(F_new):
                break
            thresh = tol * (1.0 + fabs(F_new)) if relative else tol
            if fabs(F - F_new) < thresh:
                converged = True
                break
            F = F_new
    return np.asarray(traj)[:count].copy(), bool(converged)
