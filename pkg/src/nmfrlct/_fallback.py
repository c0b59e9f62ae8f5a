"""Pure numpy implementation of the sampling and predictive kernels.

Consumes the generator stream in exactly the order the compiled kernels do,
so both backends return bitwise-identical chains for the same seed.
"""

import math

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .model import NumericalError


def gamma_boosted(rng, shape):
    """Standard gamma variates; shapes below 1 are drawn as G(a+1) * U**(1/a)."""
    shape = np.asarray(shape, dtype=np.float64)
    small = shape < 1.0
    g = rng.standard_gamma(np.where(small, shape + 1.0, shape))
    if small.any():
        u = rng.random(int(small.sum()))
        flat_g = g.reshape(-1)
        for t, idx in enumerate(np.flatnonzero(small.reshape(-1))):
            # 1 - u lies in (0, 1], so the draw never collapses to exactly 0
            flat_g[idx] *= math.pow(1.0 - u[t], 1.0 / float(shape.reshape(-1)[idx]))
    return g


def allocate(rng, counts, U, V):
    """Split every count x_ij over the H components, p_k proportional to u_ik v_kj.

    Returns the (M, N, H) integer allocation.  The multinomial is drawn as a
    chain of conditional binomials, component by component.
    """
    counts = np.asarray(counts, dtype=np.int64)
    H = U.shape[1]
    w = U[:, None, :] * V.T[None, :, :]  # (M, N, H)
    tail = np.empty_like(w)
    tail[..., H - 1] = w[..., H - 1]
    for k in range(H - 2, -1, -1):
        tail[..., k] = tail[..., k + 1] + w[..., k]
    if np.any((tail[..., 0] <= 0) & (counts > 0)):
        raise NumericalError("all allocation weights vanish at an entry with a positive count")
    s = np.zeros(w.shape, dtype=np.int64)
    remaining = counts.copy()
    for k in range(H - 1):
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(tail[..., k] > 0, w[..., k] / tail[..., k], 0.0)
        s[..., k] = rng.binomial(remaining, p)
        remaining -= s[..., k]
    s[..., H - 1] = remaining
    return s


def _row_sums(A):
    # fixed left-to-right order so the compiled kernel can match bit for bit
    out = A[:, 0].copy()
    for j in range(1, A.shape[1]):
        out += A[:, j]
    return out


def update_u(rng, su, V, n, phi_u, theta_u):
    rate = theta_u + n * _row_sums(V)  # (H,)
    return gamma_boosted(rng, phi_u + su) / rate[None, :]


def update_v(rng, sv, U, n, phi_v, theta_v):
    rate = theta_v + n * _row_sums(U.T)  # (H,)
    return gamma_boosted(rng, phi_v + sv) / rate[:, None]


def gibbs_sweeps(rng, xsum, n, U, V, phi_u, theta_u, phi_v, theta_v, burn_in, thin, K):
    """Run burn_in + thin*K sweeps; U, V are updated in place.

    Returns the retained draws as arrays of shape (K, M, H) and (K, H, N).
    """
    M, H = U.shape
    N = V.shape[1]
    Ud = np.empty((K, M, H))
    Vd = np.empty((K, H, N))
    kept = 0
    for sweep in range(1, burn_in + thin * K + 1):
        s = allocate(rng, xsum, U, V)
        U[...] = update_u(rng, s.sum(axis=1), V, n, phi_u, theta_u)
        V[...] = update_v(rng, s.sum(axis=0).T, U, n, phi_v, theta_v)
        if sweep > burn_in and (sweep - burn_in) % thin == 0:
            Ud[kept] = U
            Vd[kept] = V
            kept += 1
    return Ud, Vd


def draw_loglik(X, lfact, log_rates, rate_sums):
    """Log-likelihood of every observation under every draw, shape (n, K).

    X is (n, E) flattened counts, lfact the per-observation log-factorial
    sums, log_rates (K, E) and rate_sums (K,).
    """
    return X @ log_rates.T - rate_sums[None, :] - lfact[:, None]


def predictive_stats(X, lfact, log_rates, rate_sums, chunk=4096):
    """Per-observation log-mean-exp, mean and population variance over draws."""
    n = X.shape[0]
    K = log_rates.shape[0]
    lme = np.empty(n)
    mean = np.empty(n)
    var = np.empty(n)
    Xf = X.astype(np.float64)
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        L = draw_loglik(Xf[a:b], lfact[a:b], log_rates, rate_sums)
        lme[a:b] = logsumexp(L, axis=1) - math.log(K)
        m = L.mean(axis=1)
        mean[a:b] = m
        var[a:b] = ((L - m[:, None]) ** 2).mean(axis=1)
    return lme, mean, var


# variational Bayes --------------------------------------------------------

def _softmax_h(lw):
    m = lw.max(axis=2, keepdims=True)
    e = np.exp(lw - m)
    s = e.sum(axis=2, keepdims=True)
    return e / s, (m + np.log(s))[..., 0]


def vb_step(Xs, n, a_u, b_u, a_v, b_v, phi_u, theta_u, phi_v, theta_v):
    """One coordinate pass: responsibilities, q(U), responsibilities, q(V)."""
    elv = digamma(a_v) - np.log(b_v)
    elu = digamma(a_u) - np.log(b_u)
    r, _ = _softmax_h(elu[:, None, :] + elv.T[None, :, :])
    a_u = phi_u + np.einsum("ij,ijk->ik", Xs, r)
    b_u = np.broadcast_to(theta_u + n * (a_v / b_v).sum(axis=1), a_u.shape).copy()
    elu = digamma(a_u) - np.log(b_u)
    r, _ = _softmax_h(elu[:, None, :] + elv.T[None, :, :])
    a_v = phi_v + np.einsum("ij,ijk->kj", Xs, r)
    b_v = np.broadcast_to((theta_v + n * (a_u / b_u).sum(axis=0))[:, None], a_v.shape).copy()
    return a_u, b_u, a_v, b_v


def _gamma_kl(a, b, phi, theta):
    return float(np.sum((a - phi) * digamma(a) - gammaln(a) + gammaln(phi)
                        + phi * (np.log(b) - math.log(theta)) + a * (theta - b) / b))


def vb_free_energy(Xs, n, lfact_total, a_u, b_u, a_v, b_v, phi_u, theta_u, phi_v, theta_v):
    kl = _gamma_kl(a_u, b_u, phi_u, theta_u) + _gamma_kl(a_v, b_v, phi_v, theta_v)
    if n == 0:
        return kl
    elu = digamma(a_u) - np.log(b_u)
    elv = digamma(a_v) - np.log(b_v)
    _, lse = _softmax_h(elu[:, None, :] + elv.T[None, :, :])
    rate = float(np.sum((a_u / b_u) @ (a_v / b_v)))
    return kl + n * rate - float(np.sum(Xs * lse)) + lfact_total


def vb_iterate(Xs, n, lfact_total, a_u, b_u, a_v, b_v, phi_u, theta_u, phi_v, theta_v,
               max_iters, tol, relative):
    """Iterate vb_step until the free-energy decrease drops below the threshold.

    The four parameter arrays are overwritten with the final state.  Returns
    (trajectory, converged).
    """
    hyp = (phi_u, theta_u, phi_v, theta_v)
    state = (a_u.copy(), b_u.copy(), a_v.copy(), b_v.copy())
    F = vb_free_energy(Xs, n, lfact_total, *state, *hyp)
    traj = [F]
    converged = False
    for _ in range(max_iters):
        state = vb_step(Xs, n, *state, *hyp)
        F_new = vb_free_energy(Xs, n, lfact_total, *state, *hyp)
        traj.append(F_new)
        if not math.isfinite(F_new):
            break
        thresh = tol * (1.0 + abs(F_new)) if relative else tol
        done = abs(F - F_new) < thresh
        F = F_new
        if done:
            converged = True
            break
    for dst, src in zip((a_u, b_u, a_v, b_v), state):
        dst[...] = src
    return np.array(traj), converged
