"""Per-channel dynamics learning: ARIMA fitting, casting, EM refinement.

Workflow for one channel of one regime: difference until stationary, read
candidate orders off the ACF/PACF, fit each candidate by exact maximum
likelihood of the state-space form (ARMA plus white observation noise),
keep the smallest-AIC fit, cast it to a lag-state dynamics block, and
optionally refine the composed regime by EM.

The likelihood is the exact Kalman innovations decomposition of the
module's lag-state casting.  Stationarity (and MA invertibility) is
enforced by optimising partial-autocorrelation parameters through tanh,
and the overall noise scale is concentrated out analytically.  For long
series the innovations recursion is evaluated per step only until the
Riccati recursion has converged to machine precision, after which the
algebraically identical steady-state innovations filter is applied with
`scipy.signal.lfilter`; agreement with the naive per-step filter is pinned
by tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from scipy.optimize import minimize
from scipy.signal import lfilter, lfiltic

from .factors import ChannelDynamicsBlock
from .gaussian import LOG_2PI, RegimeParams, stationary_cov, symmetrize

#: Relative observation-noise floor (times sample variance).
OBS_NOISE_FLOOR = 1e-8

#: Floor on the observation/system variance ratio during optimisation.
RATIO_FLOOR = 1e-10

_RIDGE = 1e-9


class ArimaFitError(RuntimeError):
    """Optimizer did not converge; `best` carries the best fit seen so far."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class ArimaOrder:
    p: int = 0
    d: int = 0
    q: int = 0

    def __post_init__(self):
        for name in ("p", "d", "q"):
            v = int(getattr(self, name))
            if v < 0:
                raise ValueError(f"{name} must be >= 0")
            object.__setattr__(self, name, v)
        if self.d > 2:
            raise ValueError("differencing order above 2 is not supported")


@dataclass(frozen=True)
class ArimaFit:
    order: ArimaOrder
    ar: np.ndarray
    ma: np.ndarray
    sigma2_sys: float
    sigma2_obs: float
    log_likelihood: float
    n_params: int

    def __post_init__(self):
        object.__setattr__(self, "ar", np.asarray(self.ar, dtype=float))
        object.__setattr__(self, "ma", np.asarray(self.ma, dtype=float))
        if not (self.sigma2_sys > 0 and self.sigma2_obs > 0):
            raise ValueError("noise variances must be positive")
        if not math.isfinite(self.log_likelihood):
            raise ValueError("log-likelihood must be finite")


# ---------------------------------------------------------------------------
# Differencing and correlograms
# ---------------------------------------------------------------------------


def difference(series, d: int) -> np.ndarray:
    """Apply d successive first differences."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError("series must be one-dimensional")
    if d < 0:
        raise ValueError("d must be >= 0")
    if x.size <= d:
        raise ValueError(f"series of length {x.size} too short for d={d}")
    return np.diff(x, n=d) if d else x.copy()


def acf(series, max_lag: int) -> np.ndarray:
    """Sample autocorrelations at lags 0..max_lag (biased normalisation)."""
    x = np.asarray(series, dtype=float)
    if x.size <= max_lag:
        raise ValueError("series shorter than max_lag")
    xd = x - x.mean()
    denom = float(xd @ xd)
    if denom <= 0.0:
        raise ValueError("zero-variance series has no autocorrelation")
    full = np.correlate(xd, xd, mode="full")
    return full[x.size - 1 : x.size + max_lag] / denom


def pacf(series, max_lag: int) -> np.ndarray:
    """Partial autocorrelations via the Durbin-Levinson recursion.

    Index 0 holds 1.0 by convention; indices 1..max_lag are the partials.
    """
    r = acf(series, max_lag)
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    phi_prev = np.empty(0)
    for k in range(1, max_lag + 1):
        num = r[k] - phi_prev @ r[k - 1 : 0 : -1] if k > 1 else r[1]
        den = 1.0 - (phi_prev @ r[1:k] if k > 1 else 0.0)
        rk = num / den if abs(den) > 1e-12 else 0.0
        rk = float(np.clip(rk, -1.0, 1.0))
        out[k] = rk
        phi_prev = np.concatenate([phi_prev - rk * phi_prev[::-1], [rk]])
    return out


def select_d(series, max_d: int = 2) -> int:
    """Smallest d whose next difference no longer reduces the variance."""
    x = np.asarray(series, dtype=float)
    for d in range(max_d):
        if np.var(np.diff(x, n=d + 1)) >= np.var(np.diff(x, n=d) if d else x):
            return d
    return max_d


def suggest_orders(acf_vals, pacf_vals, n: int, d: int = 0, max_candidates: int = 8):
    """Candidate (p, d, q) orders from the significance band 1.96/sqrt(n).

    Cut-offs are read as the largest lag still outside the band; each gives
    a pure-AR / pure-MA candidate plus its +/-1 neighbours.  With nothing
    outside the band a small AR fallback list is returned.
    """
    band = 1.96 / math.sqrt(n)
    max_order = 6

    def cutoff(vals):
        sig = [k for k in range(1, min(len(vals), max_order + 1)) if abs(vals[k]) > band]
        return sig[-1] if sig else 0

    candidates = []
    p_cut = cutoff(pacf_vals)
    q_cut = cutoff(acf_vals)
    if p_cut >= 1:
        for p in (p_cut, p_cut - 1, p_cut + 1):
            if p >= 1:
                candidates.append(ArimaOrder(p, d, 0))
    if q_cut >= 1:
        for q in (q_cut, q_cut - 1, q_cut + 1):
            if q >= 1:
                candidates.append(ArimaOrder(0, d, q))
    seen, unique = set(), []
    for c in candidates:
        key = (c.p, c.d, c.q)
        if key not in seen:
            seen.add(key)
            unique.append(c)
    if not unique:
        unique = [ArimaOrder(1, d, 0), ArimaOrder(2, d, 0), ArimaOrder(3, d, 0)]
    return unique[:max_candidates]


# ---------------------------------------------------------------------------
# Stationarity-preserving parameterisation
# ---------------------------------------------------------------------------


def pacf_to_ar(partials) -> np.ndarray:
    """Map partial autocorrelations in (-1, 1) to stationary AR coefficients."""
    phi = np.empty(0)
    for rk in np.asarray(partials, dtype=float):
        phi = np.concatenate([phi - rk * phi[::-1], [rk]])
    return phi


def ar_to_pacf(phis) -> np.ndarray:
    """Inverse of `pacf_to_ar`; clips at +/-(1 - 1e-6) for boundary safety."""
    phi = list(np.asarray(phis, dtype=float))
    partials = []
    for k in range(len(phi), 0, -1):
        rk = float(np.clip(phi[-1], -1 + 1e-6, 1 - 1e-6))
        partials.append(rk)
        if k > 1:
            prev = np.asarray(phi[:-1])
            phi = list((prev + rk * prev[::-1]) / (1.0 - rk * rk))
    return np.asarray(partials[::-1])


def expand_ar_with_differencing(ar, d: int) -> np.ndarray:
    """AR coefficients of phi(B) * (1-B)^d on the undifferenced scale."""
    poly = np.concatenate([[1.0], -np.asarray(ar, dtype=float)])
    for _ in range(d):
        poly = np.convolve(poly, [1.0, -1.0])
    return -poly[1:]


def lag_state_matrices(ar_full, theta):
    """Transition matrix and noise-injection vector of the lag-state form.

    State = [x_t, x_{t-1}, .., x_{t-P}] plus q noise-history positions; the
    shared innovation enters position 0 and (when q > 0) the first noise
    position, so Q = sigma2 * outer(u, u).
    """
    ar_full = np.asarray(ar_full, dtype=float)
    theta = np.asarray(theta, dtype=float)
    P, q = ar_full.size, theta.size
    n = P + 1 + q
    A = np.zeros((n, n))
    A[0, :P] = ar_full
    if q:
        A[0, P + 1 : P + 1 + q] = theta
    for i in range(1, P + 1):
        A[i, i - 1] = 1.0
    for j in range(1, q):
        A[P + 1 + j, P + j] = 1.0
    u = np.zeros(n)
    u[0] = 1.0
    if q:
        u[P + 1] = 1.0
    return A, u


# ---------------------------------------------------------------------------
# Exact innovations likelihood
# ---------------------------------------------------------------------------


def _innovation_stats(w: np.ndarray, phi, theta, rho: float):
    """Sum of log innovation variances and normalised squared innovations.

    Computed for the unit-system-scale model (system noise 1, observation
    noise `rho`); the true scale is restored analytically by the callers.
    Returns (sum_log_S, sum_e2_over_S, T).
    """
    A, u = lag_state_matrices(phi, theta)
    n = A.shape[0]
    Q = np.outer(u, u)
    P_pred = symmetrize(solve_discrete_lyapunov(A, Q))
    T = w.size

    # Data-independent Riccati sweep, stopping once S has converged to
    # machine precision; without convergence the sweep covers every step.
    S_seq, AK_seq = [], []
    converged = False
    for _ in range(T):
        S = P_pred[0, 0] + rho
        if not (S > 0 and math.isfinite(S)):
            raise FloatingPointError("invalid innovation variance")
        K = P_pred[:, 0] / S
        S_seq.append(S)
        AK_seq.append(A @ K)
        P_filt = symmetrize(P_pred - np.outer(K, P_pred[0, :]))
        if len(S_seq) > 1 and abs(S_seq[-1] - S_seq[-2]) <= 1e-13 * S:
            converged = True
            break
        P_pred = symmetrize(A @ P_filt @ A.T + Q)

    n_exact = T if not converged else min(T, len(S_seq) + n + 5)
    x_pred = np.zeros(n)
    sum_log = 0.0
    sum_e2 = 0.0
    errs = np.empty(n_exact)
    for t in range(n_exact):
        i = min(t, len(S_seq) - 1)
        e = w[t] - x_pred[0]
        errs[t] = e
        sum_log += math.log(S_seq[i])
        sum_e2 += e * e / S_seq[i]
        x_pred = A @ x_pred + AK_seq[i] * e

    if n_exact < T:
        b = np.real(np.poly(A))
        g = AK_seq[-1]
        F = A.copy()
        F[:, 0] -= g
        a = np.real(np.poly(F))
        zi = lfiltic(b, a, errs[n_exact - 1 :: -1][:n], w[n_exact - 1 :: -1][:n])
        e_tail, _ = lfilter(b, a, w[n_exact:], zi=zi)
        S_inf = S_seq[-1]
        sum_log += (T - n_exact) * math.log(S_inf)
        sum_e2 += float(e_tail @ e_tail) / S_inf
    if not (math.isfinite(sum_log) and math.isfinite(sum_e2)):
        raise FloatingPointError("non-finite innovations")
    return sum_log, sum_e2, T


def arma_loglik(w, phi, theta, sigma2_sys: float, sigma2_obs: float) -> float:
    """Exact log-likelihood of a stationary ARMA plus white observation noise."""
    w = np.asarray(w, dtype=float)
    sum_log, sum_e2, T = _innovation_stats(w, phi, theta, sigma2_obs / sigma2_sys)
    return -0.5 * (T * (LOG_2PI + math.log(sigma2_sys)) + sum_log + sum_e2 / sigma2_sys)


def _concentrated_nll(w, phi, theta, rho):
    sum_log, sum_e2, T = _innovation_stats(w, phi, theta, rho)
    sigma2 = sum_e2 / T
    if not (sigma2 > 0 and math.isfinite(sigma2)):
        raise FloatingPointError("degenerate concentrated scale")
    nll = 0.5 * (T * (LOG_2PI + math.log(sigma2)) + sum_log + T)
    return nll, sigma2


# ---------------------------------------------------------------------------
# Maximum-likelihood fitting and order selection
# ---------------------------------------------------------------------------


def fit_arima_ml(series, order: ArimaOrder, start=None, max_iter: int = 500) -> ArimaFit:
    """Exact maximum-likelihood ARIMA fit with added observation noise.

    The d-times differenced, demeaned series is modelled as ARMA(p, q) plus
    white observation noise.  AR/MA polynomials are optimised through a
    partial-autocorrelation parameterisation (stationary and invertible by
    construction) and the overall scale is concentrated out.  `start` may
    supply (ar, ma, sigma2_sys, sigma2_obs) initial values.

    Raises ArimaFitError (carrying the best fit seen) if the optimiser hits
    its iteration limit.
    """
    w = difference(series, order.d)
    p, q = order.p, order.q
    if w.size < 10 * (p + q + 2):
        raise ValueError(f"need at least {10 * (p + q + 2)} points after differencing")
    w = w - w.mean()
    var = float(w.var())
    if var <= 0.0:
        raise ValueError("zero-variance series cannot be fit")

    if start is not None:
        ar0, ma0, s2s0, s2o0 = start
        z_ar = np.arctanh(ar_to_pacf(ar0)) if p else np.empty(0)
        z_ma = np.arctanh(ar_to_pacf(ma0)) if q else np.empty(0)
        v0 = math.log(max(s2o0, RATIO_FLOOR * s2s0) / s2s0)
    else:
        z_ar = np.arctanh(np.clip(pacf(w, p)[1:], -0.95, 0.95)) if p else np.empty(0)
        z_ma = np.zeros(q)
        v0 = math.log(0.25)
    x0 = np.concatenate([z_ar, z_ma, [v0]])

    best = {"nll": np.inf, "vec": None, "sigma2": None}

    def objective(vec):
        try:
            phi = pacf_to_ar(np.tanh(vec[:p]))
            theta = pacf_to_ar(np.tanh(vec[p : p + q]))
            rho = RATIO_FLOOR + math.exp(float(np.clip(vec[-1], -40.0, 40.0)))
            nll, sigma2 = _concentrated_nll(w, phi, theta, rho)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError, OverflowError):
            return 1e12
        if nll < best["nll"]:
            best.update(nll=nll, vec=vec.copy(), sigma2=sigma2)
        return nll

    res = minimize(objective, x0, method="L-BFGS-B", options={"maxiter": max_iter})

    def build_fit(vec, sigma2):
        phi = pacf_to_ar(np.tanh(vec[:p]))
        theta = pacf_to_ar(np.tanh(vec[p : p + q]))
        rho = RATIO_FLOOR + math.exp(float(np.clip(vec[-1], -40.0, 40.0)))
        s2_obs = max(sigma2 * rho, OBS_NOISE_FLOOR * var)
        ll = arma_loglik(w, phi, theta, sigma2, s2_obs)
        return ArimaFit(order, phi, theta, sigma2, s2_obs, ll, p + q + 2)

    if best["vec"] is None:
        raise ArimaFitError(f"likelihood evaluation failed for order {order}")
    fit = build_fit(best["vec"], best["sigma2"])
    if res.status == 1:  # iteration limit
        raise ArimaFitError(f"no convergence after {max_iter} iterations", best=fit)
    return fit


def aic(fit: ArimaFit) -> float:
    """Akaike information criterion, 2k - 2 logL with k = p + q + 2."""
    return 2.0 * fit.n_params - 2.0 * fit.log_likelihood


def select_fit(series, candidates):
    """Fit every candidate order and return (best_order, best_fit) by AIC.

    Failed fits are skipped; ties break toward fewer parameters.
    """
    if not candidates:
        raise ValueError("need at least one candidate order")
    results = []
    for order in candidates:
        try:
            fit = fit_arima_ml(series, order)
        except ArimaFitError as exc:
            if exc.best is None:
                continue
            fit = exc.best
        except (ValueError, np.linalg.LinAlgError):
            continue
        results.append((aic(fit), fit.n_params, (order.p, order.d, order.q), fit))
    if not results:
        raise ArimaFitError("every candidate order failed to fit")
    results.sort(key=lambda r: (r[0], r[1], r[2]))
    chosen = results[0][3]
    return chosen.order, chosen


def select_order(series, candidates) -> ArimaOrder:
    return select_fit(series, candidates)[0]


def cast_to_state_space(fit: ArimaFit) -> ChannelDynamicsBlock:
    """Cast a fitted ARIMA model to its lag-state dynamics block.

    Integrated terms are folded back by multiplying the AR polynomial with
    (1-B)^d, so the block evolves the undifferenced series; MA terms add
    noise-history state positions.  The selector row reads position 0.
    """
    ar_full = expand_ar_with_differencing(fit.ar, fit.order.d)
    A, u = lag_state_matrices(ar_full, fit.ma)
    Q = fit.sigma2_sys * np.outer(u, u)
    sel = np.zeros(A.shape[0])
    sel[0] = 1.0
    return ChannelDynamicsBlock(A, Q, fit.sigma2_obs, sel, (fit.order.p, fit.order.d, fit.order.q))


def inflate_x_factor(stable: RegimeParams, xi: float) -> RegimeParams:
    """Catch-all abnormality regime: stable dynamics with system noise xi * Q."""
    if not xi > 1.0:
        raise ValueError("inflation factor must exceed 1")
    return RegimeParams(stable.A, xi * stable.Q, stable.C, stable.R, stable.regime_id)


# ---------------------------------------------------------------------------
# EM refinement
# ---------------------------------------------------------------------------


def _filter_smoother(y, A, Q, C, R, m0, P0):
    """Kalman filter + RTS smoother for one sequence; tolerates NaN rows.

    Returns (loglik, x_s, P_s, cross) with cross[t] = Cov(x_t, x_{t-1} | y).
    """
    T = y.shape[0]
    d = A.shape[0]
    x_pred = np.empty((T, d))
    P_pred = np.empty((T, d, d))
    x_filt = np.empty((T, d))
    P_filt = np.empty((T, d, d))
    ll = 0.0
    for t in range(T):
        if t == 0:
            xp, Pp = m0, P0
        else:
            xp = A @ x_filt[t - 1]
            Pp = symmetrize(A @ P_filt[t - 1] @ A.T + Q)
        x_pred[t], P_pred[t] = xp, Pp
        obs = np.flatnonzero(np.isfinite(y[t]))
        if obs.size:
            Co = C[obs]
            Ro = R[np.ix_(obs, obs)]
            resid = y[t, obs] - Co @ xp
            S = symmetrize(Co @ Pp @ Co.T + Ro) + _RIDGE * np.eye(obs.size)
            L = np.linalg.cholesky(S)
            z = np.linalg.solve(L, resid)
            ll += -0.5 * (obs.size * LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + z @ z)
            K = np.linalg.solve(S, Co @ Pp).T
            x_filt[t] = xp + K @ resid
            IKC = np.eye(d) - K @ Co
            P_filt[t] = symmetrize(IKC @ Pp @ IKC.T + K @ Ro @ K.T)
        else:
            x_filt[t], P_filt[t] = xp, Pp

    x_s = np.empty((T, d))
    P_s = np.empty((T, d, d))
    J = np.empty((T - 1, d, d)) if T > 1 else np.empty((0, d, d))
    x_s[-1], P_s[-1] = x_filt[-1], P_filt[-1]
    for t in range(T - 2, -1, -1):
        Jt = np.linalg.solve(P_pred[t + 1] + _RIDGE * np.eye(d), A @ P_filt[t]).T
        J[t] = Jt
        x_s[t] = x_filt[t] + Jt @ (x_s[t + 1] - x_pred[t + 1])
        P_s[t] = symmetrize(P_filt[t] + Jt @ (P_s[t + 1] - P_pred[t + 1]) @ Jt.T)
    cross = np.empty((T, d, d))
    cross[0] = np.nan
    for t in range(1, T):
        cross[t] = P_s[t] @ J[t - 1].T
    return ll, x_s, P_s, cross


def _em_block(A, Q, C, R, seqs, max_iter, rel_tol, update_c):
    d = A.shape[0]
    m = C.shape[0]
    obs_var = np.array([np.nanvar(np.concatenate([s[:, j] for s in seqs])) for j in range(m)])
    obs_var = np.maximum(obs_var, 1e-12)
    try:
        P0 = stationary_cov(A, Q) + 1e-9 * np.eye(d)
    except ValueError:  # unit-root dynamics: fall back to a broad prior
        P0 = 10.0 * max(float(obs_var.max()), 1.0) * np.eye(d)
    m0 = np.zeros(d)

    A, Q, C, R = A.copy(), Q.copy(), C.copy(), R.copy()
    trace = []
    for _ in range(max_iter):
        S11 = np.zeros((d, d))
        S10 = np.zeros((d, d))
        S00 = np.zeros((d, d))
        n_pairs = 0
        obs_sq = np.zeros(m)
        obs_xy = np.zeros((m, d))
        obs_xx = np.zeros((m, d, d))
        obs_n = np.zeros(m)
        ll = 0.0
        for y in seqs:
            ll_i, x_s, P_s, cross = _filter_smoother(y, A, Q, C, R, m0, P0)
            ll += ll_i
            T = y.shape[0]
            for t in range(1, T):
                S11 += P_s[t - 1] + np.outer(x_s[t - 1], x_s[t - 1])
                S10 += cross[t] + np.outer(x_s[t], x_s[t - 1])
                S00 += P_s[t] + np.outer(x_s[t], x_s[t])
            n_pairs += T - 1
            for j in range(m):
                ok = np.isfinite(y[:, j])
                if not ok.any():
                    continue
                cj = C[j]
                pred = x_s[ok] @ cj
                obs_sq[j] += float(((y[ok, j] - pred) ** 2).sum())
                obs_sq[j] += float(np.einsum("i,tij,j->", cj, P_s[ok], cj))
                obs_n[j] += int(ok.sum())
                if update_c:
                    obs_xy[j] += y[ok, j] @ x_s[ok]
                    obs_xx[j] += P_s[ok].sum(axis=0) + x_s[ok].T @ x_s[ok]
        trace.append(ll)
        if len(trace) > 1 and (trace[-1] - trace[-2]) < rel_tol * abs(trace[-2]):
            break
        if n_pairs == 0:
            break
        ridge = _RIDGE * max(np.trace(S11) / d, 1.0)
        A = np.linalg.solve(S11 + ridge * np.eye(d), S10.T).T
        Qn = (S00 - A @ S10.T - S10 @ A.T + A @ S11 @ A.T) / n_pairs
        Qn = symmetrize(Qn)
        eigs, vecs = np.linalg.eigh(Qn)
        Q = symmetrize(vecs @ np.diag(np.maximum(eigs, 0.0)) @ vecs.T)
        for j in range(m):
            if obs_n[j] > 0:
                if update_c:
                    C[j] = np.linalg.solve(
                        obs_xx[j] + ridge * np.eye(d), obs_xy[j]
                    )
                    pred_sq = C[j] @ obs_xx[j] @ C[j] - 2.0 * C[j] @ obs_xy[j]
                    # recompute residual power under the new row
                    obs_sq_j = float(
                        sum(
                            ((y[np.isfinite(y[:, j]), j]) ** 2).sum() for y in seqs
                        )
                    )
                    R[j, j] = max((obs_sq_j + pred_sq) / obs_n[j], OBS_NOISE_FLOOR * obs_var[j])
                else:
                    R[j, j] = max(obs_sq[j] / obs_n[j], OBS_NOISE_FLOOR * obs_var[j])
    return A, Q, C, R, trace


def em_refine(
    params: RegimeParams,
    sequences,
    block_slices=None,
    max_iter: int = 100,
    rel_tol: float = 1e-6,
    update_c: bool = False,
    return_trace: bool = False,
):
    """EM refinement of A, Q, R with C held fixed (unless update_c).

    `sequences` are (T, d_y) arrays labelled with this regime; NaN cells are
    treated as missing.  `block_slices` optionally lists per-channel state
    slices so updates preserve the block-diagonal layout; severed blocks
    (all-zero C columns) are returned unchanged.  The initial-state prior is
    held fixed across iterations, so the marginal log-likelihood trace is
    non-decreasing (generalized EM).  R updates are diagonal.
    """
    seqs = [np.atleast_2d(np.asarray(s, dtype=float)) for s in sequences]
    if not seqs:
        raise ValueError("need at least one training sequence")
    for s in seqs:
        if s.shape[1] != params.obs_dim:
            raise ValueError("sequence channel count does not match regime")
    if block_slices is None:
        block_slices = [slice(0, params.state_dim)]

    A = np.array(params.A)
    Q = np.array(params.Q)
    C = np.array(params.C)
    R = np.array(params.R)
    traces = []
    for sl in block_slices:
        rows = np.flatnonzero(np.any(C[:, sl] != 0.0, axis=1))
        if rows.size == 0:
            continue
        outside = np.ones(params.state_dim, dtype=bool)
        outside[sl] = False
        if np.any(C[np.ix_(rows, np.flatnonzero(outside))] != 0.0):
            raise ValueError("C is not block-consistent with the given slices")
        sub_y = [s[:, rows] for s in seqs]
        Ab, Qb, Cb, Rb, trace = _em_block(
            A[sl, sl], Q[sl, sl], C[np.ix_(rows, np.arange(sl.start, sl.stop))],
            R[np.ix_(rows, rows)], sub_y, max_iter, rel_tol, update_c,
        )
        A[sl, sl] = Ab
        Q[sl, sl] = Qb
        C[np.ix_(rows, np.arange(sl.start, sl.stop))] = Cb
        R[np.ix_(rows, rows)] = Rb
        traces.append(trace)
    out = RegimeParams(A, Q, C, R, params.regime_id)
    return (out, traces) if return_trace else out
