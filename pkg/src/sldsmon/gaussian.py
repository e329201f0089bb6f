"""Gaussian belief algebra for linear-Gaussian state estimation.

Filtering primitives shared by every model variant: prediction through
linear dynamics, measurement conditioning with partial observations,
predictive log-density evaluation, and collapse of weighted Gaussian
mixtures by moment matching.  Covariances are re-symmetrised after every
operation and measurement updates use the Joseph form, so round-off cannot
push a belief away from positive semi-definiteness.

Conventions
-----------
* A measurement vector may contain NaN entries; those channels carry no
  information and their rows are removed from (y, C, R) before updating.
* An all-zero row of C means the channel is severed from the latent state
  (artifact).  Severed rows are removed from updates (they cannot move the
  posterior) but are kept in `gaussian_loglik`, where they score the raw
  value against N(0, R_ii).
* All types are immutable after construction and all operations are pure,
  so they can be used from any number of concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

#: Diagonal jitter added to innovation covariances before factorisation.
INNOVATION_JITTER = 1e-9

#: Smallest admissible covariance eigenvalue (after symmetrisation).
PSD_EIG_TOL = -1e-9

LOG_2PI = float(np.log(2.0 * np.pi))


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Return the symmetric part 0.5 * (M + M^T)."""
    return 0.5 * (mat + mat.T)


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GaussianBelief:
    """Multivariate normal over the latent state.

    mean has shape (d,), cov has shape (d, d).  Construction copies and
    freezes both arrays and rejects non-finite values; `validate` performs
    the full symmetry/PSD check (kept out of the hot path).
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise ValueError("belief mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"covariance shape {cov.shape} does not match state dim {mean.size}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("belief contains non-finite values")
        object.__setattr__(self, "mean", _frozen_array(mean))
        object.__setattr__(self, "cov", _frozen_array(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    def validate(self, eig_tol: float = PSD_EIG_TOL, sym_tol: float = 1e-10) -> "GaussianBelief":
        """Raise ValueError unless cov is symmetric and PSD within tolerance."""
        asym = np.max(np.abs(self.cov - self.cov.T)) if self.dim else 0.0
        if asym > sym_tol:
            raise ValueError(f"covariance asymmetry {asym:g} exceeds {sym_tol:g}")
        eigs = np.linalg.eigvalsh(symmetrize(self.cov))
        if eigs.size and eigs.min() < eig_tol:
            raise ValueError(f"covariance eigenvalue {eigs.min():g} below {eig_tol:g}")
        return self


@dataclass(frozen=True)
class RegimeParams:
    """State-space matrices (A, Q, C, R) for one switch configuration."""

    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    R: np.ndarray
    regime_id: int = 0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        d = A.shape[0]
        if A.shape != (d, d) or Q.shape != (d, d):
            raise ValueError("A and Q must be square with matching dimension")
        if C.shape[1] != d:
            raise ValueError(f"C has {C.shape[1]} state columns, expected {d}")
        m = C.shape[0]
        if R.shape != (m, m):
            raise ValueError(f"R shape {R.shape} does not match {m} observation rows")
        for name, arr in (("A", A), ("Q", Q), ("C", C), ("R", R)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, _frozen_array(arr))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    def has_binary_c(self) -> bool:
        """True when every C entry is 0/1 with at most one 1 per row."""
        is01 = np.all((self.C == 0.0) | (self.C == 1.0))
        return bool(is01 and np.all(self.C.sum(axis=1) <= 1.0))

    def validate(self, eig_tol: float = PSD_EIG_TOL) -> "RegimeParams":
        for name, arr in (("Q", self.Q), ("R", self.R)):
            if np.max(np.abs(arr - arr.T)) > 1e-10:
                raise ValueError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(symmetrize(arr)).min() < eig_tol:
                raise ValueError(f"{name} is not PSD within tolerance")
        return self


@dataclass(frozen=True)
class WeightedGaussianMixture:
    """Finite mixture of Gaussian beliefs with a normalised weight vector."""

    weights: np.ndarray
    beliefs: tuple

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        beliefs = tuple(self.beliefs)
        if len(beliefs) < 1:
            raise ValueError("mixture needs at least one component")
        if w.size != len(beliefs):
            raise ValueError("weight/component count mismatch")
        if np.any(w < -1e-12):
            raise ValueError("negative mixture weight")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")
        dims = {b.dim for b in beliefs}
        if len(dims) != 1:
            raise ValueError("mixture components have mismatched dimensions")
        object.__setattr__(self, "weights", _frozen_array(np.maximum(w, 0.0)))
        object.__setattr__(self, "beliefs", beliefs)

    def __len__(self) -> int:
        return len(self.beliefs)


# ---------------------------------------------------------------------------
# Filtering operations
# ---------------------------------------------------------------------------


def kalman_predict(belief: GaussianBelief, A: np.ndarray, Q: np.ndarray) -> GaussianBelief:
    """Propagate a belief through x' = A x + w, w ~ N(0, Q)."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if A.shape != (belief.dim, belief.dim):
        raise ValueError(f"A shape {A.shape} does not match state dim {belief.dim}")
    if Q.shape != A.shape:
        raise ValueError("Q shape does not match A")
    mean = A @ belief.mean
    cov = symmetrize(A @ belief.cov @ A.T + Q)
    return GaussianBelief(mean, cov)  # constructor rejects non-finite results


def observable_rows(y: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Indices of rows that are both measured (finite y) and connected (C != 0)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    connected = np.any(C != 0.0, axis=1)
    return np.flatnonzero(np.isfinite(y) & connected)


def kalman_update(
    belief: GaussianBelief, y: np.ndarray, C: np.ndarray, R: np.ndarray
) -> GaussianBelief:
    """Condition a belief on a (possibly partial) linear-Gaussian measurement.

    Rows with NaN measurements or all-zero C are removed before the update;
    with no usable rows the input belief is returned unchanged.  The Joseph
    form keeps the posterior covariance PSD under round-off.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if C.shape[1] != belief.dim:
        raise ValueError(f"C has {C.shape[1]} columns, expected {belief.dim}")
    if y.size != C.shape[0] or R.shape != (y.size, y.size):
        raise ValueError("y, C, R dimensions are inconsistent")

    rows = observable_rows(y, C)
    if rows.size == 0:
        return belief

    Co = C[rows]
    Ro = R[np.ix_(rows, rows)]
    yo = y[rows]
    P = belief.cov
    S = symmetrize(Co @ P @ Co.T + Ro) + INNOVATION_JITTER * np.eye(rows.size)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "innovation covariance is singular beyond jitter tolerance"
        ) from exc
    gain = np.linalg.solve(S, Co @ P).T  # P C^T S^{-1}
    mean = belief.mean + gain @ (yo - Co @ belief.mean)
    joseph = np.eye(belief.dim) - gain @ Co
    cov = symmetrize(joseph @ P @ joseph.T + gain @ Ro @ gain.T)
    return GaussianBelief(mean, cov)


def gaussian_loglik(
    belief: GaussianBelief, y: np.ndarray, C: np.ndarray, R: np.ndarray
) -> float:
    """Predictive log-density log N(y; C mean, C cov C^T + R) over measured rows.

    NaN rows are dropped; severed (all-zero C) rows are kept and scored
    against their own noise term, which is what lets a broad-noise regime
    explain a corrupted channel.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    rows = np.flatnonzero(np.isfinite(y))
    if rows.size == 0:
        raise ValueError("no measured channels: log-likelihood undefined")
    Co = C[rows]
    Ro = R[np.ix_(rows, rows)]
    resid = y[rows] - Co @ belief.mean
    S = symmetrize(Co @ belief.cov @ Co.T + Ro) + INNOVATION_JITTER * np.eye(rows.size)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("predictive covariance is not PSD") from exc
    z = np.linalg.solve(L, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (rows.size * LOG_2PI + logdet + z @ z))


def moment_match_collapse(mix: WeightedGaussianMixture) -> GaussianBelief:
    """Collapse a mixture to the single Gaussian with the same first two moments."""
    w = mix.weights
    means = np.stack([b.mean for b in mix.beliefs])
    mean = w @ means
    d = mean.size
    cov = np.zeros((d, d))
    for wi, b in zip(w, mix.beliefs):
        if wi == 0.0:
            continue
        delta = b.mean - mean
        cov += wi * (b.cov + np.outer(delta, delta))
    return GaussianBelief(mean, symmetrize(cov))


def stationary_cov(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Stationary state covariance solving P = A P A^T + Q (requires rho(A) < 1)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho >= 1.0 - 1e-10:
        raise ValueError(f"spectral radius {rho:g} is not inside the unit circle")
    return symmetrize(solve_discrete_lyapunov(A, Q))
