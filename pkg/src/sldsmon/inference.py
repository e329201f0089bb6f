"""Switch-posterior and latent-physiology inference.

Two filters over the factored switch space plus their combination:

* the discriminative filter takes per-step switch posteriors from
  per-factor classifiers (joint = product of marginals) and updates the
  latent state as a product of a dynamics expert and a measurement expert,
  collapsing the per-configuration mixture to one Gaussian per step;
* the generative filter propagates one Gaussian per configuration with the
  Gaussian-Sum (GPB) recursion — K x K predict/update, transition- and
  likelihood-weighted in log space, collapsed back to K components;
* an alpha-mixture pools the two switch posteriors per factor marginal,
  spanning arithmetic mean (alpha = -1), normalized geometric mean
  (alpha -> 1), and min/max in the limits.

Severed (artifact) channels contribute no measurement information to the
latent update; their latent blocks follow the observation-free prediction
recursion, which is what the imputation output reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .factors import SwitchSpace, joint_stationary, transition_matrix
from .features import WindowSpec, feature_matrix
from .forest import predict_proba_matrix
from .gaussian import (
    GaussianBelief,
    WeightedGaussianMixture,
    gaussian_loglik,
    kalman_predict,
    kalman_update,
    moment_match_collapse,
    stationary_cov,
)

PROB_FLOOR = 1e-6
ALPHA_LIMIT = 1e6


@dataclass(frozen=True)
class SwitchPosterior:
    """Per-factor marginals plus the joint over all K configurations."""

    factor_names: tuple
    cardinalities: tuple
    marginals: tuple
    joint: np.ndarray

    def __post_init__(self):
        marginals = tuple(np.asarray(m, dtype=float) for m in self.marginals)
        joint = np.asarray(self.joint, dtype=float)
        if len(marginals) != len(self.factor_names):
            raise ValueError("one marginal per factor required")
        if self.factor_names:
            k = 1
            for card, m in zip(self.cardinalities, marginals):
                if m.shape != (card,):
                    raise ValueError("marginal length does not match cardinality")
                if abs(m.sum() - 1.0) > 1e-9 or np.any(m < -1e-12):
                    raise ValueError("marginal is not a distribution")
                k *= card
        else:
            k = joint.size  # anonymous configuration space (no factor structure)
        if joint.shape != (k,) or abs(joint.sum() - 1.0) > 1e-9 or np.any(joint < -1e-12):
            raise ValueError("joint is not a distribution over all configurations")
        object.__setattr__(self, "factor_names", tuple(self.factor_names))
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        object.__setattr__(self, "marginals", marginals)
        object.__setattr__(self, "joint", joint)

    @classmethod
    def from_marginals(cls, factor_names, cardinalities, marginals):
        """Joint as the product of marginals (the factorised assumption)."""
        marginals = [np.asarray(m, dtype=float) for m in marginals]
        joint = np.ones(1)
        for m in marginals:
            joint = np.outer(joint, m).ravel()  # last factor varies fastest
        return cls(tuple(factor_names), tuple(cardinalities), tuple(marginals), joint)

    @classmethod
    def from_joint(cls, factor_names, cardinalities, joint):
        """Marginals by summing the joint over the other factors."""
        joint = np.asarray(joint, dtype=float)
        dims = tuple(int(c) for c in cardinalities) or (1,)
        cube = joint.reshape(dims)
        marginals = []
        for m in range(len(cardinalities)):
            axes = tuple(a for a in range(len(cardinalities)) if a != m)
            marginals.append(cube.sum(axis=axes))
        return cls(tuple(factor_names), tuple(cardinalities), tuple(marginals), joint)

    def degenerate_on(self):
        return int(np.argmax(self.joint))


@dataclass(frozen=True)
class FilterState:
    """Per-configuration weights and Gaussian beliefs at one time step."""

    weights: np.ndarray
    beliefs: tuple
    t: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.size != len(self.beliefs):
            raise ValueError("weight/belief count mismatch")
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w < -1e-12):
            raise ValueError("weights are not a distribution")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "beliefs", tuple(self.beliefs))

    def collapsed(self) -> GaussianBelief:
        return moment_match_collapse(WeightedGaussianMixture(self.weights, self.beliefs))


@dataclass
class InferenceOutput:
    """Per-step switch posteriors, latent beliefs, and channel imputations."""

    model: str
    times: np.ndarray
    emit_times: np.ndarray
    factor_names: tuple
    cardinalities: tuple
    factor_probs: tuple  # per factor: (T, L)
    joint: np.ndarray  # (T, K)
    x_mean: np.ndarray
    x_cov: np.ndarray
    imputed_mean: np.ndarray  # (T, C), channel means restored
    imputed_sigma: np.ndarray
    artifact_flag: np.ndarray  # (T, C) bool, from the MAP configuration
    map_config: np.ndarray
    channel_names: tuple

    def __post_init__(self):
        T = len(self.times)
        for arr in (self.emit_times, self.joint, self.x_mean, self.imputed_mean,
                    self.imputed_sigma, self.artifact_flag, self.map_config):
            if len(arr) != T:
                raise ValueError("output arrays must share the step count")
        if not np.all(np.isfinite(self.imputed_sigma)):
            raise ValueError("uncertainty band must be finite")

    def factor_score(self, name: str) -> np.ndarray:
        """P(factor is away from its baseline value) per step."""
        m = self.factor_names.index(name)
        return 1.0 - self.factor_probs[m][:, 0]

    def write_csv(self, path):
        cols = ["timestamp", "emit_time"]
        for name, card in zip(self.factor_names, self.cardinalities):
            cols += [f"p_{name}_{v}" for v in range(card)]
        cols += ["map_config"]
        for ch in self.channel_names:
            cols += [f"imputed_{ch}", f"sigma_{ch}", f"artifact_{ch}"]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for t in range(len(self.times)):
                row = [str(int(self.times[t])), str(int(self.emit_times[t]))]
                for m in range(len(self.factor_names)):
                    row += [repr(float(v)) for v in self.factor_probs[m][t]]
                row.append(str(int(self.map_config[t])))
                for c in range(len(self.channel_names)):
                    row += [
                        repr(float(self.imputed_mean[t, c])),
                        repr(float(self.imputed_sigma[t, c])),
                        "1" if self.artifact_flag[t, c] else "0",
                    ]
                fh.write(",".join(row) + "\n")


def impute_physiology(output: InferenceOutput, channel: str):
    """Imputed series for one channel: (mean, two_sigma_band, artifact_flags)."""
    if channel not in output.channel_names:
        raise KeyError(f"unknown channel {channel!r}")
    c = output.channel_names.index(channel)
    mean = output.imputed_mean[:, c]
    band = 2.0 * output.imputed_sigma[:, c]
    return mean, band, output.artifact_flag[:, c]


# ---------------------------------------------------------------------------
# Classifier wrapper
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactorClassifier:
    """Per-factor probabilistic classifier built from binary forests.

    Binary factors carry one forest for value 1; factors with more values
    carry one one-vs-rest forest per value, normalised to a distribution.
    """

    factor_name: str
    cardinality: int
    forests: tuple

    def __post_init__(self):
        expected = 1 if self.cardinality == 2 else self.cardinality
        if len(self.forests) != expected:
            raise ValueError(
                f"factor {self.factor_name!r} needs {expected} forest(s)"
            )

    def marginals(self, X, schema_id=None) -> np.ndarray:
        """(T, L) per-value probabilities for a feature matrix."""
        if self.cardinality == 2:
            p = predict_proba_matrix(self.forests[0], X, schema_id)
            return np.stack([1.0 - p, p], axis=1)
        scores = np.stack(
            [predict_proba_matrix(f, X, schema_id) for f in self.forests], axis=1
        )
        scores = np.clip(scores, 1e-9, None)
        return scores / scores.sum(axis=1, keepdims=True)


def dslds_switch_posterior(classifiers, features, schema_id=None) -> SwitchPosterior:
    """Factorised switch posterior from per-factor classifiers at one step."""
    values = getattr(features, "values", features)
    sid = schema_id or getattr(features, "schema_id", None)
    X = np.asarray(values, dtype=float)[None, :]
    marginals = [clf.marginals(X, sid)[0] for clf in classifiers]
    return SwitchPosterior.from_marginals(
        tuple(c.factor_name for c in classifiers),
        tuple(c.cardinality for c in classifiers),
        marginals,
    )


# ---------------------------------------------------------------------------
# Discriminative filter
# ---------------------------------------------------------------------------


def dslds_x_step(prev: GaussianBelief, s_post: SwitchPosterior, y_t, regimes,
                 predict: bool = True):
    """One latent-state step: per-regime predict+update, classifier-weighted.

    Severed/missing measurement rows drop out of the update, so a regime
    that severs a channel advances that channel's block by prediction only.
    Returns (FilterState, collapsed GaussianBelief).
    """
    joint = s_post.joint
    if len(regimes) != joint.size:
        raise ValueError("regime count does not match switch posterior")
    beliefs = []
    for k, regime in enumerate(regimes):
        b = kalman_predict(prev, regime.A, regime.Q) if predict else prev
        if joint[k] > 0.0:
            b = kalman_update(b, y_t, regime.C, regime.R)
        beliefs.append(b)
    state = FilterState(joint, tuple(beliefs))
    return state, state.collapsed()


def _init_belief(space: SwitchSpace, y0_demeaned, scale=10.0):
    """Broad initial belief: lag positions seeded from the first observation."""
    layout = space.layout
    mean = np.zeros(layout.state_dim)
    var = np.empty(layout.state_dim)
    for c, (off, size) in enumerate(zip(layout.offsets, layout.block_sizes)):
        v0 = y0_demeaned[c] if np.isfinite(y0_demeaned[c]) else 0.0
        mean[off:off + size] = v0
        block = layout.stable_blocks[c]
        try:
            base = float(stationary_cov(block.A, block.Q)[0, 0])
        except ValueError:  # unit-root block has no stationary variance
            base = float(block.Q.max()) * 25.0
        base = max(base, 1e-6)
        var[off:off + size] = scale * base
    return GaussianBelief(mean, np.diag(var))


def _labels_to_marginal_rows(space: SwitchSpace, labels):
    labels = np.atleast_2d(np.asarray(labels, dtype=int))
    rows = []
    for m, f in enumerate(space.factors):
        marg = np.zeros((labels.shape[0], f.cardinality))
        marg[np.arange(labels.shape[0]), labels[:, m]] = 1.0
        rows.append(marg)
    return rows


def _finalize_output(model, space, channel_means, marg_rows, joint_rows,
                     means, covs, lag):
    T = len(means)
    layout = space.layout
    C_count = layout.n_channels
    x_mean = np.stack(means)
    x_cov = np.stack(covs)
    joint = np.stack(joint_rows)
    map_cfg = joint.argmax(axis=1)
    imure = np.empty((T, C_count))
    sigma = np.empty((T, C_count))
    flags = np.zeros((T, C_count), dtype=bool)
    offs = layout.offsets
    for c in range(C_count):
        imure[:, c] = x_mean[:, offs[c]] + channel_means[c]
        sigma[:, c] = np.sqrt(np.maximum(x_cov[:, offs[c], offs[c]], 0.0))
    for t in range(T):
        sev = np.all(space.regimes[map_cfg[t]].C == 0.0, axis=1)
        flags[t] = sev
    times = np.arange(T)
    return InferenceOutput(
        model=model,
        times=times,
        emit_times=times + lag,
        factor_names=space.factor_names,
        cardinalities=space.cardinalities,
        factor_probs=tuple(marg_rows),
        joint=joint,
        x_mean=x_mean,
        x_cov=x_cov,
        imputed_mean=imure,
        imputed_sigma=sigma,
        artifact_flag=flags,
        map_config=map_cfg,
        channel_names=layout.channel_names,
    )


def dslds_filter(
    y,
    space: SwitchSpace,
    classifiers,
    window: WindowSpec,
    channel_means=None,
    switch_source: str = "classifier",
    labels=None,
    joint_override=None,
    emit_lag: int = None,
) -> InferenceOutput:
    """Discriminative filtering of a (T, C) vital-sign sequence.

    The switch posterior at step t comes from the classifiers applied to
    the feature window y[t-l : t+r] (so outputs trail by r steps), from
    ground-truth `labels` (switch_source="labels"), or from an explicit
    per-step `joint_override` (T, K).  Channel means are subtracted before
    latent-state updates and restored in the imputation columns.
    `emit_lag` inflates the reported emission delay beyond the window's r
    (it can never fall below r — features need the future samples).
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T, C = y.shape
    if T == 0:
        raise ValueError("empty sequence")
    if C != space.layout.n_channels:
        raise ValueError("channel count does not match the switch space")
    means = np.zeros(C) if channel_means is None else np.asarray(channel_means, dtype=float)
    y_d = y - means

    names, cards = space.factor_names, space.cardinalities
    if joint_override is not None:
        joint_seq = np.asarray(joint_override, dtype=float)
        marg_per_factor = None
    elif switch_source == "labels":
        if labels is None:
            raise ValueError("labels required for switch_source='labels'")
        marg_per_factor = _labels_to_marginal_rows(space, labels)
        joint_seq = None
    elif switch_source == "classifier":
        X, schema = feature_matrix(y, window, space.layout.channel_names)
        marg_per_factor = [clf.marginals(X, schema.schema_id) for clf in classifiers]
        joint_seq = None
    else:
        raise ValueError(f"unknown switch source {switch_source!r}")

    belief = _init_belief(space, y_d[0])
    marg_rows, joint_rows, x_means, x_covs = [], [], [], []
    for t in range(T):
        if joint_override is not None:
            post = SwitchPosterior.from_joint(names, cards, joint_seq[t])
        else:
            post = SwitchPosterior.from_marginals(
                names, cards, [m[t] for m in marg_per_factor]
            )
        _, belief = dslds_x_step(belief, post, y_d[t], space.regimes, predict=t > 0)
        marg_rows.append(post.marginals)
        joint_rows.append(post.joint)
        x_means.append(belief.mean)
        x_covs.append(belief.cov)

    marg_stacked = tuple(
        np.stack([row[m] for row in marg_rows]) for m in range(len(names))
    )
    lag = window.r if emit_lag is None else max(int(emit_lag), window.r)
    return _finalize_output(
        "dslds", space, means, marg_stacked, joint_rows, x_means, x_covs, lag
    )


# ---------------------------------------------------------------------------
# Generative (Gaussian-Sum) filter
# ---------------------------------------------------------------------------


def fslds_gpb_step(state: FilterState, y_t, regimes, factors=None, trans=None):
    """One Gaussian-Sum step: K x K predict/update collapsed back to K.

    Weights are handled in log space with max subtraction.  `trans` may be
    supplied directly (K x K); otherwise it is built from `factors`.
    Returns (FilterState, SwitchPosterior).
    """
    K = len(regimes)
    if trans is None:
        if factors is None:
            raise ValueError("need factors or an explicit transition matrix")
        trans = transition_matrix(factors)
    y_t = np.atleast_1d(np.asarray(y_t, dtype=float))
    any_obs = bool(np.isfinite(y_t).any())

    with np.errstate(divide="ignore"):
        log_prev = np.log(state.weights)
        log_trans = np.log(trans)
    logw = np.full((K, K), -np.inf)
    updated = [[None] * K for _ in range(K)]
    for i in range(K):
        if not np.isfinite(log_prev[i]):
            continue
        for j in range(K):
            base = log_prev[i] + log_trans[i, j]
            if not np.isfinite(base):
                continue
            regime = regimes[j]
            pred = kalman_predict(state.beliefs[i], regime.A, regime.Q)
            ll = gaussian_loglik(pred, y_t, regime.C, regime.R) if any_obs else 0.0
            updated[i][j] = kalman_update(pred, y_t, regime.C, regime.R)
            logw[i, j] = base + ll

    top = logw.max()
    if not np.isfinite(top):
        raise FloatingPointError("all switch weights underflowed")
    w = np.exp(logw - top)
    w /= w.sum()
    new_weights = w.sum(axis=0)
    beliefs = []
    for j in range(K):
        wj = new_weights[j]
        if wj <= 0.0:
            # unreachable configuration this step; keep a prediction placeholder
            i_best = int(np.argmax(state.weights))
            beliefs.append(
                kalman_predict(state.beliefs[i_best], regimes[j].A, regimes[j].Q)
            )
            continue
        comps = [(w[i, j] / wj, updated[i][j]) for i in range(K) if w[i, j] > 0.0]
        weights = np.array([c[0] for c in comps])
        weights /= weights.sum()
        beliefs.append(
            moment_match_collapse(
                WeightedGaussianMixture(weights, tuple(c[1] for c in comps))
            )
        )
    new_weights = new_weights / new_weights.sum()
    new_state = FilterState(new_weights, tuple(beliefs), t=state.t + 1)
    if factors is not None:
        post = SwitchPosterior.from_joint(
            tuple(f.name for f in factors),
            tuple(f.cardinality for f in factors),
            new_weights,
        )
    else:
        post = SwitchPosterior((), (), (), new_weights)
    return new_state, post


def fslds_filter(
    y,
    space: SwitchSpace,
    channel_means=None,
    lag: int = 0,
) -> InferenceOutput:
    """Gaussian-Sum filtering of a (T, C) sequence under the factored model.

    The switch prior at t=1 is the stationary distribution of the factored
    chain; the first step is measurement-only.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T, C = y.shape
    if T == 0:
        raise ValueError("empty sequence")
    means = np.zeros(C) if channel_means is None else np.asarray(channel_means, dtype=float)
    y_d = y - means

    K = space.n_configs
    init = _init_belief(space, y_d[0])
    pi = joint_stationary(space.factors, space.configs)
    logw = np.full(K, -np.inf)
    beliefs = []
    any_obs = bool(np.isfinite(y_d[0]).any())
    for j, regime in enumerate(space.regimes):
        ll = gaussian_loglik(init, y_d[0], regime.C, regime.R) if any_obs else 0.0
        beliefs.append(kalman_update(init, y_d[0], regime.C, regime.R))
        with np.errstate(divide="ignore"):
            logw[j] = np.log(pi[j]) + ll
    w = np.exp(logw - logw.max())
    w /= w.sum()
    state = FilterState(w, tuple(beliefs), t=0)

    names, cards = space.factor_names, space.cardinalities
    post = SwitchPosterior.from_joint(names, cards, w)
    marg_rows = [post.marginals]
    joint_rows = [post.joint]
    collapsed = state.collapsed()
    x_means, x_covs = [collapsed.mean], [collapsed.cov]
    for t in range(1, T):
        state, post = fslds_gpb_step(
            state, y_d[t], space.regimes, factors=space.factors, trans=space.trans
        )
        collapsed = state.collapsed()
        marg_rows.append(post.marginals)
        joint_rows.append(post.joint)
        x_means.append(collapsed.mean)
        x_covs.append(collapsed.cov)

    marg_stacked = tuple(
        np.stack([row[m] for row in marg_rows]) for m in range(len(names))
    )
    return _finalize_output(
        "fslds", space, means, marg_stacked, joint_rows, x_means, x_covs, lag
    )


# ---------------------------------------------------------------------------
# Alpha-mixture of switch posteriors
# ---------------------------------------------------------------------------


def alpha_pool(p, q, alpha: float, floor: float = PROB_FLOOR) -> np.ndarray:
    """Pool two distributions through the alpha-mixture family.

    alpha = -1 is the arithmetic mean, alpha -> 1 the normalized geometric
    mean, and |alpha| -> inf the (normalized) elementwise min/max.  Inputs
    are floored and renormalized so negative exponents are well defined.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions must share a shape")
    p = np.maximum(p, floor)
    p = p / p.sum()
    q = np.maximum(q, floor)
    q = q / q.sum()
    if alpha >= ALPHA_LIMIT:
        out = np.minimum(p, q)
    elif alpha <= -ALPHA_LIMIT:
        out = np.maximum(p, q)
    elif alpha == -1.0:
        out = 0.5 * (p + q)
    elif abs(1.0 - alpha) < 1e-9:
        out = np.sqrt(p * q)
    else:
        t = (1.0 - alpha) / 2.0
        log_mix = np.logaddexp(t * np.log(p), t * np.log(q)) / t
        out = np.exp(log_mix - log_mix.max())
    return out / out.sum()


def alpha_mixture(p_g: SwitchPosterior, p_d: SwitchPosterior, alpha: float) -> SwitchPosterior:
    """Alpha-mixture applied to each factor marginal; joint = product."""
    if (p_g.factor_names != p_d.factor_names
            or p_g.cardinalities != p_d.cardinalities):
        raise ValueError("posteriors are over different factor spaces")
    mixed = [
        alpha_pool(mg, md, alpha) for mg, md in zip(p_g.marginals, p_d.marginals)
    ]
    return SwitchPosterior.from_marginals(p_g.factor_names, p_g.cardinalities, mixed)


def mixture_output(
    d_out: InferenceOutput, g_out: InferenceOutput, alpha: float,
    space: SwitchSpace = None,
) -> InferenceOutput:
    """Combine two filter runs into an alpha-mixture run.

    Switch posteriors are pooled per factor marginal; the latent-state
    outputs are carried over from the discriminative run (pooled-weight
    x-state recursion is available via dslds_filter(joint_override=...)).
    With `space` given, artifact flags are recomputed from the mixed MAP
    configuration; otherwise the discriminative flags are kept.
    """
    if d_out.factor_names != g_out.factor_names:
        raise ValueError("runs cover different factors")
    T = len(d_out.times)
    mixed_marginals = []
    for m in range(len(d_out.factor_names)):
        rows = np.stack(
            [
                alpha_pool(g_out.factor_probs[m][t], d_out.factor_probs[m][t], alpha)
                for t in range(T)
            ]
        )
        mixed_marginals.append(rows)
    joint = np.empty_like(d_out.joint)
    for t in range(T):
        joint[t] = SwitchPosterior.from_marginals(
            d_out.factor_names,
            d_out.cardinalities,
            [rows[t] for rows in mixed_marginals],
        ).joint
    map_cfg = joint.argmax(axis=1)
    if space is not None:
        flags = np.zeros_like(d_out.artifact_flag)
        for t in range(T):
            flags[t] = np.all(space.regimes[map_cfg[t]].C == 0.0, axis=1)
    else:
        flags = d_out.artifact_flag
    return InferenceOutput(
        model="alpha_mixture",
        times=d_out.times,
        emit_times=d_out.emit_times,
        factor_names=d_out.factor_names,
        cardinalities=d_out.cardinalities,
        factor_probs=tuple(mixed_marginals),
        joint=joint,
        x_mean=d_out.x_mean,
        x_cov=d_out.x_cov,
        imputed_mean=d_out.imputed_mean,
        imputed_sigma=d_out.imputed_sigma,
        artifact_flag=flags,
        map_config=map_cfg,
        channel_names=d_out.channel_names,
    )
