"""Factored switch space: factor definitions, config enumeration, regime assembly.

The discrete state-of-health is the cross product of M factor variables
(e.g. a blood-sample artifact, an unexplained-abnormality factor).  Each
factor value may claim a set of channels and supply the dynamics block used
for those channels while it is active; artifact values additionally sever
the measurement connection for the channels they claim.  This module
enumerates the joint configurations, evaluates factored transition
probabilities, and composes per-configuration state-space matrices
(A, Q, C, R) from per-channel dynamics blocks.

Latent state layout: one contiguous block per channel, sized to the largest
dynamics block any factor value can install on that channel, so every
composed regime shares the same state dimension (required for mixture
collapse across regimes).  Smaller blocks embed exactly — their extra lag
positions just carry older history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian import RegimeParams, _frozen_array

#: Guard against exponential blowup of the joint switch space.
DEFAULT_CONFIG_LIMIT = 4096

#: Default per-value self-transition probability when a factor does not
#: declare its own chain.
DEFAULT_SELF_TRANSITION = 0.999


@dataclass(frozen=True)
class ChannelDynamicsBlock:
    """State-space dynamics for one channel under one factor value.

    The block carries the lag-state transition matrix (dimension p+d+1,
    plus q noise-history positions when q > 0), the system-noise block, a
    scalar observation-noise variance, and the 0/1 selector row that reads
    the current value off the state.
    """

    A: np.ndarray
    Q: np.ndarray
    obs_var: float
    selector: np.ndarray
    order: tuple  # (p, d, q)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        sel = np.atleast_1d(np.asarray(self.selector, dtype=float))
        p, d, q = (int(v) for v in self.order)
        n = p + d + 1 + q
        if A.shape != (n, n):
            raise ValueError(f"block A shape {A.shape} != ({n}, {n}) for order {self.order}")
        if Q.shape != A.shape or sel.size != n:
            raise ValueError("block Q/selector dimensions inconsistent with A")
        if not np.all((sel == 0.0) | (sel == 1.0)):
            raise ValueError("selector row must be 0/1")
        if not self.obs_var > 0.0:
            raise ValueError("observation noise variance must be positive")
        object.__setattr__(self, "A", _frozen_array(A))
        object.__setattr__(self, "Q", _frozen_array(Q))
        object.__setattr__(self, "selector", _frozen_array(sel))
        object.__setattr__(self, "obs_var", float(self.obs_var))
        object.__setattr__(self, "order", (p, d, q))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def lag_dim(self) -> int:
        p, d, q = self.order
        return p + d + 1

    @property
    def eps_dim(self) -> int:
        return self.order[2]


def uniform_self_transition(cardinality: int, stay: float = DEFAULT_SELF_TRANSITION) -> np.ndarray:
    """Row-stochastic matrix with `stay` on the diagonal, rest spread evenly."""
    if cardinality < 2:
        raise ValueError("cardinality must be >= 2")
    off = (1.0 - stay) / (cardinality - 1)
    mat = np.full((cardinality, cardinality), off)
    np.fill_diagonal(mat, stay)
    return mat


@dataclass(frozen=True)
class FactorSpec:
    """One discrete cause with L values, its Markov chain and channel claims.

    affected_channels[v] is the set of channel indices value v claims;
    channel_models[v] maps a claimed channel index to the dynamics block to
    install there, or to None to reference the channel's stable block.
    is_artifact[v] marks values that sever the measurement connection on
    their claimed channels.  `priority` breaks ties between artifact values
    of different factors claiming the same channel (lower wins).
    """

    name: str
    cardinality: int
    transition: np.ndarray
    affected_channels: tuple = ()
    channel_models: tuple = ()
    is_artifact: tuple = ()
    priority: int = 0

    def __post_init__(self):
        L = int(self.cardinality)
        if L < 2:
            raise ValueError(f"factor {self.name!r}: cardinality must be >= 2")
        trans = np.atleast_2d(np.asarray(self.transition, dtype=float))
        if trans.shape != (L, L):
            raise ValueError(f"factor {self.name!r}: transition must be {L}x{L}")
        if np.any(trans < -1e-12):
            raise ValueError(f"factor {self.name!r}: negative transition probability")
        if np.max(np.abs(trans.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError(f"factor {self.name!r}: transition rows must sum to 1")
        affected = tuple(frozenset(s) for s in self.affected_channels) or tuple(
            frozenset() for _ in range(L)
        )
        models = tuple(dict(m) for m in self.channel_models) or tuple({} for _ in range(L))
        artifact = tuple(bool(b) for b in self.is_artifact) or (False,) * L
        if not (len(affected) == len(models) == len(artifact) == L):
            raise ValueError(f"factor {self.name!r}: per-value fields must have length {L}")
        object.__setattr__(self, "cardinality", L)
        object.__setattr__(self, "transition", _frozen_array(trans))
        object.__setattr__(self, "affected_channels", affected)
        object.__setattr__(self, "channel_models", models)
        object.__setattr__(self, "is_artifact", artifact)
        object.__setattr__(self, "priority", int(self.priority))

    def stationary_distribution(self) -> np.ndarray:
        """Stationary distribution of this factor's Markov chain."""
        vals, vecs = np.linalg.eig(self.transition.T)
        k = int(np.argmin(np.abs(vals - 1.0)))
        pi = np.abs(np.real(vecs[:, k]))
        return pi / pi.sum()


@dataclass(frozen=True)
class SwitchConfig:
    """One joint assignment of all factor values, with its linear index.

    The linear index is the mixed-radix encoding with the last factor
    varying fastest.
    """

    values: tuple
    linear_index: int

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        object.__setattr__(self, "linear_index", int(self.linear_index))


def _radix_strides(factors) -> tuple:
    strides = [1] * len(factors)
    for m in range(len(factors) - 2, -1, -1):
        strides[m] = strides[m + 1] * factors[m + 1].cardinality
    return tuple(strides)


def config_index(values, factors) -> int:
    strides = _radix_strides(factors)
    idx = 0
    for v, f, s in zip(values, factors, strides):
        if not 0 <= v < f.cardinality:
            raise ValueError(f"value {v} out of range for factor {f.name!r}")
        idx += v * s
    return idx


def config_from_index(index: int, factors) -> SwitchConfig:
    strides = _radix_strides(factors)
    values = []
    rem = int(index)
    for f, s in zip(factors, strides):
        values.append(rem // s)
        rem %= s
    return SwitchConfig(tuple(values), index)


def num_configs(factors) -> int:
    k = 1
    for f in factors:
        k *= f.cardinality
    return k


def enumerate_configs(factors, limit: int = DEFAULT_CONFIG_LIMIT) -> list:
    """All K = prod(L_m) switch configurations in mixed-radix order."""
    if len(factors) < 1:
        raise ValueError("need at least one factor")
    k = num_configs(factors)
    if k > limit:
        raise ValueError(f"switch space has {k} configurations, exceeding limit {limit}")
    return [config_from_index(i, factors) for i in range(k)]


def factored_transition(prev: SwitchConfig, nxt: SwitchConfig, factors) -> float:
    """p(next | prev) as the product of per-factor transition entries."""
    if len(prev.values) != len(factors) or len(nxt.values) != len(factors):
        raise ValueError("configs do not match the factor list")
    prob = 1.0
    for a, b, f in zip(prev.values, nxt.values, factors):
        prob *= f.transition[a, b]
    return float(prob)


def transition_matrix(factors, configs=None) -> np.ndarray:
    """Dense K x K joint transition matrix of the factored chain."""
    configs = configs if configs is not None else enumerate_configs(factors)
    k = len(configs)
    mat = np.empty((k, k))
    for i, ci in enumerate(configs):
        for j, cj in enumerate(configs):
            mat[i, j] = factored_transition(ci, cj, factors)
    return mat


def joint_stationary(factors, configs=None) -> np.ndarray:
    """Stationary distribution of the joint chain (product of factor chains)."""
    configs = configs if configs is not None else enumerate_configs(factors)
    pis = [f.stationary_distribution() for f in factors]
    out = np.empty(len(configs))
    for i, cfg in enumerate(configs):
        p = 1.0
        for v, pi in zip(cfg.values, pis):
            p *= pi[v]
        out[i] = p
    return out / out.sum()


# ---------------------------------------------------------------------------
# Channel layout and regime composition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelLayout:
    """Fixed latent-state layout shared by every composed regime."""

    channel_names: tuple
    stable_blocks: tuple
    lag_sizes: tuple
    eps_sizes: tuple

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def block_sizes(self) -> tuple:
        return tuple(l + e for l, e in zip(self.lag_sizes, self.eps_sizes))

    @property
    def offsets(self) -> tuple:
        offs, acc = [], 0
        for s in self.block_sizes:
            offs.append(acc)
            acc += s
        return tuple(offs)

    @property
    def state_dim(self) -> int:
        return sum(self.block_sizes)

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise KeyError(f"unknown channel {name!r}") from None


def build_channel_layout(channel_names, stable_blocks, factors=()) -> ChannelLayout:
    """Size each channel's block to the largest model that can claim it."""
    names = tuple(channel_names)
    stable = tuple(stable_blocks)
    if len(stable) != len(names):
        raise ValueError("one stable block per channel required")
    lag = [b.lag_dim for b in stable]
    eps = [b.eps_dim for b in stable]
    for f in factors:
        for v in range(f.cardinality):
            for c in f.affected_channels[v]:
                if not 0 <= c < len(names):
                    raise ValueError(
                        f"factor {f.name!r} value {v} claims unknown channel index {c}"
                    )
                block = f.channel_models[v].get(c)
                if block is not None:
                    lag[c] = max(lag[c], block.lag_dim)
                    eps[c] = max(eps[c], block.eps_dim)
    return ChannelLayout(names, stable, tuple(lag), tuple(eps))


def embed_block(block: ChannelDynamicsBlock, lag_size: int, eps_size: int):
    """Embed a block into a (lag_size + eps_size) slot, exactly.

    Native lag positions map to the leading lag slots and native noise
    positions to the leading eps slots; padded lag positions shift history
    down and padded eps positions decay to zero.  The native state marginal
    is unchanged.

    Returns (A, Q, selector) of the embedded size.
    """
    nl, ne = block.lag_dim, block.eps_dim
    if lag_size < nl or eps_size < ne:
        raise ValueError("embedding target smaller than native block")
    n = lag_size + eps_size
    idx = np.concatenate([np.arange(nl), lag_size + np.arange(ne)]).astype(int)
    A = np.zeros((n, n))
    Q = np.zeros((n, n))
    A[np.ix_(idx, idx)] = block.A
    Q[np.ix_(idx, idx)] = block.Q
    for i in range(nl, lag_size):  # padded lag slots carry older history
        A[i, i - 1] = 1.0
    sel = np.zeros(n)
    sel[idx] = block.selector
    return A, Q, sel


def compose_regime(
    config: SwitchConfig,
    factors,
    layout: ChannelLayout,
    binary_c: bool = True,
) -> RegimeParams:
    """Assemble (A, Q, C, R) for one switch configuration.

    Per channel, the active factor value claiming it supplies the dynamics
    block (artifact values referencing None fall back to the stable block);
    otherwise the stable block is used.  Artifact claims zero the channel's
    C row.  Artifact values dominate physiological values; two active
    physiological claimants with no precedence raise.
    """
    if len(config.values) != len(factors):
        raise ValueError("config does not match factor list")
    n = layout.state_dim
    offsets = layout.offsets
    A = np.zeros((n, n))
    Q = np.zeros((n, n))
    C = np.zeros((layout.n_channels, n))
    R = np.zeros((layout.n_channels, layout.n_channels))

    for c in range(layout.n_channels):
        artifact_claims = []
        phys_claims = []
        for m, (f, v) in enumerate(zip(factors, config.values)):
            if c in f.affected_channels[v]:
                entry = (f.priority, m, f, v)
                (artifact_claims if f.is_artifact[v] else phys_claims).append(entry)
        severed = bool(artifact_claims)
        if artifact_claims:
            _, _, f, v = min(artifact_claims)
            block = f.channel_models[v].get(c) or layout.stable_blocks[c]
        elif len(phys_claims) > 1:
            names = ", ".join(f"{f.name}={v}" for _, _, f, v in sorted(phys_claims))
            raise ValueError(
                f"channel {layout.channel_names[c]!r} claimed by multiple "
                f"non-artifact factor values with no precedence: {names}"
            )
        elif phys_claims:
            _, _, f, v = phys_claims[0]
            block = f.channel_models[v].get(c) or layout.stable_blocks[c]
        else:
            block = layout.stable_blocks[c]

        Ab, Qb, sel = embed_block(block, layout.lag_sizes[c], layout.eps_sizes[c])
        off = offsets[c]
        size = layout.block_sizes[c]
        A[off:off + size, off:off + size] = Ab
        Q[off:off + size, off:off + size] = Qb
        if not severed:
            if binary_c and not np.all((sel == 0.0) | (sel == 1.0)):
                raise ValueError("non-binary selector under the binary-C convention")
            C[c, off:off + size] = sel
        R[c, c] = block.obs_var

    return RegimeParams(A, Q, C, R, regime_id=config.linear_index)


@dataclass(frozen=True)
class SwitchSpace:
    """Factors plus everything derived from them that inference needs."""

    factors: tuple
    layout: ChannelLayout
    configs: tuple
    regimes: tuple
    trans: np.ndarray

    @property
    def n_configs(self) -> int:
        return len(self.configs)

    @property
    def factor_names(self) -> tuple:
        return tuple(f.name for f in self.factors)

    @property
    def cardinalities(self) -> tuple:
        return tuple(f.cardinality for f in self.factors)


def build_switch_space(
    channel_names,
    stable_blocks,
    factors,
    binary_c: bool = True,
    limit: int = DEFAULT_CONFIG_LIMIT,
) -> SwitchSpace:
    factors = tuple(factors)
    layout = build_channel_layout(channel_names, stable_blocks, factors)
    configs = tuple(enumerate_configs(factors, limit=limit))
    regimes = tuple(compose_regime(cfg, factors, layout, binary_c=binary_c) for cfg in configs)
    trans = transition_matrix(factors, configs)
    return SwitchSpace(factors, layout, configs, regimes, trans)
