"""Training pipeline: annotated dataset -> model bundle.

Stable dynamics are learned per channel from stability stretches
(differencing heuristic, ACF/PACF order suggestion, exact-ML fits, AIC
selection, EM refinement), factor regimes are materialised from their
declarations (artifact values reference stable dynamics with broad
observation noise, the catch-all factor inflates the stable system noise),
and per-factor random forests are fit on window features of the labelled
steps.  `run_model` drives a trained bundle over one patient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arima import (
    ArimaFitError,
    ArimaOrder,
    acf,
    cast_to_state_space,
    em_refine,
    pacf,
    select_d,
    select_fit,
    suggest_orders,
)
from .dataio import AnnotatedDataset, ModelBundle, build_factor_specs
from .factors import ChannelDynamicsBlock, build_switch_space
from .features import WindowSpec, feature_matrix
from .forest import fit_forest
from .gaussian import RegimeParams
from .inference import FactorClassifier, dslds_filter, fslds_filter, mixture_output


@dataclass
class TrainConfig:
    window: WindowSpec = None  # built from (l, r) when None
    l: int = 9
    r: int = 0
    n_trees: int = 50
    min_leaf: int = 5
    forest_seed: int = 7
    train_stride: int = 1
    em_iterations: int = 8
    max_stable_steps: int = 1500
    min_stable_run: int = 30
    alpha: float = 0.5
    stable_d: int = None  # differencing order override; None = heuristic

    def window_spec(self) -> WindowSpec:
        return self.window if self.window is not None else WindowSpec(self.l, self.r)


def stable_segments(dataset: AnnotatedDataset, patients, factor_names, min_run: int):
    """Per-patient stretches where every factor sits at its baseline value."""
    segments = []
    for pid in patients:
        rec = dataset.patients[pid]
        T = rec.vitals.shape[0]
        values = rec.track.step_values(T, factor_names)
        quiet = np.all(values == 0, axis=1)
        start = None
        for t in range(T + 1):
            flag = quiet[t] if t < T else False
            if flag and start is None:
                start = t
            elif not flag and start is not None:
                if t - start >= min_run:
                    segments.append(rec.vitals[start:t])
                start = None
    if not segments:
        raise ValueError("no stability stretches long enough to train on")
    return segments


def fit_stable_blocks(segments, channel_names, cfg: TrainConfig):
    """Per-channel dynamics from stability data; returns (blocks, means)."""
    n_ch = len(channel_names)
    means = np.zeros(n_ch)
    blocks = []
    for c in range(n_ch):
        parts = [seg[:, c][np.isfinite(seg[:, c])] for seg in segments]
        series = np.concatenate([p for p in parts if p.size > 0])
        if series.size < 50:
            raise ValueError(f"channel {channel_names[c]!r}: too little stable data")
        means[c] = series.mean()
        x = (series - means[c])[: cfg.max_stable_steps]
        d = cfg.stable_d if cfg.stable_d is not None else select_d(x)
        w = np.diff(x, n=d) if d else x
        max_lag = min(12, w.size // 4)
        candidates = suggest_orders(acf(w, max_lag), pacf(w, max_lag), w.size, d=d)
        try:
            _, fit = select_fit(x, candidates)
        except ArimaFitError:
            _, fit = select_fit(x, [ArimaOrder(1, d, 0), ArimaOrder(2, d, 0)])
        blocks.append(cast_to_state_space(fit))
    return tuple(blocks), means


def refine_stable_blocks(blocks, segments, means, cfg: TrainConfig):
    """EM refinement of each channel block on the stability stretches."""
    if cfg.em_iterations <= 0:
        return tuple(blocks)
    refined = []
    for c, block in enumerate(blocks):
        C = np.zeros((1, block.dim))
        C[0, :] = block.selector
        params = RegimeParams(block.A, block.Q, C, [[block.obs_var]])
        seqs = [seg[:, c:c + 1] - means[c] for seg in segments]
        seqs = [s for s in seqs if np.isfinite(s).sum() >= 30][:4]
        if not seqs:
            refined.append(block)
            continue
        out = em_refine(params, seqs, max_iter=cfg.em_iterations)
        refined.append(
            ChannelDynamicsBlock(
                out.A, out.Q, float(out.R[0, 0]), block.selector, block.order
            )
        )
    return tuple(refined)


def cached_features(dataset, pid, window: WindowSpec, cache=None):
    """Feature matrix for one patient, memoised on the window geometry."""
    key = (pid, window.l, window.r, window.seg_len, window.ewma_width)
    if cache is not None and key in cache:
        return cache[key]
    rec = dataset.patients[pid]
    X, schema = feature_matrix(rec.vitals, window, dataset.channel_names)
    entry = (X, schema.schema_id)
    if cache is not None:
        cache[key] = entry
    return entry


def fit_classifiers(dataset, patients, factor_configs, cfg: TrainConfig, cache=None):
    """Per-factor forests on pooled window features of the training patients."""
    window = cfg.window_spec()
    xs, labels = [], {fc.name: [] for fc in factor_configs}
    schema_id = None
    for pid in patients:
        rec = dataset.patients[pid]
        X, schema_id = cached_features(dataset, pid, window, cache)
        T = rec.vitals.shape[0]
        xs.append(X[::cfg.train_stride])
        for fc in factor_configs:
            lab = rec.track.binary_labels(T, fc.name)
            labels[fc.name].append(lab[::cfg.train_stride])
    X_all = np.concatenate(xs, axis=0)
    classifiers = []
    for fc in factor_configs:
        y = np.concatenate(labels[fc.name])
        forest = fit_forest(
            X_all, y, n_trees=cfg.n_trees, min_leaf=cfg.min_leaf,
            seed=cfg.forest_seed, schema_id=schema_id,
        )
        classifiers.append(FactorClassifier(fc.name, 2, (forest,)))
    return tuple(classifiers)


def train_bundle(
    dataset: AnnotatedDataset,
    patients,
    factor_configs,
    cfg: TrainConfig = None,
    classifiers_only: bool = False,
    cache=None,
) -> ModelBundle:
    """Full training pass over the given patients.

    With classifiers_only=True the dynamics side is fit without EM
    refinement and with a stable-order shortcut — used by the
    hyperparameter grid search, where only the classifiers change.
    """
    cfg = cfg or TrainConfig()
    factor_names = tuple(fc.name for fc in factor_configs)

    dyn_key = ("dynamics", tuple(patients), cfg.max_stable_steps, cfg.stable_d,
               cfg.em_iterations if not classifiers_only else 0)
    if cache is not None and dyn_key in cache:
        stable_blocks, means = cache[dyn_key]
    else:
        segments = stable_segments(dataset, patients, factor_names, cfg.min_stable_run)
        stable_blocks, means = fit_stable_blocks(segments, dataset.channel_names, cfg)
        if not classifiers_only:
            stable_blocks = refine_stable_blocks(stable_blocks, segments, means, cfg)
        if cache is not None:
            cache[dyn_key] = (stable_blocks, means)

    factors = build_factor_specs(factor_configs, stable_blocks, dataset.channel_names)
    space = build_switch_space(dataset.channel_names, stable_blocks, factors)
    classifiers = fit_classifiers(dataset, patients, factor_configs, cfg, cache)
    return ModelBundle(
        channel_names=dataset.channel_names,
        channel_means=means,
        window=cfg.window_spec(),
        alpha=cfg.alpha,
        stable_blocks=stable_blocks,
        factors=factors,
        regimes=space.regimes,
        classifiers=classifiers,
    )


def run_model(bundle: ModelBundle, dataset: AnnotatedDataset, patient_id,
              model: str = "dslds", alpha: float = None, lag: int = None,
              switch_source: str = "classifier"):
    """Filter one patient's vitals with a trained bundle.

    `lag` sets the reported emission delay; the feature window is part of
    the trained bundle, so the effective delay never falls below its r.
    """
    rec = dataset.patients[patient_id]
    space = bundle.switch_space()
    window = bundle.window
    if model == "dslds":
        labels = None
        if switch_source == "labels":
            T = rec.vitals.shape[0]
            labels = rec.track.step_values(T, space.factor_names)
        return dslds_filter(
            rec.vitals, space, bundle.classifiers, window,
            channel_means=bundle.channel_means,
            switch_source=switch_source, labels=labels, emit_lag=lag,
        )
    if model == "fslds":
        return fslds_filter(
            rec.vitals, space, channel_means=bundle.channel_means,
            lag=window.r if lag is None else max(int(lag), window.r),
        )
    if model == "mixture":
        d_out = run_model(bundle, dataset, patient_id, "dslds")
        g_out = run_model(bundle, dataset, patient_id, "fslds")
        a = bundle.alpha if alpha is None else alpha
        return mixture_output(d_out, g_out, a, space)
    raise ValueError(f"unknown model {model!r}")
