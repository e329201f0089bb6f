"""Evaluation harness: AUC, nested cross-validation, grids, alpha selection.

AUC follows the rank-statistic identity (ties count one half), so it agrees
exactly with pairwise concordance counting.  Fold plans partition patients
into P disjoint outer test sets with leave-one-patient-out inner folds; the
structural no-leakage property is validated at construction.  Model
evaluation trains per outer fold, selects hyperparameters on the inner
folds only, picks the mixture weight alpha on training-patient outputs,
and pools test-set scores globally (per-fold values are reported too).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .inference import ALPHA_LIMIT, PROB_FLOOR

DEFAULT_ALPHA_GRID = tuple(np.arange(-3.0, 6.0 + 1e-9, 0.25))


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------


def roc_auc(scores, labels, return_curve: bool = False):
    """Area under the ROC curve; ties between scores count one half.

    With return_curve=True also returns (fpr, tpr, thresholds) with one
    point per distinct threshold plus the all-negative origin.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching vectors")
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("both classes must be present")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    auc = float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))
    if not return_curve:
        return auc

    desc = np.argsort(-scores, kind="stable")
    s = scores[desc]
    y = labels[desc]
    distinct = np.flatnonzero(np.diff(s) != 0.0)
    idx = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y)[idx]
    fp = np.cumsum(1 - y)[idx]
    tpr = np.concatenate([[0.0], tp / n1])
    fpr = np.concatenate([[0.0], fp / n0])
    thresholds = np.concatenate([[np.inf], s[idx]])
    return auc, (fpr, tpr, thresholds)


def pairwise_concordance(scores, labels) -> float:
    """O(n^2) oracle: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both classes must be present")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationTrack:
    """Ground-truth factor intervals for one patient.

    intervals maps factor name -> tuple of (start, end, value) with end
    exclusive; intervals of one factor must not overlap.  Steps outside any
    interval carry the baseline value 0.
    """

    intervals: dict
    sampling_rate: float = 1.0

    def __post_init__(self):
        cleaned = {}
        for name, spans in dict(self.intervals).items():
            spans = tuple((int(s), int(e), int(v)) for s, e, v in spans)
            for s, e, v in spans:
                if e <= s:
                    raise ValueError(f"{name}: empty interval ({s}, {e})")
                if v < 0:
                    raise ValueError(f"{name}: negative factor value")
            ordered = sorted(spans)
            for (s1, e1, _), (s2, _, _) in zip(ordered, ordered[1:]):
                if s2 < e1:
                    raise ValueError(f"{name}: overlapping intervals")
            cleaned[name] = spans
        object.__setattr__(self, "intervals", cleaned)
        object.__setattr__(self, "sampling_rate", float(self.sampling_rate))

    def check_bounds(self, T: int):
        for name, spans in self.intervals.items():
            for s, e, _ in spans:
                if s < 0 or e > T:
                    raise ValueError(
                        f"{name}: interval ({s}, {e}) outside sequence of length {T}"
                    )
        return self

    def step_values(self, T: int, factor_names) -> np.ndarray:
        """(T, M) integer factor values, baseline 0 outside intervals."""
        out = np.zeros((T, len(factor_names)), dtype=int)
        for m, name in enumerate(factor_names):
            for s, e, v in self.intervals.get(name, ()):
                out[s:e, m] = v
        return out

    def binary_labels(self, T: int, factor_name: str) -> np.ndarray:
        """Per-step 0/1 labels: inside any non-baseline interval of the factor."""
        out = np.zeros(T, dtype=int)
        for s, e, v in self.intervals.get(factor_name, ()):
            if v != 0:
                out[s:e] = 1
        return out


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    """Outer test partitions with per-fold leave-one-patient-out inner folds."""

    patients: tuple
    outer_tests: tuple  # per fold: tuple of test patients
    inner_folds: tuple  # per fold: tuple of (train tuple, validation tuple)
    seed: int = 0

    def __post_init__(self):
        patients = tuple(self.patients)
        seen = [p for fold in self.outer_tests for p in fold]
        if sorted(seen) != sorted(patients):
            raise ValueError("outer test sets must be disjoint and exhaustive")
        for test, inner in zip(self.outer_tests, self.inner_folds):
            test_set = set(test)
            for train, val in inner:
                members = set(train) | set(val)
                if members & test_set:
                    raise ValueError("inner fold leaks an outer test patient")
                if set(train) & set(val):
                    raise ValueError("inner train and validation overlap")
        object.__setattr__(self, "patients", patients)
        object.__setattr__(self, "outer_tests", tuple(tuple(f) for f in self.outer_tests))
        object.__setattr__(
            self,
            "inner_folds",
            tuple(tuple((tuple(tr), tuple(va)) for tr, va in inner)
                  for inner in self.inner_folds),
        )

    @property
    def n_outer(self) -> int:
        return len(self.outer_tests)

    def outer_train(self, fold: int) -> tuple:
        test = set(self.outer_tests[fold])
        return tuple(p for p in self.patients if p not in test)


def build_fold_plan(patients, P: int = 3, seed: int = 0) -> FoldPlan:
    """Deterministic P-fold outer plan with leave-one-patient-out inner folds."""
    patients = list(patients)
    if P < 2:
        raise ValueError("need at least 2 outer folds")
    if len(patients) < P:
        raise ValueError(f"{len(patients)} patients cannot fill {P} folds")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    outer = [tuple(order[i::P]) for i in range(P)]
    inner = []
    for test in outer:
        train_pool = [p for p in order if p not in test]
        folds = []
        for held in train_pool:
            folds.append((tuple(p for p in train_pool if p != held), (held,)))
        inner.append(tuple(folds))
    return FoldPlan(tuple(order), tuple(outer), tuple(inner), seed=seed)


# ---------------------------------------------------------------------------
# Hyperparameter grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridPoint:
    n_trees: int
    l: int
    r: int

    def key(self):
        return (self.n_trees, self.l, self.r)


@dataclass(frozen=True)
class GridSpec:
    """Declared hyperparameter sets; the defaults follow the usual search."""

    n_trees_set: tuple = (10, 25, 50, 100, 200)
    l_set: tuple = (4, 9, 14, 19, 29, 49)
    r_set: tuple = (0, 5, 10)

    def points(self):
        return [
            GridPoint(n, l, r)
            for n, l, r in product(self.n_trees_set, self.l_set, self.r_set)
        ]

    def __contains__(self, point: GridPoint) -> bool:
        return (
            point.n_trees in self.n_trees_set
            and point.l in self.l_set
            and point.r in self.r_set
        )


def grid_search(inner_folds, grid_points, objective) -> GridPoint:
    """Grid point maximising the mean objective over inner folds.

    `objective(point, train_patients, val_patients)` returns a score (mean
    per-factor AUC); points whose evaluation raises are skipped.  Ties break
    toward fewer trees, then smaller l, then smaller r.
    """
    if not grid_points:
        raise ValueError("empty hyperparameter grid")
    results = []
    for point in grid_points:
        try:
            vals = [objective(point, tr, va) for tr, va in inner_folds]
        except Exception:  # noqa: BLE001 - a failed point is skipped, not fatal
            continue
        results.append((float(np.mean(vals)), point))
    if not results:
        raise RuntimeError("every grid point failed to evaluate")
    best_score = max(score for score, _ in results)
    contenders = [p for score, p in results if score >= best_score - 1e-12]
    return min(contenders, key=lambda p: p.key())


# ---------------------------------------------------------------------------
# Alpha selection
# ---------------------------------------------------------------------------


def alpha_pool_binary(p_g, p_d, alpha: float, floor: float = PROB_FLOOR) -> np.ndarray:
    """Vectorised alpha-mixture of two on-probability vectors.

    Each element is pooled as the two-point distribution (1-p, p), floored
    and renormalised; returns the pooled on-probability.
    """
    pg = np.asarray(p_g, dtype=float)
    pd = np.asarray(p_d, dtype=float)
    g1 = np.maximum(pg, floor)
    g0 = np.maximum(1.0 - pg, floor)
    g1, g0 = g1 / (g1 + g0), g0 / (g1 + g0)
    d1 = np.maximum(pd, floor)
    d0 = np.maximum(1.0 - pd, floor)
    d1, d0 = d1 / (d1 + d0), d0 / (d1 + d0)
    if alpha >= ALPHA_LIMIT:
        m1, m0 = np.minimum(g1, d1), np.minimum(g0, d0)
    elif alpha <= -ALPHA_LIMIT:
        m1, m0 = np.maximum(g1, d1), np.maximum(g0, d0)
    elif alpha == -1.0:
        m1, m0 = g1 + d1, g0 + d0
    elif abs(1.0 - alpha) < 1e-9:
        m1, m0 = np.sqrt(g1 * d1), np.sqrt(g0 * d0)
    else:
        t = (1.0 - alpha) / 2.0
        l1 = np.logaddexp(t * np.log(g1), t * np.log(d1)) / t
        l0 = np.logaddexp(t * np.log(g0), t * np.log(d0)) / t
        top = np.maximum(l1, l0)
        m1, m0 = np.exp(l1 - top), np.exp(l0 - top)
    return m1 / (m1 + m0)


def select_alpha(p_g_runs, p_d_runs, label_runs, alphas=None) -> float:
    """Alpha maximising mean per-factor AUC across folds; ties -> smallest.

    The runs are parallel lists over folds; each entry is a (T, F) array of
    per-factor on-probabilities (labels binary, same shape).
    """
    alphas = DEFAULT_ALPHA_GRID if alphas is None else tuple(alphas)
    if not (len(p_g_runs) == len(p_d_runs) == len(label_runs)):
        raise ValueError("runs must align across folds")
    best_alpha, best_score = None, -np.inf
    for alpha in alphas:
        fold_scores = []
        for pg, pd, lab in zip(p_g_runs, p_d_runs, label_runs):
            pg = np.atleast_2d(pg)
            pd = np.atleast_2d(pd)
            lab = np.atleast_2d(lab)
            aucs = []
            for f in range(pg.shape[1]):
                if len(np.unique(lab[:, f])) < 2:
                    continue
                mixed = alpha_pool_binary(pg[:, f], pd[:, f], alpha)
                aucs.append(roc_auc(mixed, lab[:, f]))
            if aucs:
                fold_scores.append(np.mean(aucs))
        score = float(np.mean(fold_scores)) if fold_scores else -np.inf
        if score > best_score + 1e-12:
            best_alpha, best_score = alpha, score
    if best_alpha is None:
        raise ValueError("no fold produced a scorable factor")
    return float(best_alpha)


# ---------------------------------------------------------------------------
# End-to-end model comparison
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    """Knobs for the nested-CV comparison of the three models."""

    factor_configs: tuple  # dataio.FactorConfig declarations
    grid: GridSpec = field(default_factory=GridSpec)
    alphas: tuple = DEFAULT_ALPHA_GRID
    min_leaf: int = 5
    forest_seed: int = 7
    train_stride: int = 2  # row subsampling when fitting the final forests
    inner_stride: int = 3  # row subsampling inside the grid search
    em_iterations: int = 8
    max_stable_steps: int = 1500
    stable_d: int = None
    out_dir: str = None


def _factor_scores(output, factor_names):
    return np.stack([output.factor_score(name) for name in factor_names], axis=1)


def evaluate_models(dataset, plan: FoldPlan, cfg: EvalConfig):
    """Nested-CV comparison; returns per-factor AUC tables for all models.

    Hyperparameters for the discriminative model come from the inner folds;
    the generative model is fit once per outer fold (orders via AIC); the
    mixture weight is selected on training-patient outputs per outer fold.
    Test scores are pooled globally across outer folds and reported per
    fold as well.
    """
    from .train import TrainConfig, cached_features, fit_classifiers, run_model, train_bundle

    factor_names = tuple(fc.name for fc in cfg.factor_configs)
    feat_labels_cache = {}
    pooled = {
        model: {f: ([], []) for f in factor_names}
        for model in ("dslds", "fslds", "mixture")
    }
    per_fold = []
    alphas_used = []

    for fold_idx in range(plan.n_outer):
        train_p = plan.outer_train(fold_idx)
        test_p = plan.outer_tests[fold_idx]

        def objective(point, inner_train, inner_val):
            # switch AUC only: the latent state never enters the objective,
            # so the classifiers are scored directly on validation features
            tc = TrainConfig(
                n_trees=point.n_trees, l=point.l, r=point.r,
                min_leaf=cfg.min_leaf, forest_seed=cfg.forest_seed,
                train_stride=cfg.inner_stride,
            )
            clfs = fit_classifiers(dataset, inner_train, cfg.factor_configs, tc,
                                   cache=feat_labels_cache)
            window = tc.window_spec()
            aucs = []
            for pid in inner_val:
                rec = dataset.patients[pid]
                T = rec.vitals.shape[0]
                X, schema_id = cached_features(dataset, pid, window, feat_labels_cache)
                for clf, name in zip(clfs, factor_names):
                    lab = rec.track.binary_labels(T, name)
                    if len(np.unique(lab)) < 2:
                        continue
                    aucs.append(roc_auc(clf.marginals(X, schema_id)[:, 1], lab))
            if not aucs:
                raise RuntimeError("no scorable validation factor")
            return float(np.mean(aucs))

        best = grid_search(plan.inner_folds[fold_idx], cfg.grid.points(), objective)

        tc = TrainConfig(
            window=None, n_trees=best.n_trees, l=best.l, r=best.r,
            min_leaf=cfg.min_leaf, forest_seed=cfg.forest_seed,
            train_stride=cfg.train_stride,
            em_iterations=cfg.em_iterations,
            max_stable_steps=cfg.max_stable_steps,
            stable_d=cfg.stable_d,
        )
        bundle = train_bundle(dataset, train_p, cfg.factor_configs, tc,
                              cache=feat_labels_cache)

        # mixture weight from training-patient outputs only
        pg_runs, pd_runs, lab_runs = [], [], []
        for pid in train_p:
            rec = dataset.patients[pid]
            T = rec.vitals.shape[0]
            d_out = run_model(bundle, dataset, pid, model="dslds")
            g_out = run_model(bundle, dataset, pid, model="fslds")
            pd_runs.append(_factor_scores(d_out, factor_names))
            pg_runs.append(_factor_scores(g_out, factor_names))
            lab_runs.append(
                np.stack([rec.track.binary_labels(T, f) for f in factor_names], axis=1)
            )
        alpha = select_alpha(pg_runs, pd_runs, lab_runs, cfg.alphas)
        alphas_used.append(alpha)

        fold_record = {"fold": fold_idx, "grid_point": best, "alpha": alpha, "auc": {}}
        fold_scores = {
            model: {f: ([], []) for f in factor_names}
            for model in ("dslds", "fslds", "mixture")
        }
        for pid in test_p:
            rec = dataset.patients[pid]
            T = rec.vitals.shape[0]
            d_out = run_model(bundle, dataset, pid, model="dslds")
            g_out = run_model(bundle, dataset, pid, model="fslds")
            sd = _factor_scores(d_out, factor_names)
            sg = _factor_scores(g_out, factor_names)
            for fi, name in enumerate(factor_names):
                lab = rec.track.binary_labels(T, name)
                mixed = alpha_pool_binary(sg[:, fi], sd[:, fi], alpha)
                for model, scores in (
                    ("dslds", sd[:, fi]), ("fslds", sg[:, fi]), ("mixture", mixed)
                ):
                    pooled[model][name][0].append(scores)
                    pooled[model][name][1].append(lab)
                    fold_scores[model][name][0].append(scores)
                    fold_scores[model][name][1].append(lab)
        for model in ("dslds", "fslds", "mixture"):
            fold_record["auc"][model] = {}
            for name in factor_names:
                s = np.concatenate(fold_scores[model][name][0])
                lab = np.concatenate(fold_scores[model][name][1])
                fold_record["auc"][model][name] = (
                    roc_auc(s, lab) if len(np.unique(lab)) == 2 else None
                )
        per_fold.append(fold_record)

    table = {model: {} for model in ("dslds", "fslds", "mixture")}
    for model in table:
        for name in factor_names:
            scores = np.concatenate(pooled[model][name][0])
            labels = np.concatenate(pooled[model][name][1])
            table[model][name] = roc_auc(scores, labels)

    return {
        "auc_table": table,
        "factor_names": factor_names,
        "alphas": alphas_used,
        "per_fold": per_fold,
        "pooled_scores": pooled,
    }


def alpha_sweep(results, alphas=None):
    """Mean and per-factor AUC of the mixture over the pooled test scores."""
    alphas = DEFAULT_ALPHA_GRID if alphas is None else tuple(alphas)
    pooled = results["pooled_scores"]
    factor_names = results["factor_names"]
    rows = []
    for alpha in alphas:
        per_factor = []
        for name in factor_names:
            sg = np.concatenate(pooled["fslds"][name][0])
            sd = np.concatenate(pooled["dslds"][name][0])
            lab = np.concatenate(pooled["fslds"][name][1])
            per_factor.append(roc_auc(alpha_pool_binary(sg, sd, alpha), lab))
        rows.append((float(alpha), float(np.mean(per_factor)), tuple(per_factor)))
    return rows


def write_evaluation_outputs(results, out_dir, cfg: EvalConfig = None,
                             plan: FoldPlan = None):
    """CSV tables, ROC point files, alpha sweep, and the run manifest."""
    os.makedirs(out_dir, exist_ok=True)
    factors = results["factor_names"]
    table = results["auc_table"]
    with open(os.path.join(out_dir, "auc_table.csv"), "w", encoding="utf-8") as fh:
        fh.write("AUC," + ",".join(factors) + "\n")
        for model in ("dslds", "fslds", "mixture"):
            fh.write(model + "," + ",".join(repr(table[model][f]) for f in factors) + "\n")

    with open(os.path.join(out_dir, "per_fold.csv"), "w", encoding="utf-8") as fh:
        fh.write("fold,alpha,n_trees,l,r,model,factor,auc\n")
        for rec in results["per_fold"]:
            gp = rec["grid_point"]
            for model in ("dslds", "fslds", "mixture"):
                for f in factors:
                    auc = rec["auc"][model][f]
                    fh.write(
                        f"{rec['fold']},{rec['alpha']},{gp.n_trees},{gp.l},{gp.r},"
                        f"{model},{f},{'' if auc is None else repr(auc)}\n"
                    )

    pooled = results["pooled_scores"]
    for model in ("dslds", "fslds", "mixture"):
        for f in factors:
            scores = np.concatenate(pooled[model][f][0])
            labels = np.concatenate(pooled[model][f][1])
            _, (fpr, tpr, thr) = roc_auc(scores, labels, return_curve=True)
            path = os.path.join(out_dir, f"roc_{model}_{f}.csv")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("fpr,tpr,threshold\n")
                for a, b, c in zip(fpr, tpr, thr):
                    fh.write(f"{repr(float(a))},{repr(float(b))},{repr(float(c))}\n")

    sweep = alpha_sweep(results, cfg.alphas if cfg is not None else None)
    with open(os.path.join(out_dir, "alpha_sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("alpha,mean_auc," + ",".join(factors) + "\n")
        for alpha, mean_auc, per_factor in sweep:
            fh.write(
                f"{repr(alpha)},{repr(mean_auc)},"
                + ",".join(repr(v) for v in per_factor) + "\n"
            )

    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("sldsmon-evaluation 1\n")
        if plan is not None:
            fh.write(f"fold_seed = {plan.seed}\n")
            for i, test in enumerate(plan.outer_tests):
                fh.write(f"outer_test_{i} = {','.join(test)}\n")
        if cfg is not None:
            fh.write(f"grid_n_trees = {','.join(str(v) for v in cfg.grid.n_trees_set)}\n")
            fh.write(f"grid_l = {','.join(str(v) for v in cfg.grid.l_set)}\n")
            fh.write(f"grid_r = {','.join(str(v) for v in cfg.grid.r_set)}\n")
            fh.write(f"forest_seed = {cfg.forest_seed}\n")
            fh.write(f"train_stride = {cfg.train_stride}\n")
        fh.write(f"alphas_selected = {','.join(repr(a) for a in results['alphas'])}\n")
        for rec in results["per_fold"]:
            gp = rec["grid_point"]
            fh.write(f"fold_{rec['fold']}_grid_point = {gp.n_trees},{gp.l},{gp.r}\n")
        fh.write("[end]\n")
