"""Acceptance suite: one test per criterion, one PASS line each.

Run with `pytest tests/test_acceptance.py -v -s`.  The end-to-end benchmark
(criterion 7) simulates six patients, trains with nested cross-validation,
and is the slow part of the suite; its fixtures are shared with the
imputation criterion.
"""

import time

import numpy as np
import pytest

from sldsmon.arima import (
    ArimaOrder,
    cast_to_state_space,
    em_refine,
    expand_ar_with_differencing,
    fit_arima_ml,
    select_order,
)
from sldsmon.dataio import (
    AnnotatedDataset,
    ModelBundle,
    PatientRecord,
    load_bundle,
    load_dataset,
    save_bundle,
    save_dataset,
)
from sldsmon.dataio import _encode_tree  # noqa: F401 - determinism fingerprint
from sldsmon.evaluation import (
    AnnotationTrack,
    EvalConfig,
    GridSpec,
    build_fold_plan,
    evaluate_models,
    pairwise_concordance,
    roc_auc,
)
from sldsmon.factors import FactorSpec, uniform_self_transition
from sldsmon.features import WindowSpec, feature_matrix
from sldsmon.forest import fit_forest, predict_proba_matrix
from sldsmon.gaussian import (
    GaussianBelief,
    RegimeParams,
    WeightedGaussianMixture,
    kalman_predict,
    kalman_update,
    moment_match_collapse,
    symmetrize,
)
from sldsmon.inference import FactorClassifier, alpha_pool
from sldsmon.simulate import ar_dynamics_block, benchmark_scenario, simulate
from sldsmon.train import TrainConfig, run_model, train_bundle


def _report(num, name, detail=""):
    print(f"\nACCEPTANCE {num:02d} {name}: PASS {detail}".rstrip())


# ---------------------------------------------------------------------------
# Shared heavy fixtures (benchmark dataset and a trained bundle)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def benchmark():
    scenario = benchmark_scenario(seed=7, length=2000, n_patients=6)
    dataset = simulate(scenario)
    return scenario, dataset


@pytest.fixture(scope="module")
def trained_bundle(benchmark):
    scenario, dataset = benchmark
    cfg = TrainConfig(l=19, r=5, n_trees=50, train_stride=2, em_iterations=6,
                      max_stable_steps=1500, stable_d=0)
    return train_bundle(dataset, ["p00", "p01", "p02", "p03"], scenario.factors, cfg)


# ---------------------------------------------------------------------------
# Criterion 1: Kalman filter vs joint-Gaussian conditioning oracle
# ---------------------------------------------------------------------------


def _joint_conditioning_oracle(A, Q, C, R, m0, P0, ys):
    T, dy = ys.shape
    dx = A.shape[0]
    mx = np.zeros((T, dx))
    Sxx = np.zeros((T, T, dx, dx))
    mx[0] = m0
    Sxx[0, 0] = P0
    for t in range(1, T):
        mx[t] = A @ mx[t - 1]
        for s in range(t):
            Sxx[t, s] = A @ Sxx[t - 1, s]
            Sxx[s, t] = Sxx[t, s].T
        Sxx[t, t] = A @ Sxx[t - 1, t - 1] @ A.T + Q
    my = np.concatenate([C @ mx[t] for t in range(T)])
    Syy = np.zeros((T * dy, T * dy))
    for t in range(T):
        for s in range(T):
            block = C @ Sxx[t, s] @ C.T
            if t == s:
                block = block + R
            Syy[t * dy:(t + 1) * dy, s * dy:(s + 1) * dy] = block
    yflat = ys.reshape(-1)
    out = []
    for t in range(T):
        k = (t + 1) * dy
        Sxy = np.concatenate([Sxx[t, s] @ C.T for s in range(t + 1)], axis=1)
        gain = np.linalg.solve(Syy[:k, :k], Sxy.T).T
        mean = mx[t] + gain @ (yflat[:k] - my[:k])
        cov = symmetrize(Sxx[t, t] - gain @ Sxy.T)
        out.append((mean, cov))
    return out


def test_criterion_01_kalman_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        dx = int(rng.integers(1, 5))
        dy = int(rng.integers(1, 3))
        A = rng.standard_normal((dx, dx))
        A *= 0.9 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-6)
        Q = (lambda m: symmetrize(m @ m.T / dx + 0.1 * np.eye(dx)))(
            rng.standard_normal((dx, dx))
        )
        C = rng.standard_normal((dy, dx))
        R = (lambda m: symmetrize(m @ m.T / dy + 0.1 * np.eye(dy)))(
            rng.standard_normal((dy, dy))
        )
        m0 = rng.standard_normal(dx)
        P0 = symmetrize(np.eye(dx) + 0.3 * rng.standard_normal((dx, dx)) @ np.eye(dx))
        P0 = symmetrize(P0 @ P0.T)
        x = rng.multivariate_normal(m0, P0)
        ys = np.empty((50, dy))
        for t in range(50):
            ys[t] = rng.multivariate_normal(C @ x, R)
            x = rng.multivariate_normal(A @ x, Q)
        belief = GaussianBelief(m0, P0)
        oracle = _joint_conditioning_oracle(A, Q, C, R, m0, P0, ys)
        for t in range(50):
            if t:
                belief = kalman_predict(belief, A, Q)
            belief = kalman_update(belief, ys[t], C, R)
            mean, cov = oracle[t]
            worst = max(
                worst,
                np.max(np.abs(belief.mean - mean)) / max(np.max(np.abs(mean)), 1e-12),
                np.max(np.abs(belief.cov - cov)) / max(np.max(np.abs(cov)), 1e-12),
            )
    elapsed = time.perf_counter() - start
    assert worst <= 1e-8, f"max relative error {worst:g}"
    assert elapsed < 5.0, f"runtime {elapsed:.2f}s"
    _report(1, "kalman oracle equivalence",
            f"(max rel err {worst:.2e}, {elapsed:.2f}s)")


def test_criterion_02_collapse_exactness():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 7))
        d = int(rng.integers(1, 5))
        w = rng.random(k) + 1e-3
        w /= w.sum()
        means = rng.standard_normal((k, d))
        covs = []
        for _ in range(k):
            m = rng.standard_normal((d, d))
            covs.append(symmetrize(m @ m.T / d + 0.05 * np.eye(d)))
        mix = WeightedGaussianMixture(
            w, tuple(GaussianBelief(mu, cv) for mu, cv in zip(means, covs))
        )
        got = moment_match_collapse(mix)
        mean = w @ means
        second = sum(wi * (cv + np.outer(mu, mu)) for wi, mu, cv in zip(w, means, covs))
        cov = second - np.outer(mean, mean)
        worst = max(worst, np.max(np.abs(got.mean - mean)), np.max(np.abs(got.cov - cov)))
    assert worst <= 1e-12, f"max deviation {worst:g}"
    _report(2, "moment-matching collapse exactness", f"(max dev {worst:.2e})")


def test_criterion_03_alpha_mixture_identities():
    rng = np.random.default_rng(303)
    worst_arith = worst_geom = worst_lim = 0.0
    checked = 0
    while checked < 50:
        n = int(rng.integers(2, 6))
        p = rng.random(n) + 1e-3
        p /= p.sum()
        q = rng.random(n) + 1e-3
        q /= q.sum()
        arith = alpha_pool(p, q, -1.0)
        worst_arith = max(worst_arith, np.max(np.abs(arith - 0.5 * (p + q))))
        geom = alpha_pool(p, q, 1.0)
        g = np.sqrt(p * q)
        worst_geom = max(worst_geom, np.max(np.abs(geom - g / g.sum())))
        # the min/max limit is asymptotic: at |alpha| = 50 it needs the
        # elements separated, else (p^t + q^t)^(1/t) still mixes them
        if np.min(np.abs(p - q)) < 0.1:
            continue
        checked += 1
        lo = np.minimum(p, q)
        hi = np.maximum(p, q)
        worst_lim = max(
            worst_lim,
            np.max(np.abs(alpha_pool(p, q, 50.0) - lo / lo.sum())),
            np.max(np.abs(alpha_pool(p, q, -50.0) - hi / hi.sum())),
        )
    assert worst_arith <= 1e-12, f"alpha=-1 deviation {worst_arith:g}"
    assert worst_geom <= 1e-12, f"alpha=1 deviation {worst_geom:g}"
    assert worst_lim <= 1e-3, f"alpha=+-50 deviation {worst_lim:g}"
    # named special cases
    np.testing.assert_allclose(alpha_pool([0.2, 0.8], [0.6, 0.4], -1.0), [0.4, 0.6],
                               atol=1e-12)
    np.testing.assert_allclose(alpha_pool([0.2, 0.8], [0.6, 0.4], 1.0),
                               [0.3798, 0.6202], atol=5e-5)
    _report(3, "alpha-mixture identities",
            f"(arith {worst_arith:.1e}, geom {worst_geom:.1e}, limits {worst_lim:.1e})")


def test_criterion_04_arima_pipeline():
    start = time.perf_counter()
    rng = np.random.default_rng(404)

    # casting equivalence under shared noise draws
    worst_cast = 0.0
    for phi, theta, d in (([0.5, -0.3], [], 0), ([0.8], [], 1), ([0.6], [0.4], 0)):
        block = ar_like_block = None
        fit = _FitStub(ArimaOrder(len(phi), d, len(theta)), np.array(phi),
                       np.array(theta), 0.81, 0.25)
        block = cast_to_state_space(fit)
        phi_full = expand_ar_with_differencing(phi, d)
        P, q = len(phi_full), len(theta)
        z = np.zeros(block.dim)
        x_hist = np.zeros(max(P, 1))
        e_hist = np.zeros(max(q, 1))
        for _ in range(250):
            eps = rng.standard_normal() * 0.9
            z = block.A @ z
            z[0] += eps
            if q:
                z[P + 1] += eps
            x = eps + (phi_full @ x_hist[:P] if P else 0.0)
            if q:
                x += np.asarray(theta) @ e_hist[:q]
            worst_cast = max(worst_cast, abs(z[0] - x))
            if P:
                x_hist = np.concatenate([[x], x_hist[:-1]])
            if q:
                e_hist = np.concatenate([[eps], e_hist[:-1]])
    assert worst_cast <= 1e-10, f"casting deviation {worst_cast:g}"

    # AIC order selection recovers AR(2) in >= 70% of 20 trials at N=5000
    candidates = [ArimaOrder(1, 0, 0), ArimaOrder(2, 0, 0), ArimaOrder(3, 0, 0)]
    hits = 0
    for trial in range(20):
        r2 = np.random.default_rng(10_000 + trial)
        x = np.zeros(5200)
        e = r2.standard_normal(5200)
        for t in range(2, 5200):
            x[t] = 0.5 * x[t - 1] - 0.3 * x[t - 2] + e[t]
        order = select_order(x[200:], candidates)
        hits += order == ArimaOrder(2, 0, 0)
    assert hits >= 14, f"AR(2) recovered in {hits}/20 trials"

    # EM monotonicity: 10 iterations x 5 seeds
    truth_block = ar_dynamics_block([0.6, -0.2], 1.0, 0.25)
    C = np.zeros((1, truth_block.dim))
    C[0, 0] = 1.0
    truth = RegimeParams(truth_block.A, truth_block.Q, C, [[0.25]])
    worst_drop = 0.0
    for seed in range(5):
        r3 = np.random.default_rng(600 + seed)
        xs = np.zeros(truth.state_dim)
        ys = np.empty((300, 1))
        chol = np.linalg.cholesky(truth.Q + 1e-12 * np.eye(truth.state_dim))
        for t in range(300):
            xs = truth.A @ xs + chol @ r3.standard_normal(truth.state_dim)
            ys[t, 0] = xs[0] + 0.5 * r3.standard_normal()
        A0 = np.array(truth.A)
        A0[0, :2] = r3.uniform(-0.4, 0.4, 2)
        start_params = RegimeParams(A0, 2.0 * truth.Q, truth.C, 2.0 * truth.R)
        _, traces = em_refine(start_params, [ys], max_iter=10, rel_tol=0.0,
                              return_trace=True)
        trace = np.asarray(traces[0])
        drops = np.diff(trace) + 1e-9 * np.maximum(1.0, np.abs(trace[:-1]))
        worst_drop = min(worst_drop, float(drops.min()))
        assert np.all(drops >= 0.0), f"seed {seed}: EM log-likelihood decreased"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"runtime {elapsed:.1f}s"
    _report(4, "arima pipeline",
            f"(cast dev {worst_cast:.1e}, AIC hits {hits}/20, {elapsed:.1f}s)")


class _FitStub:
    def __init__(self, order, ar, ma, sigma2_sys, sigma2_obs):
        self.order = order
        self.ar = ar
        self.ma = ma
        self.sigma2_sys = sigma2_sys
        self.sigma2_obs = sigma2_obs


def test_criterion_05_random_forest():
    rng = np.random.default_rng(505)
    X = rng.standard_normal((1200, 6))
    y = ((X[:, 1] + 0.8 * X[:, 4]) > 0).astype(int)
    forest = fit_forest(X[:800], y[:800], n_trees=50, seed=3)
    held_out = roc_auc(predict_proba_matrix(forest, X[800:]), y[800:])
    assert held_out >= 0.99, f"held-out AUC {held_out:.4f}"

    aucs = []
    for rep in range(20):
        r2 = np.random.default_rng(7000 + rep)
        Xp = r2.standard_normal((500, 6))
        yp = (Xp[:, 0] > 0).astype(int)
        y_perm = r2.permutation(yp)
        f = fit_forest(Xp[:250], y_perm[:250], n_trees=20, seed=rep)
        aucs.append(roc_auc(predict_proba_matrix(f, Xp[250:]), y_perm[250:]))
        assert 0.33 <= aucs[-1] <= 0.67, f"repeat {rep}: AUC {aucs[-1]:.3f}"
    mean_auc = float(np.mean(aucs))
    assert 0.43 <= mean_auc <= 0.57, f"permuted-label mean AUC {mean_auc:.3f}"

    f1 = fit_forest(X[:400], y[:400], n_trees=8, seed=99)
    f2 = fit_forest(X[:400], y[:400], n_trees=8, seed=99)
    for t1, t2 in zip(f1.trees, f2.trees):
        assert _encode_tree(t1) == _encode_tree(t2)
    p1 = predict_proba_matrix(f1, X[400:600])
    p2 = predict_proba_matrix(f2, X[400:600])
    assert np.array_equal(p1, p2)
    _report(5, "random forest",
            f"(held-out AUC {held_out:.4f}, permuted mean {mean_auc:.3f}, seeded bit-exact)")


def test_criterion_06_auc_concordance_oracle():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(10, 201))
        scores = np.round(rng.random(n) * 10) / 10  # heavy ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        worst = max(worst, abs(roc_auc(scores, labels) - pairwise_concordance(scores, labels)))
    assert worst <= 1e-12, f"max AUC deviation {worst:g}"
    _report(6, "AUC pairwise-concordance oracle", f"(max dev {worst:.1e})")


def test_criterion_07_end_to_end_benchmark(benchmark):
    scenario, dataset = benchmark
    start = time.perf_counter()
    plan = build_fold_plan(list(dataset.patient_ids), P=3, seed=0)
    cfg = EvalConfig(
        factor_configs=scenario.factors,
        grid=GridSpec(n_trees_set=(25,), l_set=(9, 19), r_set=(0, 5)),
        forest_seed=7,
        train_stride=2,
        inner_stride=3,
        em_iterations=6,
        max_stable_steps=1500,
        stable_d=0,
    )
    results = evaluate_models(dataset, plan, cfg)
    elapsed = time.perf_counter() - start
    table = results["auc_table"]
    factors = results["factor_names"]
    lines = []
    for model in ("dslds", "fslds", "mixture"):
        lines.append(
            model + ": " + ", ".join(f"{f}={table[model][f]:.3f}" for f in factors)
        )
    for f in factors:
        assert table["dslds"][f] >= 0.85, f"dslds {f} AUC {table['dslds'][f]:.3f}"
        assert table["fslds"][f] >= 0.85, f"fslds {f} AUC {table['fslds'][f]:.3f}"
    mix_avg = np.mean([table["mixture"][f] for f in factors])
    best_single = max(
        np.mean([table["dslds"][f] for f in factors]),
        np.mean([table["fslds"][f] for f in factors]),
    )
    assert mix_avg >= best_single - 0.01, (
        f"mixture average {mix_avg:.3f} vs best single {best_single:.3f}"
    )
    assert elapsed < 600.0, f"runtime {elapsed:.0f}s"
    _report(7, "end-to-end benchmark",
            f"({'; '.join(lines)}; alphas {results['alphas']}; {elapsed:.0f}s)")


def test_criterion_08_imputation_under_artifact(benchmark, trained_bundle):
    scenario, dataset = benchmark
    bundle = trained_bundle
    space = bundle.switch_space()
    bp = list(dataset.channel_names).index("BPsys")
    off = space.layout.offsets[bp]
    size = space.layout.block_sizes[bp]
    stable = space.regimes[0]
    A_b = stable.A[off:off + size, off:off + size]
    Q_b = stable.Q[off:off + size, off:off + size]

    worst_dev = 0.0
    ratios, coverages = [], []
    for pid in ("p04", "p05"):
        rec = dataset.patients[pid]
        T = rec.vitals.shape[0]
        art = rec.track.binary_labels(T, "blood_sample").astype(bool)
        if not art.any():
            continue
        out = run_model(bundle, dataset, pid, "dslds", switch_source="labels")
        # exactness: severed block follows the observation-free recursion
        for s, e, _ in rec.track.intervals["blood_sample"]:
            mean_b = out.x_mean[s - 1, off:off + size].copy() if s > 0 else None
            cov_b = out.x_cov[s - 1, off:off + size, off:off + size].copy() if s > 0 else None
            if mean_b is None:
                continue
            for t in range(s, e):
                mean_b = A_b @ mean_b
                cov_b = symmetrize(A_b @ cov_b @ A_b.T + Q_b)
                worst_dev = max(
                    worst_dev,
                    np.max(np.abs(out.x_mean[t, off:off + size] - mean_b)),
                    np.max(np.abs(out.x_cov[t, off:off + size, off:off + size] - cov_b)),
                )
                assert out.artifact_flag[t, bp]
        err = out.imputed_mean[:, bp] - rec.latent[:, bp]
        rmse_art = float(np.sqrt(np.mean(err[art] ** 2)))
        rmse_stable = float(np.sqrt(np.mean(err[~art] ** 2)))
        ratios.append(rmse_art / rmse_stable)
        band = 2.0 * out.imputed_sigma[:, bp]
        coverages.append(float(np.mean(np.abs(err[art]) <= band[art])))

        # qualitative check with the real classifier: the imputed trace stays
        # near the pre-event level while the raw signal ramps away
        out_c = run_model(bundle, dataset, pid, "dslds")
        for s, e, _ in rec.track.intervals["blood_sample"]:
            if e - s < 30 or s < 10:
                continue
            pre = np.nanmean(rec.vitals[s - 10:s, bp])
            seg = slice(s + 5, e - 5)
            raw_dev = np.nanmax(np.abs(rec.vitals[seg, bp] - pre))
            imp_dev = np.nanmax(np.abs(out_c.imputed_mean[seg, bp] - pre))
            assert raw_dev > 20.0  # the artifact really does ramp away
            assert imp_dev < raw_dev / 2.0

    assert worst_dev <= 1e-10, f"severed recursion deviation {worst_dev:g}"
    assert ratios and max(ratios) <= 2.0, f"imputed RMSE ratios {ratios}"
    assert min(coverages) >= 0.90, f"2-sigma coverage {coverages}"
    _report(8, "imputation under artifact",
            f"(recursion dev {worst_dev:.1e}, RMSE ratios "
            f"{[round(r, 2) for r in ratios]}, coverage "
            f"{[round(c, 3) for c in coverages]})")


def test_criterion_09_leakage_guard():
    rng = np.random.default_rng(909)
    checked = 0
    for _ in range(100):
        n = int(rng.integers(3, 41))
        P = int(rng.integers(2, min(n, 6) + 1))
        plan = build_fold_plan([f"p{i}" for i in range(n)], P=P,
                               seed=int(rng.integers(10_000)))
        for fold in range(plan.n_outer):
            test = set(plan.outer_tests[fold])
            for train, val in plan.inner_folds[fold]:
                assert not (set(train) | set(val)) & test
                checked += 1
    _report(9, "no patient leakage", f"({checked} inner folds across 100 plans)")


def test_criterion_10_persistence_roundtrips(tmp_path):
    rng = np.random.default_rng(1010)

    # 100 fuzzed datasets
    for i in range(100):
        T = int(rng.integers(3, 30))
        Cn = int(rng.integers(1, 4))
        vit = rng.standard_normal((T, Cn)) * 10.0 ** int(rng.integers(-2, 3))
        vit[rng.random((T, Cn)) < 0.2] = np.nan
        spans = {}
        if T > 4:
            s = int(rng.integers(0, T - 2))
            spans["f"] = ((s, int(rng.integers(s + 1, T)), 1),)
        ds = AnnotatedDataset(
            tuple(f"c{j}" for j in range(Cn)),
            {"p0": PatientRecord(vit, AnnotationTrack(spans))},
        )
        out = tmp_path / f"ds{i}"
        save_dataset(ds, out)
        loaded = load_dataset(out)
        assert np.array_equal(loaded.patients["p0"].vitals, vit, equal_nan=True)
        save_dataset(loaded, tmp_path / f"ds{i}b")
        for name in sorted(p.name for p in (tmp_path / f"ds{i}").iterdir()):
            assert (tmp_path / f"ds{i}" / name).read_bytes() == (
                tmp_path / f"ds{i}b" / name
            ).read_bytes()

    # 100 fuzzed bundles
    for i in range(100):
        r2 = np.random.default_rng(20_000 + i)
        n_ch = int(r2.integers(1, 3))
        names = tuple(f"c{j}" for j in range(n_ch))
        stable = tuple(
            ar_dynamics_block(r2.uniform(-0.4, 0.6, int(r2.integers(1, 3))),
                              float(r2.uniform(0.2, 2.0)), float(r2.uniform(0.1, 1.0)))
            for _ in range(n_ch)
        )
        factors = (
            FactorSpec(
                "f0", 2, uniform_self_transition(2, 0.95),
                affected_channels=(frozenset(), frozenset([0])),
                channel_models=({}, {0: None}),
                is_artifact=(False, True),
            ),
        )
        from sldsmon.factors import build_switch_space

        space = build_switch_space(names, stable, factors)
        n_feat = int(r2.integers(3, 7))
        Xf = r2.standard_normal((60, n_feat))
        yf = (Xf[:, 0] > 0).astype(int)
        forest = fit_forest(Xf, yf, n_trees=3, seed=i, schema_id=f"s{i}")
        forest = type(forest)(**{**forest.__dict__, "oob_indices": None})
        bundle = ModelBundle(
            channel_names=names,
            channel_means=r2.standard_normal(n_ch) * 50,
            window=WindowSpec(4, 0),
            alpha=float(r2.uniform(-1, 2)),
            stable_blocks=stable,
            factors=factors,
            regimes=space.regimes,
            classifiers=(FactorClassifier("f0", 2, (forest,)),),
        )
        p1 = tmp_path / f"b{i}.bundle"
        p2 = tmp_path / f"b{i}b.bundle"
        save_bundle(bundle, p1)
        loaded = load_bundle(p1)
        save_bundle(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        probe = r2.standard_normal((20, n_feat))
        probe[r2.random(probe.shape) < 0.2] = np.nan
        got = predict_proba_matrix(loaded.classifiers[0].forests[0], probe)
        want = predict_proba_matrix(bundle.classifiers[0].forests[0], probe)
        assert np.array_equal(got, want)
        for ra, rb in zip(bundle.regimes, loaded.regimes):
            assert np.array_equal(ra.A, rb.A) and np.array_equal(ra.Q, rb.Q)
            assert np.array_equal(ra.C, rb.C) and np.array_equal(ra.R, rb.R)
    _report(10, "persistence round-trips", "(100 datasets + 100 bundles bit-exact)")
