"""Tests for the simulator, dataset/bundle IO, and the training pipeline."""

import os

import numpy as np
import pytest

from sldsmon.dataio import (
    AnnotatedDataset,
    ChannelConfig,
    DataFormatError,
    FactorConfig,
    PatientRecord,
    ScenarioSpec,
    load_bundle,
    load_dataset,
    load_scenario,
    parse_scenario,
    save_bundle,
    save_dataset,
    write_scenario,
)
from sldsmon.evaluation import AnnotationTrack, roc_auc
from sldsmon.forest import predict_proba_matrix
from sldsmon.simulate import benchmark_scenario, simulate
from sldsmon.train import TrainConfig, run_model, train_bundle


def tiny_scenario(seed=0, length=400, patients=2, rates=True):
    channels = (
        ChannelConfig("HR", 80.0, (0.8, -0.1), 0.5, 1.0),
        ChannelConfig("BP", 120.0, (0.85, -0.1), 0.55, 1.1),
    )
    factors = (
        FactorConfig(
            name="bs", kind="artifact_stages", affects=("BP",),
            rate=0.006 if rates else 0.0, mean_duration=40.0, min_duration=12,
            broad_sigma=80.0, ramp_slope=-1.5, flush_gain=35.0,
        ),
        FactorConfig(
            name="surge", kind="xfactor", affects=("HR", "BP"),
            rate=0.004 if rates else 0.0, mean_duration=60.0, min_duration=20,
            xi=25.0,
        ),
    )
    return ScenarioSpec(channels=channels, factors=factors, length=length,
                        n_patients=patients, seed=seed)


@pytest.fixture(scope="module")
def tiny_dataset():
    return simulate(tiny_scenario(seed=3, length=500, patients=3))


@pytest.fixture(scope="module")
def tiny_bundle(tiny_dataset):
    scen = tiny_scenario()
    cfg = TrainConfig(l=9, r=2, n_trees=10, train_stride=2, em_iterations=2,
                      max_stable_steps=600, stable_d=0)
    return train_bundle(tiny_dataset, ["p00", "p01"], scen.factors, cfg)


class TestSimulate:
    def test_deterministic_given_seed(self, tmp_path):
        scen = tiny_scenario(seed=11)
        d1 = simulate(scen)
        d2 = simulate(scen)
        p1 = tmp_path / "a"
        p2 = tmp_path / "b"
        save_dataset(d1, p1)
        save_dataset(d2, p2)
        for name in sorted(os.listdir(p1)):
            b1 = (p1 / name).read_bytes()
            b2 = (p2 / name).read_bytes()
            assert b1 == b2, f"{name} differs between identical seeds"

    def test_zero_rates_give_pure_stable_sequences(self):
        scen = tiny_scenario(seed=5, length=3000, patients=1, rates=False)
        ds = simulate(scen)
        rec = ds.patients["p00"]
        assert not rec.track.intervals
        # CLT bound with the long-run variance of the generating AR model
        for c, ch in enumerate(scen.channels):
            phi = np.array(ch.phi)
            # long-run sd of an AR(2): sigma / (1 - phi1 - phi2), plus obs noise
            lr_sd = np.sqrt(
                (ch.sigma / (1.0 - phi.sum())) ** 2 + ch.obs_sigma**2
            )
            bound = 3.0 * lr_sd / np.sqrt(scen.length)
            assert abs(rec.vitals[:, c].mean() - ch.baseline) < bound

    def test_artifact_touches_only_claimed_channels(self):
        ds = simulate(tiny_scenario(seed=7, length=800, patients=1))
        rec = ds.patients["p00"]
        hr, bp = rec.vitals[:, 0], rec.vitals[:, 1]
        lab = rec.track.binary_labels(800, "bs").astype(bool)
        surge = rec.track.binary_labels(800, "surge").astype(bool)
        clean = lab & ~surge
        if clean.sum() >= 20:
            # HR still hugs its latent during BP-only artifacts
            hr_err = np.abs(hr - rec.latent[:, 0])
            assert np.median(hr_err[clean]) < 4.0
            # BP deviates strongly somewhere inside events (ramp/zero/flush)
            bp_err = np.abs(bp - rec.latent[:, 1])
            assert bp_err[clean].max() > 20.0

    def test_min_duration_enforced(self):
        ds = simulate(tiny_scenario(seed=9, length=1200, patients=2))
        for rec in ds.patients.values():
            for s, e, v in rec.track.intervals.get("bs", ()):
                if e < 1200:  # truncated-at-end runs may be short
                    assert e - s >= 12

    def test_latent_recorded_and_aligned(self, tiny_dataset):
        rec = tiny_dataset.patients["p00"]
        assert rec.latent.shape == rec.vitals.shape
        quiet = np.ones(rec.vitals.shape[0], dtype=bool)
        for name in ("bs", "surge"):
            quiet &= ~rec.track.binary_labels(rec.vitals.shape[0], name).astype(bool)
        err = rec.vitals[quiet] - rec.latent[quiet]
        assert np.abs(err).mean() < 3.0  # observation noise only


class TestDatasetIO:
    def test_roundtrip_exact(self, tmp_path, tiny_dataset):
        out = tmp_path / "ds"
        save_dataset(tiny_dataset, out)
        loaded = load_dataset(out)
        assert loaded.channel_names == tiny_dataset.channel_names
        assert loaded.patient_ids == tiny_dataset.patient_ids
        for pid in tiny_dataset.patient_ids:
            a = tiny_dataset.patients[pid]
            b = loaded.patients[pid]
            assert np.array_equal(a.vitals, b.vitals, equal_nan=True)
            assert np.array_equal(a.latent, b.latent, equal_nan=True)
            assert a.track.intervals == b.track.intervals

    def test_missing_cells_roundtrip(self, tmp_path):
        vit = np.array([[1.0, 2.0], [np.nan, 4.0], [5.0, np.nan]])
        ds = AnnotatedDataset(
            ("a", "b"), {"px": PatientRecord(vit, AnnotationTrack({}))}
        )
        out = tmp_path / "ds"
        save_dataset(ds, out)
        text = (out / "px_vitals.csv").read_text().splitlines()
        assert text[2].startswith("1,,")  # empty cell = missing
        loaded = load_dataset(out)
        assert np.array_equal(loaded.patients["px"].vitals, vit, equal_nan=True)

    def test_annotation_beyond_end_rejected(self, tmp_path):
        ds = AnnotatedDataset(
            ("a",),
            {"px": PatientRecord(np.zeros((10, 1)), AnnotationTrack({}))},
        )
        out = tmp_path / "ds"
        save_dataset(ds, out)
        ann = out / "px_annotations.csv"
        ann.write_text("factor,value,start,end\nbs,1,5,99\n")
        with pytest.raises(DataFormatError):
            load_dataset(out)

    def test_non_monotone_timestamps_rejected(self, tmp_path):
        ds = AnnotatedDataset(
            ("a",),
            {"px": PatientRecord(np.zeros((3, 1)), AnnotationTrack({}))},
        )
        out = tmp_path / "ds"
        save_dataset(ds, out)
        vit = out / "px_vitals.csv"
        vit.write_text("timestamp,a\n0,1.0\n2,1.0\n1,1.0\n")
        with pytest.raises(DataFormatError, match="line 4"):
            load_dataset(out)

    def test_fuzzed_roundtrips(self, tmp_path):
        rng = np.random.default_rng(13)
        for i in range(20):
            T = int(rng.integers(3, 40))
            C = int(rng.integers(1, 4))
            vit = rng.standard_normal((T, C)) * 10.0 ** int(rng.integers(-3, 4))
            vit[rng.random((T, C)) < 0.2] = np.nan
            names = tuple(f"c{j}" for j in range(C))
            spans = {}
            if T > 4 and rng.random() < 0.7:
                s = int(rng.integers(0, T - 2))
                e = int(rng.integers(s + 1, T))
                spans["f"] = ((s, e, 1),)
            ds = AnnotatedDataset(
                names, {"p0": PatientRecord(vit, AnnotationTrack(spans))}
            )
            out = tmp_path / f"fz{i}"
            save_dataset(ds, out)
            loaded = load_dataset(out)
            assert np.array_equal(loaded.patients["p0"].vitals, vit, equal_nan=True)
            assert loaded.patients["p0"].track.intervals == ds.patients["p0"].track.intervals


class TestScenarioIO:
    def test_roundtrip(self, tmp_path):
        scen = tiny_scenario(seed=21)
        path = tmp_path / "scen.txt"
        write_scenario(scen, path)
        loaded = load_scenario(path)
        assert loaded == scen

    def test_parse_errors(self):
        with pytest.raises(DataFormatError):
            parse_scenario("not-a-scenario 1\n[end]\n")
        with pytest.raises(DataFormatError):
            parse_scenario("sldsmon-scenario 1\nno sections here\n[end]\n")

    def test_truncated_rejected(self):
        with pytest.raises(DataFormatError, match="truncated"):
            parse_scenario("sldsmon-scenario 1\nseed = 1\n")

    def test_unknown_kind_rejected(self):
        with pytest.raises(DataFormatError):
            FactorConfig(name="x", kind="mystery", affects=())


class TestBundleIO:
    def test_roundtrip_bit_exact_predictions(self, tmp_path, tiny_dataset, tiny_bundle):
        path = tmp_path / "model.bundle"
        save_bundle(tiny_bundle, path)
        loaded = load_bundle(path)
        assert loaded.channel_names == tiny_bundle.channel_names
        np.testing.assert_array_equal(loaded.channel_means, tiny_bundle.channel_means)
        assert loaded.window == tiny_bundle.window
        for a, b in zip(tiny_bundle.regimes, loaded.regimes):
            assert np.array_equal(a.A, b.A) and np.array_equal(a.Q, b.Q)
            assert np.array_equal(a.C, b.C) and np.array_equal(a.R, b.R)
        rng = np.random.default_rng(0)
        n_feat = tiny_bundle.classifiers[0].forests[0].n_features
        X = rng.standard_normal((50, n_feat))
        X[rng.random(X.shape) < 0.1] = np.nan
        for ca, cb in zip(tiny_bundle.classifiers, loaded.classifiers):
            pa = predict_proba_matrix(ca.forests[0], X)
            pb = predict_proba_matrix(cb.forests[0], X)
            assert np.array_equal(pa, pb)  # bit-exact

    def test_roundtrip_twice_is_identical_text(self, tmp_path, tiny_bundle):
        p1 = tmp_path / "b1"
        p2 = tmp_path / "b2"
        save_bundle(tiny_bundle, p1)
        save_bundle(load_bundle(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected(self, tmp_path, tiny_bundle):
        path = tmp_path / "model.bundle"
        save_bundle(tiny_bundle, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(DataFormatError):
            load_bundle(path)

    def test_version_mismatch_rejected(self, tmp_path, tiny_bundle):
        path = tmp_path / "model.bundle"
        save_bundle(tiny_bundle, path)
        text = path.read_text().replace("sldsmon-bundle 1", "sldsmon-bundle 2", 1)
        path.write_text(text)
        with pytest.raises(DataFormatError, match="version"):
            load_bundle(path)

    def test_corrupted_tree_index_rejected(self, tmp_path, tiny_bundle):
        path = tmp_path / "model.bundle"
        save_bundle(tiny_bundle, path)
        lines = path.read_text().splitlines()
        for i, line in enumerate(lines):
            if line.startswith("tree_0 = I "):
                bits = line.split(" ")
                bits[6] = "99999"  # left child out of range
                lines[i] = " ".join(bits)
                break
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError):
            load_bundle(path)

    def test_channel_count_mismatch_raises(self, tiny_dataset, tiny_bundle):
        shrunk = AnnotatedDataset(
            ("HR",),
            {
                "q": PatientRecord(
                    tiny_dataset.patients["p00"].vitals[:, :1], AnnotationTrack({})
                )
            },
        )
        with pytest.raises(ValueError):
            run_model(tiny_bundle, shrunk, "q", "dslds")


class TestTrainPipeline:
    def test_bundle_structure(self, tiny_bundle):
        assert len(tiny_bundle.stable_blocks) == 2
        assert len(tiny_bundle.regimes) == 4
        assert {c.factor_name for c in tiny_bundle.classifiers} == {"bs", "surge"}
        for regime in tiny_bundle.regimes:
            regime.validate()

    def test_models_score_above_chance(self, tiny_dataset, tiny_bundle):
        pid = "p02"
        rec = tiny_dataset.patients[pid]
        T = rec.vitals.shape[0]
        for model in ("dslds", "fslds"):
            out = run_model(tiny_bundle, tiny_dataset, pid, model)
            for name in ("bs", "surge"):
                lab = rec.track.binary_labels(T, name)
                if lab.min() == lab.max():
                    continue
                assert roc_auc(out.factor_score(name), lab) > 0.7

    def test_mixture_runs(self, tiny_dataset, tiny_bundle):
        out = run_model(tiny_bundle, tiny_dataset, "p02", "mixture", alpha=0.5)
        assert out.model == "alpha_mixture"
        np.testing.assert_allclose(out.joint.sum(axis=1), 1.0, atol=1e-9)

    def test_no_stable_data_raises(self, tiny_dataset):
        scen = tiny_scenario()
        rec = tiny_dataset.patients["p00"]
        T = rec.vitals.shape[0]
        full = AnnotatedDataset(
            tiny_dataset.channel_names,
            {"p": PatientRecord(
                rec.vitals, AnnotationTrack({"bs": ((0, T, 1),)})
            )},
        )
        with pytest.raises(ValueError):
            train_bundle(full, ["p"], scen.factors, TrainConfig(n_trees=2))


class TestFactorConfigExtensions:
    def test_explicit_transition_rows_override(self):
        fc = FactorConfig(
            name="f", kind="xfactor", affects=("HR",),
            transition_rows=((0.98, 0.02), (0.05, 0.95)),
        )
        np.testing.assert_allclose(fc.transition(), [[0.98, 0.02], [0.05, 0.95]])

    def test_transition_roundtrips_through_scenario_file(self, tmp_path):
        scen = ScenarioSpec(
            channels=(ChannelConfig("HR", 80.0),),
            factors=(
                FactorConfig(
                    name="f", kind="xfactor", affects=("HR",),
                    transition_rows=((0.97, 0.03), (0.04, 0.96)),
                    ar_orders=(2, 3),
                ),
            ),
            length=50, n_patients=1, seed=1,
        )
        path = tmp_path / "s.txt"
        write_scenario(scen, path)
        loaded = load_scenario(path)
        assert loaded.factors[0].transition_rows == ((0.97, 0.03), (0.04, 0.96))
        assert loaded.factors[0].ar_orders == (2, 3)

    def test_malformed_transition_rejected(self):
        with pytest.raises(DataFormatError):
            FactorConfig(name="f", kind="xfactor", affects=(),
                         transition_rows=((1.0,),))
