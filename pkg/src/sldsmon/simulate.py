"""Synthetic vital-sign generator with clinically shaped event templates.

Per patient: factor chains are sampled from their Markov transitions
(durations geometric around the declared means), the latent physiology
evolves under the per-configuration dynamics (artifact values reference the
stable dynamics, so true physiology keeps running while a channel is
corrupted), and observations are emitted per channel.  Severed channels
draw from the factor's corruption template instead of the latent state:

* "artifact_stages" events run ramp -> dropout-to-zero -> quiet -> flush
  (the flush decays as an AR(3) excursion above baseline);
* "artifact_broad" events draw unstructured noise around the baseline.

Ground-truth latent physiology and interval annotations are recorded, so
filters can be scored against exactly what generated the data.  Everything
is deterministic given the scenario seed.
"""

from __future__ import annotations

import numpy as np

from .dataio import (
    AnnotatedDataset,
    FactorConfig,
    PatientRecord,
    ScenarioSpec,
    build_factor_specs,
)
from .evaluation import AnnotationTrack
from .factors import ChannelDynamicsBlock, build_switch_space, config_index


def ar_dynamics_block(phi, sigma2_sys: float, obs_var: float) -> ChannelDynamicsBlock:
    """Lag-state block for a stationary AR(p) channel model."""
    phi = np.asarray(phi, dtype=float)
    p = phi.size
    n = p + 1
    A = np.zeros((n, n))
    A[0, :p] = phi
    for i in range(1, n):
        A[i, i - 1] = 1.0
    Q = np.zeros((n, n))
    Q[0, 0] = sigma2_sys
    sel = np.zeros(n)
    sel[0] = 1.0
    return ChannelDynamicsBlock(A, Q, obs_var, sel, (p, 0, 0))


def _sample_chain(rng, transition, T: int) -> np.ndarray:
    out = np.empty(T, dtype=int)
    state = 0  # factors start at baseline
    for t in range(T):
        out[t] = state
        state = int(rng.choice(transition.shape[0], p=transition[state]))
    return out


def _enforce_min_duration(chain, min_duration: int):
    """Extend sampled events shorter than the template minimum, in place."""
    if min_duration <= 1:
        return
    T = len(chain)
    for s, e in _runs_of_value(chain, 1):
        if e - s < min_duration:
            chain[s:min(s + min_duration, T)] = 1


def _runs_of_value(chain, value) -> list:
    runs = []
    start = None
    for t, v in enumerate(chain):
        if v == value and start is None:
            start = t
        elif v != value and start is not None:
            runs.append((start, t))
            start = None
    if start is not None:
        runs.append((start, len(chain)))
    return runs


def _stage_plan(start: int, end: int, fracs) -> np.ndarray:
    """Stage id (0..len(fracs)-1) per step of one event; fractions rounded."""
    length = end - start
    fracs = np.asarray(fracs, dtype=float)
    fracs = fracs / fracs.sum()
    sizes = np.floor(fracs * length).astype(int)
    rem = length - sizes.sum()  # distribute the remainder over early stages
    for i in range(rem):
        sizes[i % len(sizes)] += 1
    out = np.empty(length, dtype=int)
    pos = 0
    for stage, size in enumerate(sizes):
        out[pos:pos + size] = stage
        pos += size
    return out


class _StageArtifactState:
    """Per-event corruption generator for the four-stage template."""

    def __init__(self, rng, fc: FactorConfig, baseline: float, entry_value: float):
        self.rng = rng
        self.fc = fc
        self.baseline = baseline
        self.level = entry_value
        self.flush_hist = np.zeros(3)
        self.flush_started = False

    def emit(self, stage: int, latent_value: float, obs_sigma: float) -> float:
        fc, rng = self.fc, self.rng
        if stage == 0:  # artifactual ramp away from the true signal
            self.level += fc.ramp_slope
            return self.level + rng.standard_normal() * fc.ramp_noise
        if stage == 1:  # recalibration dropout to zero
            return rng.standard_normal() * fc.dropout_noise
        if stage == 2:  # brief quiet stretch tracking physiology again
            return latent_value + rng.standard_normal() * obs_sigma
        if not self.flush_started:  # flush spike, AR(3) decay above baseline
            self.flush_hist = np.array([fc.flush_gain, 0.0, 0.0])
            self.flush_started = True
        phi = np.asarray(fc.flush_phi)
        dev = float(phi @ self.flush_hist) + rng.standard_normal() * fc.flush_noise
        self.flush_hist = np.concatenate([[dev], self.flush_hist[:-1]])
        return self.baseline + fc.flush_gain * 0.2 + dev


def simulate(scenario: ScenarioSpec) -> AnnotatedDataset:
    """Sample an annotated dataset from the generative switching model."""
    channel_names = scenario.channel_names
    stable_blocks = tuple(
        ar_dynamics_block(ch.phi, ch.sigma**2, ch.obs_sigma**2)
        for ch in scenario.channels
    )
    factor_specs = build_factor_specs(scenario.factors, stable_blocks, channel_names)
    space = build_switch_space(channel_names, stable_blocks, factor_specs)
    layout = space.layout
    offsets = layout.offsets
    d_x = layout.state_dim
    C_count = layout.n_channels
    baselines = np.array([ch.baseline for ch in scenario.channels])
    obs_sigmas = np.array([ch.obs_sigma for ch in scenario.channels])

    # per-regime noise injection: every block's system noise is rank one
    noise_maps = []
    for regime in space.regimes:
        N = np.zeros((d_x, C_count))
        for c in range(C_count):
            off, size = offsets[c], layout.block_sizes[c]
            Qb = regime.Q[off:off + size, off:off + size]
            var = Qb[0, 0]
            if var > 0:
                N[off, c] = np.sqrt(var)
        noise_maps.append(N)

    patients = {}
    T = scenario.length
    for pi in range(scenario.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence((scenario.seed, pi)))
        chains = np.stack(
            [_sample_chain(rng, fc.transition(), T) for fc in scenario.factors],
            axis=1,
        ) if scenario.factors else np.zeros((T, 0), dtype=int)
        for m, fc in enumerate(scenario.factors):
            _enforce_min_duration(chains[:, m], fc.min_duration)

        # stage ids per artifact factor (-1 outside events)
        stage_ids = {}
        artifact_states = {}
        for m, fc in enumerate(scenario.factors):
            if fc.kind == "artifact_stages":
                stages = np.full(T, -1, dtype=int)
                for s, e in _runs_of_value(chains[:, m], 1):
                    stages[s:e] = _stage_plan(s, e, fc.stage_fracs)
                stage_ids[m] = stages

        x = np.zeros(d_x)
        # settle the stable dynamics before recording
        stable_map = noise_maps[0]
        A0 = space.regimes[0].A
        for _ in range(200):
            x = A0 @ x + stable_map @ rng.standard_normal(C_count)

        vitals = np.empty((T, C_count))
        latent = np.empty((T, C_count))
        for t in range(T):
            cfg_idx = (
                config_index(tuple(chains[t]), factor_specs) if scenario.factors else 0
            )
            regime = space.regimes[cfg_idx]
            x = regime.A @ x + noise_maps[cfg_idx] @ rng.standard_normal(C_count)
            latent[t] = baselines + x[list(offsets)]
            severed = np.all(regime.C == 0.0, axis=1)
            for c in range(C_count):
                if not severed[c]:
                    obs_sd = np.sqrt(regime.R[c, c])
                    vitals[t, c] = latent[t, c] + rng.standard_normal() * obs_sd
                    continue
                # find the claiming artifact factor (artifact dominates)
                claimant = None
                for m, (fc, spec) in enumerate(zip(scenario.factors, factor_specs)):
                    if chains[t, m] == 1 and spec.is_artifact[1] and \
                            c in spec.affected_channels[1]:
                        claimant = (m, fc)
                        break
                if claimant is None:
                    vitals[t, c] = latent[t, c]
                    continue
                m, fc = claimant
                if fc.kind == "artifact_stages":
                    key = (m, c)
                    if t == 0 or chains[t - 1, m] != 1:
                        entry = vitals[t - 1, c] if t > 0 else baselines[c]
                        artifact_states[key] = _StageArtifactState(
                            rng, fc, baselines[c], entry
                        )
                    vitals[t, c] = artifact_states[key].emit(
                        stage_ids[m][t], latent[t, c], obs_sigmas[c]
                    )
                else:  # artifact_broad
                    vitals[t, c] = baselines[c] + rng.standard_normal() * fc.broad_sigma

        intervals = {}
        for m, fc in enumerate(scenario.factors):
            spans = tuple((s, e, 1) for s, e in _runs_of_value(chains[:, m], 1))
            if spans:
                intervals[fc.name] = spans
        track = AnnotationTrack(intervals, 1.0)
        patients[f"p{pi:02d}"] = PatientRecord(vitals, track, latent)

    return AnnotatedDataset(channel_names, patients, 1.0)


def benchmark_scenario(seed: int = 7, length: int = 2000, n_patients: int = 6) -> ScenarioSpec:
    """Bundled desk-scale scenario: a BP artifact plus a global abnormality.

    Observation noise is a sizeable fraction of the latent variability, so
    imputation through an event stays close to the stable-period accuracy.
    """
    channels = (
        _channel("HR", 80.0, (0.8, -0.1), 0.5, 1.0),
        _channel("BPsys", 120.0, (0.85, -0.1), 0.55, 1.2),
        _channel("BPdia", 70.0, (0.8, -0.1), 0.5, 1.0),
    )
    factors = (
        FactorConfig(
            name="blood_sample", kind="artifact_stages", affects=("BPsys", "BPdia"),
            rate=0.0035, mean_duration=90.0, min_duration=25, broad_sigma=80.0,
            stage_fracs=(0.35, 0.25, 0.15, 0.25), ramp_slope=-1.3, ramp_noise=1.0,
            dropout_noise=1.0, flush_gain=45.0, flush_phi=(0.6, 0.2, 0.1),
            flush_noise=1.5,
        ),
        FactorConfig(
            name="surge", kind="xfactor", affects=("HR", "BPsys", "BPdia"),
            rate=0.002, mean_duration=150.0, min_duration=30, xi=25.0,
        ),
    )
    return ScenarioSpec(channels=channels, factors=factors, length=length,
                        n_patients=n_patients, seed=seed)


def _channel(name, baseline, phi, sigma, obs_sigma):
    from .dataio import ChannelConfig

    return ChannelConfig(name, baseline, tuple(phi), sigma, obs_sigma)
