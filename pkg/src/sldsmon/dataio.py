"""File formats: datasets, scenario declarations, and model bundles.

Everything is plain line-oriented text.  Vital signs and latent ground
truth are CSV (header ``timestamp,<chan1>,...``; 1 Hz; missing = empty
cell); annotations are CSV rows ``factor,value,start,end`` with end
exclusive; scenarios and model bundles use a sectioned key=value format
with matrices as semicolon-separated rows of comma-separated values.
Floats are written with repr, so every round-trip is bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .factors import (
    ChannelDynamicsBlock,
    FactorSpec,
    SwitchSpace,
    build_channel_layout,
    enumerate_configs,
    transition_matrix,
)
from .features import WindowSpec
from .forest import Forest, TreeNode
from .gaussian import RegimeParams
from .inference import FactorClassifier

BUNDLE_MAGIC = "sldsmon-bundle"
SCENARIO_MAGIC = "sldsmon-scenario"
DATASET_MAGIC = "sldsmon-dataset"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Schema violation in a data or bundle file."""


# ---------------------------------------------------------------------------
# Dataset containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatientRecord:
    vitals: np.ndarray  # (T, C), NaN = missing
    track: "AnnotationTrack"
    latent: np.ndarray = None  # optional ground-truth physiology (T, C)

    def __post_init__(self):
        vit = np.atleast_2d(np.asarray(self.vitals, dtype=float))
        object.__setattr__(self, "vitals", vit)
        if self.latent is not None:
            lat = np.atleast_2d(np.asarray(self.latent, dtype=float))
            if lat.shape != vit.shape:
                raise DataFormatError("latent series shape differs from vitals")
            object.__setattr__(self, "latent", lat)
        self.track.check_bounds(vit.shape[0])


@dataclass(frozen=True)
class AnnotatedDataset:
    channel_names: tuple
    patients: dict  # patient id -> PatientRecord
    sampling_rate: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        for pid, rec in self.patients.items():
            if rec.vitals.shape[1] != len(self.channel_names):
                raise DataFormatError(f"patient {pid}: channel count mismatch")

    @property
    def patient_ids(self) -> tuple:
        return tuple(self.patients.keys())


# ---------------------------------------------------------------------------
# Factor declarations (scenario / training config)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactorConfig:
    """Declarative description of one binary factor.

    kind:
      * "artifact_stages" — severing artifact whose observations follow a
        four-stage template (ramp, dropout, quiet, flush);
      * "artifact_broad"  — severing artifact with unstructured corruption;
      * "xfactor"         — physiological catch-all, stable dynamics with
        system noise inflated by xi;
      * "ar"              — physiological regime with its own AR dynamics
        (orders fit from labelled data, `ar_orders` as hints).
    """

    name: str
    kind: str
    affects: tuple
    rate: float = 0.002
    mean_duration: float = 100.0
    min_duration: int = 8  # simulator extends shorter sampled events
    transition_rows: tuple = None  # explicit 2x2 chain; overrides rate/duration
    broad_sigma: float = 60.0
    xi: float = 2.0
    priority: int = 0
    stage_fracs: tuple = (0.35, 0.25, 0.15, 0.25)
    ramp_slope: float = -1.0
    ramp_noise: float = 1.0
    dropout_noise: float = 1.0
    flush_gain: float = 40.0
    flush_phi: tuple = (0.6, 0.2, 0.1)
    flush_noise: float = 1.5
    ar_orders: tuple = ()

    def __post_init__(self):
        if self.kind not in ("artifact_stages", "artifact_broad", "xfactor", "ar"):
            raise DataFormatError(f"unknown factor kind {self.kind!r}")
        if not (0.0 <= self.rate < 1.0):
            raise DataFormatError("rate must be a probability below 1")
        if self.mean_duration <= 1.0:
            raise DataFormatError("mean duration must exceed one step")
        object.__setattr__(self, "affects", tuple(self.affects))
        object.__setattr__(self, "stage_fracs", tuple(self.stage_fracs))
        object.__setattr__(self, "flush_phi", tuple(self.flush_phi))
        object.__setattr__(self, "ar_orders", tuple(self.ar_orders))
        if self.transition_rows is not None:
            rows = tuple(tuple(float(v) for v in row) for row in self.transition_rows)
            if len(rows) != 2 or any(len(r) != 2 for r in rows):
                raise DataFormatError("explicit transition must be 2x2")
            object.__setattr__(self, "transition_rows", rows)

    @property
    def is_artifact(self) -> bool:
        return self.kind in ("artifact_stages", "artifact_broad")

    def transition(self) -> np.ndarray:
        if self.transition_rows is not None:
            return np.array(self.transition_rows)
        on_off = 1.0 / self.mean_duration
        return np.array([[1.0 - self.rate, self.rate], [on_off, 1.0 - on_off]])


def build_factor_specs(
    factor_configs, stable_blocks, channel_names, fitted_blocks=None
) -> tuple:
    """Materialise FactorSpec objects from declarations plus stable dynamics.

    Artifact values reference the stable dynamics with a broad observation
    noise (the latent physiology keeps evolving while severed); xfactor
    values inflate the stable system noise by xi; "ar" values take their
    dynamics from `fitted_blocks[(factor, channel_index)]` when provided,
    else fall back to the stable block.
    """
    name_to_idx = {name: i for i, name in enumerate(channel_names)}
    specs = []
    for fc in factor_configs:
        idxs = []
        for ch in fc.affects:
            if ch not in name_to_idx:
                raise DataFormatError(f"factor {fc.name!r} affects unknown channel {ch!r}")
            idxs.append(name_to_idx[ch])
        models = {}
        for c in idxs:
            base = stable_blocks[c]
            if fc.is_artifact:
                models[c] = ChannelDynamicsBlock(
                    base.A, base.Q, fc.broad_sigma**2, base.selector, base.order
                )
            elif fc.kind == "xfactor":
                models[c] = ChannelDynamicsBlock(
                    base.A, fc.xi * base.Q, base.obs_var, base.selector, base.order
                )
            else:  # "ar"
                fitted = (fitted_blocks or {}).get((fc.name, c))
                models[c] = fitted if fitted is not None else base
        specs.append(
            FactorSpec(
                name=fc.name,
                cardinality=2,
                transition=fc.transition(),
                affected_channels=(frozenset(), frozenset(idxs)),
                channel_models=({}, models),
                is_artifact=(False, fc.is_artifact),
                priority=fc.priority,
            )
        )
    return tuple(specs)


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelConfig:
    name: str
    baseline: float
    phi: tuple = (0.9, -0.2)
    sigma: float = 0.6
    obs_sigma: float = 0.3


@dataclass(frozen=True)
class ScenarioSpec:
    channels: tuple  # ChannelConfig
    factors: tuple  # FactorConfig
    length: int = 2000
    n_patients: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.length < 1 or self.n_patients < 1:
            raise DataFormatError("scenario needs length >= 1 and patients >= 1")
        for fc in self.factors:
            if fc.rate < 0:
                raise DataFormatError("negative event rate")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "factors", tuple(self.factors))

    @property
    def channel_names(self) -> tuple:
        return tuple(c.name for c in self.channels)


def _parse_sections(text: str, magic: str):
    lines = text.splitlines()
    if not lines or not lines[0].startswith(magic):
        raise DataFormatError(f"missing {magic} header")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError) as exc:
        raise DataFormatError("malformed version header") from exc
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format version {version}")
    if "[end]" not in (ln.strip() for ln in lines):
        raise DataFormatError("truncated file: no [end] marker")
    sections = []
    current = None
    for ln_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[end]":
            break
        if line.startswith("[") and line.endswith("]"):
            current = (line[1:-1], {})
            sections.append(current)
            continue
        if "=" not in line:
            raise DataFormatError(f"line {ln_no}: expected key = value")
        key, _, value = line.partition("=")
        if current is None:
            current = ("", {})
            sections.append(current)
        current[1][key.strip()] = value.strip()
    return sections


def _floats(s):
    return tuple(float(v) for v in s.split(",")) if s else ()


def _matrix(s) -> np.ndarray:
    return np.array([[float(v) for v in row.split(",")] for row in s.split(";")])


def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in np.asarray(v).ravel())


def _fmt_mat(m) -> str:
    return ";".join(_fmt_vec(row) for row in np.atleast_2d(m))


def parse_scenario(text: str) -> ScenarioSpec:
    sections = _parse_sections(text, SCENARIO_MAGIC)
    top = {}
    channels, factors = [], []
    for name, kv in sections:
        if name == "":
            top.update(kv)
        elif name.startswith("channel "):
            channels.append(
                ChannelConfig(
                    name=name.split(" ", 1)[1],
                    baseline=float(kv["baseline"]),
                    phi=_floats(kv.get("phi", "0.9,-0.2")),
                    sigma=float(kv.get("sigma", "0.6")),
                    obs_sigma=float(kv.get("obs_sigma", "0.3")),
                )
            )
        elif name.startswith("factor "):
            fname = name.split(" ", 1)[1]
            kwargs = {"name": fname, "kind": kv["kind"],
                      "affects": tuple(kv["affects"].split(","))}
            for key, cast in (
                ("rate", float), ("mean_duration", float), ("min_duration", int),
                ("broad_sigma", float),
                ("xi", float), ("priority", int), ("ramp_slope", float),
                ("ramp_noise", float), ("dropout_noise", float),
                ("flush_gain", float), ("flush_noise", float),
            ):
                if key in kv:
                    kwargs[key] = cast(kv[key])
            if "stage_fracs" in kv:
                kwargs["stage_fracs"] = _floats(kv["stage_fracs"])
            if "flush_phi" in kv:
                kwargs["flush_phi"] = _floats(kv["flush_phi"])
            if "transition" in kv:
                kwargs["transition_rows"] = tuple(
                    tuple(float(v) for v in row.split(","))
                    for row in kv["transition"].split(";")
                )
            if "ar_orders" in kv:
                kwargs["ar_orders"] = tuple(
                    int(v) for v in kv["ar_orders"].split(",") if v != ""
                )
            factors.append(FactorConfig(**kwargs))
        else:
            raise DataFormatError(f"unknown scenario section [{name}]")
    if not channels:
        raise DataFormatError("scenario declares no channels")
    return ScenarioSpec(
        channels=tuple(channels),
        factors=tuple(factors),
        length=int(top.get("length", "2000")),
        n_patients=int(top.get("patients", "6")),
        seed=int(top.get("seed", "0")),
    )


def load_scenario(path) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def write_scenario(spec: ScenarioSpec, path):
    out = [f"{SCENARIO_MAGIC} {FORMAT_VERSION}"]
    out.append(f"seed = {spec.seed}")
    out.append(f"patients = {spec.n_patients}")
    out.append(f"length = {spec.length}")
    for ch in spec.channels:
        out.append(f"[channel {ch.name}]")
        out.append(f"baseline = {repr(float(ch.baseline))}")
        out.append(f"phi = {_fmt_vec(ch.phi)}")
        out.append(f"sigma = {repr(float(ch.sigma))}")
        out.append(f"obs_sigma = {repr(float(ch.obs_sigma))}")
    for fc in spec.factors:
        out.append(f"[factor {fc.name}]")
        out.append(f"kind = {fc.kind}")
        out.append(f"affects = {','.join(fc.affects)}")
        out.append(f"rate = {repr(float(fc.rate))}")
        out.append(f"mean_duration = {repr(float(fc.mean_duration))}")
        out.append(f"min_duration = {fc.min_duration}")
        out.append(f"broad_sigma = {repr(float(fc.broad_sigma))}")
        out.append(f"xi = {repr(float(fc.xi))}")
        out.append(f"priority = {fc.priority}")
        out.append(f"stage_fracs = {_fmt_vec(fc.stage_fracs)}")
        out.append(f"ramp_slope = {repr(float(fc.ramp_slope))}")
        out.append(f"ramp_noise = {repr(float(fc.ramp_noise))}")
        out.append(f"dropout_noise = {repr(float(fc.dropout_noise))}")
        out.append(f"flush_gain = {repr(float(fc.flush_gain))}")
        out.append(f"flush_phi = {_fmt_vec(fc.flush_phi)}")
        out.append(f"flush_noise = {repr(float(fc.flush_noise))}")
        if fc.transition_rows is not None:
            out.append(f"transition = {_fmt_mat(np.array(fc.transition_rows))}")
        if fc.ar_orders:
            out.append(f"ar_orders = {','.join(str(v) for v in fc.ar_orders)}")
    out.append("[end]")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Dataset CSV IO
# ---------------------------------------------------------------------------


def _write_series_csv(path, channel_names, values):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp," + ",".join(channel_names) + "\n")
        for t, row in enumerate(values):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in row]
            fh.write(f"{t}," + ",".join(cells) + "\n")


def _read_series_csv(path, channel_names):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header != ["timestamp"] + list(channel_names):
        raise DataFormatError(f"{path}: line 1: unexpected header {header}")
    values = np.empty((len(lines) - 1, len(channel_names)))
    prev_ts = None
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(channel_names) + 1:
            raise DataFormatError(f"{path}: line {i}: wrong cell count")
        try:
            ts = int(cells[0])
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {i}: bad timestamp") from exc
        if prev_ts is not None and ts <= prev_ts:
            raise DataFormatError(f"{path}: line {i}: timestamps not increasing")
        prev_ts = ts
        for c, cell in enumerate(cells[1:]):
            if cell == "":
                values[i - 2, c] = np.nan
            else:
                try:
                    values[i - 2, c] = float(cell)
                except ValueError as exc:
                    raise DataFormatError(f"{path}: line {i}: bad value {cell!r}") from exc
    return values


def save_dataset(dataset: AnnotatedDataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    pids = dataset.patient_ids
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{DATASET_MAGIC} {FORMAT_VERSION}\n")
        fh.write(f"channels = {','.join(dataset.channel_names)}\n")
        fh.write(f"sampling_rate = {repr(float(dataset.sampling_rate))}\n")
        fh.write(f"patients = {','.join(pids)}\n")
        fh.write("[end]\n")
    for pid in pids:
        rec = dataset.patients[pid]
        _write_series_csv(
            os.path.join(out_dir, f"{pid}_vitals.csv"), dataset.channel_names, rec.vitals
        )
        with open(os.path.join(out_dir, f"{pid}_annotations.csv"), "w", encoding="utf-8") as fh:
            fh.write("factor,value,start,end\n")
            for fname in sorted(rec.track.intervals):
                for s, e, v in rec.track.intervals[fname]:
                    fh.write(f"{fname},{v},{s},{e}\n")
        if rec.latent is not None:
            _write_series_csv(
                os.path.join(out_dir, f"{pid}_latent.csv"), dataset.channel_names, rec.latent
            )


def load_dataset(in_dir) -> AnnotatedDataset:
    from .evaluation import AnnotationTrack

    manifest = os.path.join(in_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise DataFormatError(f"{manifest}: missing manifest")
    with open(manifest, "r", encoding="utf-8") as fh:
        sections = _parse_sections(fh.read(), DATASET_MAGIC)
    top = sections[0][1] if sections else {}
    channel_names = tuple(top["channels"].split(","))
    rate = float(top.get("sampling_rate", "1.0"))
    pids = tuple(p for p in top.get("patients", "").split(",") if p)
    patients = {}
    for pid in pids:
        vitals = _read_series_csv(os.path.join(in_dir, f"{pid}_vitals.csv"), channel_names)
        ann_path = os.path.join(in_dir, f"{pid}_annotations.csv")
        intervals = {}
        with open(ann_path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "factor,value,start,end":
            raise DataFormatError(f"{ann_path}: line 1: bad header")
        for i, line in enumerate(lines[1:], start=2):
            cells = line.split(",")
            if len(cells) != 4:
                raise DataFormatError(f"{ann_path}: line {i}: wrong cell count")
            fname, v, s, e = cells
            try:
                span = (int(s), int(e), int(v))
            except ValueError as exc:
                raise DataFormatError(f"{ann_path}: line {i}: bad interval") from exc
            intervals.setdefault(fname, []).append(span)
        track = AnnotationTrack({k: tuple(v) for k, v in intervals.items()}, rate)
        try:
            track.check_bounds(vitals.shape[0])
        except ValueError as exc:
            raise DataFormatError(f"{ann_path}: {exc}") from exc
        latent_path = os.path.join(in_dir, f"{pid}_latent.csv")
        latent = (
            _read_series_csv(latent_path, channel_names)
            if os.path.exists(latent_path)
            else None
        )
        patients[pid] = PatientRecord(vitals, track, latent)
    return AnnotatedDataset(channel_names, patients, rate)


# ---------------------------------------------------------------------------
# Model bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelBundle:
    """Everything inference needs, serialisable as one text document."""

    channel_names: tuple
    channel_means: np.ndarray
    window: WindowSpec
    alpha: float
    stable_blocks: tuple
    factors: tuple  # FactorSpec
    regimes: tuple  # RegimeParams, one per configuration (mixed-radix order)
    classifiers: tuple  # FactorClassifier, aligned with factors
    version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "channel_means", np.asarray(self.channel_means, dtype=float))
        if len(self.channel_means) != len(self.channel_names):
            raise DataFormatError("one training mean per channel required")
        k = 1
        for f in self.factors:
            k *= f.cardinality
        if len(self.regimes) != k:
            raise DataFormatError(f"bundle must carry {k} regimes, has {len(self.regimes)}")

    def switch_space(self) -> SwitchSpace:
        layout = build_channel_layout(self.channel_names, self.stable_blocks, self.factors)
        configs = tuple(enumerate_configs(self.factors))
        trans = transition_matrix(self.factors, configs)
        return SwitchSpace(tuple(self.factors), layout, configs, tuple(self.regimes), trans)


def _block_lines(tag: str, block: ChannelDynamicsBlock):
    return [
        f"[{tag}]",
        f"order = {block.order[0]},{block.order[1]},{block.order[2]}",
        f"A = {_fmt_mat(block.A)}",
        f"Q = {_fmt_mat(block.Q)}",
        f"obs_var = {repr(float(block.obs_var))}",
        f"selector = {_fmt_vec(block.selector)}",
    ]


def _block_from(kv) -> ChannelDynamicsBlock:
    order = tuple(int(v) for v in kv["order"].split(","))
    return ChannelDynamicsBlock(
        _matrix(kv["A"]), _matrix(kv["Q"]), float(kv["obs_var"]),
        np.array(_floats(kv["selector"])), order,
    )


def _encode_tree(root: TreeNode) -> str:
    nodes = []
    index = {}
    stack = [root]  # preorder: children always get larger indices
    while stack:
        node = stack.pop()
        index[id(node)] = len(nodes)
        nodes.append(node)
        if not node.is_leaf:
            stack.append(node.right)
            stack.append(node.left)
    parts = []
    for node in nodes:
        if node.is_leaf:
            parts.append(f"L {repr(float(node.positive_fraction))} {node.sample_count}")
        else:
            surr = "|".join(
                f"{f}:{repr(float(t))}:{repr(float(a))}" for f, t, a in node.surrogates
            ) or "-"
            parts.append(
                "I {f} {t} {d} {li} {ri} {s} {pf} {n}".format(
                    f=node.feature, t=repr(float(node.threshold)),
                    d="L" if node.default_left else "R",
                    li=index[id(node.left)], ri=index[id(node.right)],
                    s=surr, pf=repr(float(node.positive_fraction)),
                    n=node.sample_count,
                )
            )
    return ";".join(parts)


def _decode_tree(text: str) -> TreeNode:
    raw = text.split(";")
    parsed = []
    for i, part in enumerate(raw):
        bits = part.split(" ")
        try:
            if bits[0] == "L":
                parsed.append(("L", float(bits[1]), int(bits[2])))
            elif bits[0] == "I":
                surr = ()
                if bits[6] != "-":
                    surr = tuple(
                        (int(f), float(t), float(a))
                        for f, t, a in (s.split(":") for s in bits[6].split("|"))
                    )
                parsed.append(
                    ("I", int(bits[1]), float(bits[2]), bits[3] == "L",
                     int(bits[4]), int(bits[5]), surr, float(bits[7]), int(bits[8]))
                )
            else:
                raise DataFormatError(f"tree node {i}: unknown tag {bits[0]!r}")
        except (IndexError, ValueError) as exc:
            raise DataFormatError(f"tree node {i}: malformed ({part!r})") from exc
    built = [None] * len(parsed)
    for i in range(len(parsed) - 1, -1, -1):
        p = parsed[i]
        if p[0] == "L":
            built[i] = TreeNode(positive_fraction=p[1], sample_count=p[2])
        else:
            _, feat, thr, dleft, li, ri, surr, pf, n = p
            if not (i < li < len(parsed) and i < ri < len(parsed)):
                raise DataFormatError(f"tree node {i}: child index out of range")
            if built[li] is None or built[ri] is None:
                raise DataFormatError(f"tree node {i}: dangling child reference")
            built[i] = TreeNode(
                feature=feat, threshold=thr, surrogates=surr, default_left=dleft,
                left=built[li], right=built[ri],
                positive_fraction=pf, sample_count=n,
            )
    return built[0]


def save_bundle(bundle: ModelBundle, path):
    out = [f"{BUNDLE_MAGIC} {FORMAT_VERSION}"]
    out.append("[channels]")
    out.append(f"names = {','.join(bundle.channel_names)}")
    out.append(f"means = {_fmt_vec(bundle.channel_means)}")
    out.append("[window]")
    out.append(f"l = {bundle.window.l}")
    out.append(f"r = {bundle.window.r}")
    out.append(f"seg_len = {bundle.window.seg_len}")
    out.append(f"ewma_width = {bundle.window.ewma_width}")
    out.append("[mixture]")
    out.append(f"alpha = {repr(float(bundle.alpha))}")
    for c, block in enumerate(bundle.stable_blocks):
        out.extend(_block_lines(f"stable_block {c}", block))
    for f in bundle.factors:
        out.append(f"[factor {f.name}]")
        out.append(f"cardinality = {f.cardinality}")
        out.append(f"priority = {f.priority}")
        out.append(f"artifact = {','.join('1' if a else '0' for a in f.is_artifact)}")
        out.append(f"transition = {_fmt_mat(f.transition)}")
        for v in range(f.cardinality):
            if f.affected_channels[v]:
                chans = ",".join(str(c) for c in sorted(f.affected_channels[v]))
                out.append(f"affected_{v} = {chans}")
        for v in range(f.cardinality):
            for c in sorted(f.affected_channels[v]):
                block = f.channel_models[v].get(c)
                if block is not None:
                    out.extend(_block_lines(f"factor_block {f.name} {v} {c}", block))
    for k, regime in enumerate(bundle.regimes):
        out.append(f"[regime {k}]")
        out.append(f"A = {_fmt_mat(regime.A)}")
        out.append(f"Q = {_fmt_mat(regime.Q)}")
        out.append(f"C = {_fmt_mat(regime.C)}")
        out.append(f"R = {_fmt_mat(regime.R)}")
    for clf in bundle.classifiers:
        out.append(f"[classifier {clf.factor_name}]")
        out.append(f"cardinality = {clf.cardinality}")
        for fi, forest in enumerate(clf.forests):
            out.append(f"[forest {clf.factor_name} {fi}]")
            out.append(f"n_trees = {forest.n_trees}")
            out.append(f"features_per_split = {forest.features_per_split}")
            out.append(f"min_leaf = {forest.min_leaf}")
            out.append(f"seed = {forest.seed}")
            out.append(f"n_features = {forest.n_features}")
            out.append(f"schema = {forest.schema_id or '-'}")
            for ti, tree in enumerate(forest.trees):
                out.append(f"tree_{ti} = {_encode_tree(tree)}")
    out.append("[end]")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def load_bundle(path) -> ModelBundle:
    with open(path, "r", encoding="utf-8") as fh:
        sections = _parse_sections(fh.read(), BUNDLE_MAGIC)
    by_name = {}
    order = []
    for name, kv in sections:
        by_name[name] = kv
        order.append(name)

    chans = by_name.get("channels")
    if chans is None:
        raise DataFormatError("bundle missing [channels]")
    channel_names = tuple(chans["names"].split(","))
    means = np.array(_floats(chans["means"]))
    win_kv = by_name["window"]
    window = WindowSpec(
        int(win_kv["l"]), int(win_kv["r"]),
        seg_len=int(win_kv["seg_len"]), ewma_width=int(win_kv["ewma_width"]),
    )
    alpha = float(by_name["mixture"]["alpha"])

    stable = {}
    for name in order:
        if name.startswith("stable_block "):
            stable[int(name.split(" ", 1)[1])] = _block_from(by_name[name])
    stable_blocks = tuple(stable[c] for c in range(len(channel_names)))

    factor_blocks = {}
    for name in order:
        if name.startswith("factor_block "):
            _, fname, v, c = name.split(" ")
            factor_blocks[(fname, int(v), int(c))] = _block_from(by_name[name])

    factors = []
    for name in order:
        if not name.startswith("factor "):
            continue
        kv = by_name[name]
        fname = name.split(" ", 1)[1]
        card = int(kv["cardinality"])
        artifact = tuple(x == "1" for x in kv["artifact"].split(","))
        trans = _matrix(kv["transition"])
        affected, models = [], []
        for v in range(card):
            idxs = frozenset(
                int(c) for c in kv.get(f"affected_{v}", "").split(",") if c != ""
            )
            affected.append(idxs)
            models.append({c: factor_blocks.get((fname, v, c)) for c in idxs})
        factors.append(
            FactorSpec(fname, card, trans, tuple(affected), tuple(models),
                       artifact, int(kv.get("priority", "0")))
        )
    factors = tuple(factors)

    regimes = []
    k = 0
    while f"regime {k}" in by_name:
        kv = by_name[f"regime {k}"]
        regimes.append(
            RegimeParams(_matrix(kv["A"]), _matrix(kv["Q"]), _matrix(kv["C"]),
                         _matrix(kv["R"]), regime_id=k)
        )
        k += 1

    classifiers = []
    for name in order:
        if not name.startswith("classifier "):
            continue
        fname = name.split(" ", 1)[1]
        card = int(by_name[name]["cardinality"])
        forests = []
        fi = 0
        while f"forest {fname} {fi}" in by_name:
            kv = by_name[f"forest {fname} {fi}"]
            trees = []
            ti = 0
            while f"tree_{ti}" in kv:
                trees.append(_decode_tree(kv[f"tree_{ti}"]))
                ti += 1
            schema = kv["schema"]
            forests.append(
                Forest(
                    trees=tuple(trees),
                    n_trees=int(kv["n_trees"]),
                    features_per_split=int(kv["features_per_split"]),
                    min_leaf=int(kv["min_leaf"]),
                    seed=int(kv["seed"]),
                    n_features=int(kv["n_features"]),
                    schema_id=None if schema == "-" else schema,
                )
            )
            fi += 1
        classifiers.append(FactorClassifier(fname, card, tuple(forests)))

    return ModelBundle(
        channel_names=channel_names,
        channel_means=means,
        window=window,
        alpha=alpha,
        stable_blocks=stable_blocks,
        factors=factors,
        regimes=tuple(regimes),
        classifiers=tuple(classifiers),
    )
