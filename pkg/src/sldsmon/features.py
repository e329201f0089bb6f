"""Sliding-window feature extraction for the per-step state-of-health classifier.

For every time step a window of l past and r future samples is taken per
channel (edge-replicated at the sequence boundaries) and mapped to a fixed,
deterministic feature layout: raw values, per-sub-segment least-squares
slopes, an exponentially weighted moving average, per-sub-segment
min/median/max, first-order differences, and per-position differences
between every unordered channel pair.  Missing samples stay missing (NaN)
and any feature whose entire support is missing is NaN; downstream the
classifier routes missing features through surrogate splits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

MISSING = np.nan


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry: l past samples, r future samples, plus derived sizes.

    Sub-segment length and EWMA kernel width default to max(5, (l+r+1)/5)
    rounded to the nearest integer.  Outputs that use r future samples are
    only available with a delay of r steps.
    """

    l: int
    r: int
    seg_len: int = None
    ewma_width: int = None

    def __post_init__(self):
        l, r = int(self.l), int(self.r)
        if l < 0 or r < 0:
            raise ValueError("window context sizes must be >= 0")
        w = l + r + 1
        if w < 2:
            raise ValueError("window must contain at least 2 samples")
        seg = int(self.seg_len) if self.seg_len is not None else max(5, round(w / 5))
        ew = int(self.ewma_width) if self.ewma_width is not None else max(5, round(w / 5))
        if not 1 <= seg <= w:
            raise ValueError(f"sub-segment length {seg} outside [1, {w}]")
        if not 1 <= ew:
            raise ValueError("EWMA width must be >= 1")
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "seg_len", seg)
        object.__setattr__(self, "ewma_width", ew)

    @property
    def width(self) -> int:
        return self.l + self.r + 1

    def segment_bounds(self):
        """(start, stop) pairs; the remainder folds into the last segment."""
        w, s = self.width, self.seg_len
        n_seg = max(1, w // s)
        bounds = [(i * s, (i + 1) * s) for i in range(n_seg)]
        bounds[-1] = (bounds[-1][0], w)
        return bounds


@dataclass(frozen=True)
class FeatureSchema:
    """Deterministic mapping from feature positions to names."""

    names: tuple
    schema_id: str

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


def build_schema(spec: WindowSpec, n_channels: int, channel_names=None) -> FeatureSchema:
    if channel_names is None:
        channel_names = [f"c{i}" for i in range(n_channels)]
    if len(channel_names) != n_channels:
        raise ValueError("channel name count mismatch")
    w = spec.width
    n_seg = len(spec.segment_bounds())
    names = []
    for ch in channel_names:
        names += [f"{ch}_raw{k}" for k in range(w)]
        names += [f"{ch}_slope{s}" for s in range(n_seg)]
        names += [f"{ch}_ewma"]
        for s in range(n_seg):
            names += [f"{ch}_min{s}", f"{ch}_med{s}", f"{ch}_max{s}"]
        names += [f"{ch}_diff{k}" for k in range(w - 1)]
    for i in range(n_channels):
        for j in range(i + 1, n_channels):
            names += [
                f"x_{channel_names[i]}-{channel_names[j]}_{k}" for k in range(w)
            ]
    sid = f"w{spec.l}.{spec.r}s{spec.seg_len}e{spec.ewma_width}c{n_channels}"
    return FeatureSchema(tuple(names), sid)


def extract_window(series, t: int, spec: WindowSpec):
    """Per-channel window around step t with edge replication.

    `series` is (T,) or (T, C).  Returns (windows, padded) where windows is
    (C, l+r+1) and padded flags positions replicated from the edges.
    Missing source samples remain NaN.
    """
    arr = np.asarray(series, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    T = arr.shape[0]
    if not 0 <= t < T:
        raise ValueError(f"step {t} outside sequence of length {T}")
    idx = np.arange(t - spec.l, t + spec.r + 1)
    padded = (idx < 0) | (idx > T - 1)
    clipped = np.clip(idx, 0, T - 1)
    return arr[clipped].T.copy(), padded


def least_squares_slope(segment) -> float:
    """OLS slope of the values against their position index; NaNs excluded."""
    y = np.asarray(segment, dtype=float)
    t = np.arange(y.size, dtype=float)
    ok = np.isfinite(y)
    n = int(ok.sum())
    if n < 2:
        return MISSING
    t, y = t[ok], y[ok]
    tm, ym = t.mean(), y.mean()
    denom = float(((t - tm) ** 2).sum())
    if denom <= 0.0:
        return MISSING
    return float(((t - tm) @ (y - ym)) / denom)


def _segment_slopes(win3: np.ndarray, bounds):
    """Vectorised nan-excluding OLS slopes; win3 is (T, C, w)."""
    out = []
    for a, b in bounds:
        sub = win3[:, :, a:b]
        tt = np.arange(b - a, dtype=float)
        ok = np.isfinite(sub)
        n = ok.sum(axis=-1)
        st = (ok * tt).sum(axis=-1)
        stt = (ok * tt**2).sum(axis=-1)
        sx = np.nansum(np.where(ok, sub, 0.0), axis=-1)
        stx = np.nansum(np.where(ok, sub * tt, 0.0), axis=-1)
        denom = n * stt - st**2
        with np.errstate(invalid="ignore", divide="ignore"):
            slope = (n * stx - st * sx) / denom
        slope = np.where((n >= 2) & (denom > 0), slope, MISSING)
        out.append(slope)
    return np.stack(out, axis=-1)  # (T, C, n_seg)


def _features_from_windows(win3: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Feature matrix (T, F) from stacked windows (T, C, w)."""
    T, C, w = win3.shape
    bounds = spec.segment_bounds()
    n_seg = len(bounds)

    slopes = _segment_slopes(win3, bounds)

    ages = np.arange(w - 1, -1, -1, dtype=float)  # 0 at the most recent sample
    decay = max(1.0 - 2.0 / (spec.ewma_width + 1.0), 1e-12)
    kernel = decay**ages
    ok = np.isfinite(win3)
    den = (ok * kernel).sum(axis=-1)
    num = np.nansum(np.where(ok, win3 * kernel, 0.0), axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ewma = np.where(den > 0, num / den, MISSING)

    seg_stats = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        for a, b in bounds:
            sub = win3[:, :, a:b]
            seg_stats.append(
                np.stack(
                    [np.nanmin(sub, -1), np.nanmedian(sub, -1), np.nanmax(sub, -1)],
                    axis=-1,
                )
            )
    seg_stats = np.concatenate(seg_stats, axis=-1)  # (T, C, 3 * n_seg)

    diffs = win3[:, :, 1:] - win3[:, :, :-1]

    per_channel = np.concatenate(
        [win3, slopes, ewma[:, :, None], seg_stats, diffs], axis=-1
    )  # (T, C, w + n_seg + 1 + 3 n_seg + w - 1)
    blocks = [per_channel.reshape(T, -1)]
    for i in range(C):
        for j in range(i + 1, C):
            blocks.append(win3[:, i, :] - win3[:, j, :])
    return np.concatenate(blocks, axis=1)


def compute_features(windows, spec: WindowSpec, schema_id: str = None) -> FeatureVector:
    """Feature vector for one step from its per-channel windows (C, w)."""
    win = np.atleast_2d(np.asarray(windows, dtype=float))
    if win.shape[1] != spec.width:
        raise ValueError(f"window width {win.shape[1]} != {spec.width}")
    values = _features_from_windows(win[None, :, :], spec)[0]
    sid = schema_id or build_schema(spec, win.shape[0]).schema_id
    return FeatureVector(values, sid)


def feature_matrix(series, spec: WindowSpec, channel_names=None):
    """Features for every step of a (T, C) series; returns (X, schema).

    Boundary windows use edge replication, identically to `extract_window`.
    """
    arr = np.asarray(series, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    T, C = arr.shape
    if T < 1:
        raise ValueError("empty series")
    schema = build_schema(spec, C, channel_names)
    padded = np.pad(arr, ((spec.l, spec.r), (0, 0)), mode="edge")
    win3 = np.lib.stride_tricks.sliding_window_view(padded, spec.width, axis=0)
    # sliding_window_view yields (T, C, w)
    return _features_from_windows(np.ascontiguousarray(win3), spec), schema


def write_features_csv(path, X, schema: FeatureSchema, timestamps=None):
    """CSV export with the schema as header row; missing cells are empty."""
    X = np.asarray(X, dtype=float)
    ts = np.arange(X.shape[0]) if timestamps is None else np.asarray(timestamps)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp," + ",".join(schema.names) + "\n")
        for t, row in zip(ts, X):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in row]
            fh.write(f"{t}," + ",".join(cells) + "\n")
