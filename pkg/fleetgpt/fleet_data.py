# fleet_data.py
"""
fleet_data.py

Synthetic fleet telemetry with fault injection, CSV/manifest ingestion, windowing.

Design goals
- fleets differ in channel count, sampling rate and fault mode but share the
  same generative family (sinusoids + AR(1) noise + slow drift), so what is
  learned on one fleet is useful on another
- the baseline channel is a fixed smooth function of three covariates plus
  small noise, so baseline prediction is learnable from the other channels
- faults shift a contiguous segment of the baseline channel and set the
  per-timestep label to 1 exactly there (0 = normal)
- deterministic per seed

Inputs:
- FleetSpec (a preset from FLEETS or a manifest)
- num_points, seed

Outputs:
- FleetDataset [M x T] (+ optional labels), SignalWindow slices
"""

from __future__ import annotations

import logging
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.signal import lfilter

from fleet_config import read_key_values
from fleet_errors import ConfigError, ContractError, DataParseError, InputTooShortError
from fleet_training import stream_rng

logger = logging.getLogger(__name__)

FaultType = str  # "under_pressure" | "over_pressure" | "over_temperature"
FAULT_TYPES: Tuple[str, ...] = ("under_pressure", "over_pressure", "over_temperature")
LABEL_COLUMN = "ad_label"
TIME_COLUMN = "t"

# Generator constants
PERIOD_RANGE_S = (400.0, 8000.0)
AR_PHI = 0.9
AR_SCALE = 0.3
BASELINE_NOISE = 0.1
FAULT_SEGMENT = (0.05, 0.30)
SHIFT_SIGMAS = (2.0, 5.0)
RAMP_PEAK_SIGMAS = (3.0, 6.0)
RAMP_START_SIGMAS = 2.0

# -----------------------------
# Fleet descriptions
# -----------------------------

COVARIATE_NAMES: Tuple[Tuple[str, str], ...] = (
    ("n2_speed", "pct"),
    ("ambient_temp", "degC"),
    ("altitude", "ft"),
    ("n1_speed", "pct"),
    ("mach", "mach"),
    ("pack_flow", "kg/s"),
    ("prsov_position", "deg"),
    ("fan_air_valve", "deg"),
    ("egt", "degC"),
    ("fuel_flow", "kg/h"),
    ("duct_press", "psi"),
    ("cabin_alt", "ft"),
)

BASELINE_CHANNEL: Dict[str, Tuple[str, str]] = {
    "under_pressure": ("bleed_pressure", "psi"),
    "over_pressure": ("bleed_pressure", "psi"),
    "over_temperature": ("precooler_outlet_temp", "degC"),
}


def _roster(num_channels: int, fault_type: str) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    names, units = [BASELINE_CHANNEL[fault_type][0]], [BASELINE_CHANNEL[fault_type][1]]
    for i in range(num_channels - 1):
        base, unit = COVARIATE_NAMES[i % len(COVARIATE_NAMES)]
        lap = i // len(COVARIATE_NAMES)
        names.append(base if lap == 0 else f"{base}_{lap + 1}")
        units.append(unit)
    return tuple(names), tuple(units)


@dataclass(frozen=True)
class FleetSpec:
    fleet_id: str
    num_channels: int
    sample_freq: float
    fault_type: FaultType
    baseline_channel: int = 0
    anomaly_rate: float = 0.5
    num_points: int = 98304
    channel_names: Tuple[str, ...] = ()
    units: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.num_channels < 2:
            raise ConfigError(f"{self.fleet_id}: need >= 2 channels (baseline + covariates), got {self.num_channels}")
        if self.sample_freq <= 0:
            raise ConfigError(f"{self.fleet_id}: sample_freq must be > 0, got {self.sample_freq}")
        if self.fault_type not in FAULT_TYPES:
            raise ConfigError(f"{self.fleet_id}: unknown fault type {self.fault_type!r}")
        if not 0 <= self.baseline_channel < self.num_channels:
            raise ConfigError(f"{self.fleet_id}: baseline_channel {self.baseline_channel} out of range")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ConfigError(f"{self.fleet_id}: anomaly_rate must be in [0, 1]")
        if not self.channel_names:
            names, units = _roster(self.num_channels, self.fault_type)
            object.__setattr__(self, "channel_names", names)
            object.__setattr__(self, "units", units)
        if len(self.channel_names) != self.num_channels or len(set(self.channel_names)) != self.num_channels:
            raise ConfigError(f"{self.fleet_id}: channel names must be {self.num_channels} unique entries")
        if len(self.units) != self.num_channels:
            object.__setattr__(self, "units", tuple(self.units) + ("",) * (self.num_channels - len(self.units)))

    @property
    def baseline_name(self) -> str:
        return self.channel_names[self.baseline_channel]

    def channel_index(self, name: str) -> int:
        if name not in self.channel_names:
            raise ConfigError(f"{self.fleet_id}: no channel named {name!r}")
        return self.channel_names.index(name)


DESK_FLEETS: Dict[str, FleetSpec] = {
    "fleet_a": FleetSpec("fleet_a", 8, 0.2, "under_pressure"),
    "fleet_b": FleetSpec("fleet_b", 6, 1.0, "over_pressure"),
    "fleet_c": FleetSpec("fleet_c", 4, 0.25, "over_temperature"),
}

# Channel counts, rates, fault modes and sizes of the published datasets.
PUBLISHED_FLEETS: Dict[str, FleetSpec] = {
    "A320": FleetSpec("A320", 52, 0.2, "under_pressure", num_points=936512),
    "A330": FleetSpec("A330", 37, 1.0, "over_pressure", num_points=314132),
    "C919": FleetSpec("C919", 17, 0.25, "over_temperature", num_points=445953),
}

TINY_FLEETS: Dict[str, FleetSpec] = {
    "tiny_a": FleetSpec("tiny_a", 3, 1.0, "over_pressure", num_points=320),
    "tiny_b": FleetSpec("tiny_b", 3, 0.25, "over_temperature", num_points=320),
}

FLEETS: Dict[str, FleetSpec] = {**DESK_FLEETS, **PUBLISHED_FLEETS, **TINY_FLEETS}


def fleet_spec(name: str) -> FleetSpec:
    if name not in FLEETS:
        raise ConfigError(f"Unknown fleet: {name!r} (available: {', '.join(sorted(FLEETS))})")
    return FLEETS[name]


# -----------------------------
# Records
# -----------------------------


@dataclass
class FleetDataset:
    spec: FleetSpec
    values: np.ndarray  # [M, T] physical units
    labels: Optional[np.ndarray] = None  # [T] int8, None when unlabeled
    seed: int = 0

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.spec.num_channels:
            raise ContractError(f"{self.spec.fleet_id}: values {self.values.shape} do not match {self.spec.num_channels} channels")
        if self.labels is not None and self.labels.shape != (self.values.shape[1],):
            raise ContractError(f"{self.spec.fleet_id}: labels {self.labels.shape} do not match length {self.values.shape[1]}")

    @property
    def length(self) -> int:
        return int(self.values.shape[1])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.length, dtype=np.float64) / self.spec.sample_freq


@dataclass
class SignalWindow:
    values: np.ndarray  # [M, L]
    ad_labels: np.ndarray  # [L] int8, 0 = normal
    fleet_id: str
    start: int = 0
    phase: str = "cruise"
    labeled: bool = True

    @property
    def length(self) -> int:
        return int(self.values.shape[1])

    @property
    def num_channels(self) -> int:
        return int(self.values.shape[0])

    @property
    def has_fault(self) -> bool:
        return bool(self.labeled and self.ad_labels.any())


# -----------------------------
# Generator
# -----------------------------
def _fleet_seed(fleet_id: str, seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(fleet_id.encode("utf-8"))])


def _latent_channel(rng: np.random.Generator, T: int, fs: float) -> np.ndarray:
    """Standardized sinusoid mix + AR(1) noise + slow drift."""
    n = np.arange(T, dtype=np.float64)
    x = np.zeros(T)
    for _ in range(int(rng.integers(2, 5))):
        period = math.exp(rng.uniform(math.log(PERIOD_RANGE_S[0]), math.log(PERIOD_RANGE_S[1]))) * fs
        x += rng.uniform(0.5, 1.5) * np.sin(2.0 * np.pi * n / period + rng.uniform(0.0, 2.0 * np.pi))
    x += lfilter([1.0], [1.0, -AR_PHI], rng.normal(0.0, AR_SCALE, size=T))
    x += rng.normal(0.0, 0.3) * np.linspace(-1.0, 1.0, T)
    return (x - x.mean()) / x.std()


def baseline_function(covariates: np.ndarray) -> np.ndarray:
    """Noise-free baseline latent from up to three standardized covariates [k, T]."""
    out = covariates[0].copy()
    if covariates.shape[0] > 1:
        out += 0.6 * np.tanh(1.5 * covariates[1])
    if covariates.shape[0] > 2:
        out += 0.4 * np.sin(covariates[2])
    return out


def generate_fleet(spec: FleetSpec, num_points: Optional[int] = None, seed: int = 0, window_len: int = 1) -> FleetDataset:
    """All-normal labeled dataset [M x num_points]; faults come from inject_faults."""
    T = spec.num_points if num_points is None else int(num_points)
    if T < window_len:
        raise InputTooShortError(f"{spec.fleet_id}: num_points {T} < window length {window_len}")
    rng = np.random.default_rng(_fleet_seed(spec.fleet_id, seed))
    M = spec.num_channels

    latent = np.stack([_latent_channel(rng, T, spec.sample_freq) for _ in range(M)])
    cov_idx = [i for i in range(M) if i != spec.baseline_channel][:3]
    b = baseline_function(latent[cov_idx]) + rng.normal(0.0, BASELINE_NOISE, size=T)
    latent[spec.baseline_channel] = b

    level = rng.uniform(10.0, 200.0, size=(M, 1))
    scale = rng.uniform(1.0, 20.0, size=(M, 1))
    values = level + scale * latent
    logger.debug("generated %s: M=%d T=%d seed=%d", spec.fleet_id, M, T, seed)
    return FleetDataset(spec=spec, values=values, labels=np.zeros(T, dtype=np.int8), seed=int(seed))


# -----------------------------
# Fault injection
# -----------------------------
def fault_profile(fault_type: FaultType, length: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive deviation over a segment of `length` samples."""
    if fault_type == "under_pressure":
        return np.full(length, -rng.uniform(*SHIFT_SIGMAS) * sigma)
    if fault_type == "over_pressure":
        return np.full(length, rng.uniform(*SHIFT_SIGMAS) * sigma)
    if fault_type == "over_temperature":
        peak = rng.uniform(*RAMP_PEAK_SIGMAS)
        return np.linspace(RAMP_START_SIGMAS, peak, length) * sigma
    raise ConfigError(f"Unknown fault type: {fault_type!r}")


def inject_fault(window: SignalWindow, fault_type: FaultType, seed: int, channel: int = 0) -> SignalWindow:
    """
    Shift one contiguous segment (5%..30% of L) of `channel`; labels are 1
    exactly on the segment. sigma is the channel's std within the window.
    """
    if window.labeled and window.ad_labels.any():
        raise ContractError(f"{window.fleet_id}@{window.start}: window already contains a fault")
    rng = np.random.default_rng(int(seed))
    L = window.length
    lo = max(1, int(math.ceil(FAULT_SEGMENT[0] * L)))
    hi = max(lo, int(math.floor(FAULT_SEGMENT[1] * L)))
    seg = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, L - seg + 1))
    sigma = float(window.values[channel].std())
    if sigma <= 0.0:
        sigma = 1.0

    values = window.values.copy()
    values[channel, start:start + seg] += fault_profile(fault_type, seg, sigma, rng)
    labels = np.zeros(L, dtype=np.int8)
    labels[start:start + seg] = 1
    return replace(window, values=values, ad_labels=labels, labeled=True)


def inject_faults(dataset: FleetDataset, window_len: int, seed: int) -> FleetDataset:
    """
    Inject one fault into each aligned window_len block with probability
    anomaly_rate. Draws come from the `faults` stream of `seed`, split by
    fleet id.
    """
    spec = dataset.spec
    rng = stream_rng(seed, "faults", spec.fleet_id)
    values = dataset.values.copy()
    labels = np.zeros(dataset.length, dtype=np.int8)
    n_faults = 0
    for start in range(0, dataset.length - window_len + 1, window_len):
        hit = rng.random() < spec.anomaly_rate
        fault_seed = int(rng.integers(0, 2 ** 31 - 1))
        if not hit:
            continue
        w = SignalWindow(values[:, start:start + window_len], labels[start:start + window_len], spec.fleet_id, start)
        w = inject_fault(w, spec.fault_type, fault_seed, spec.baseline_channel)
        values[:, start:start + window_len] = w.values
        labels[start:start + window_len] = w.ad_labels
        n_faults += 1
    logger.info("%s: injected %d %s faults", spec.fleet_id, n_faults, spec.fault_type)
    return FleetDataset(spec=spec, values=values, labels=labels, seed=dataset.seed)


def drop_labels(dataset: FleetDataset) -> FleetDataset:
    return FleetDataset(spec=dataset.spec, values=dataset.values, labels=None, seed=dataset.seed)


# -----------------------------
# Learnability check
# -----------------------------
def baseline_learnability(dataset: FleetDataset) -> float:
    """R^2 of an OLS fit of the baseline channel on all other channels, normal samples only."""
    spec = dataset.spec
    normal = np.ones(dataset.length, dtype=bool) if dataset.labels is None else dataset.labels == 0
    y = dataset.values[spec.baseline_channel, normal]
    X = np.delete(dataset.values, spec.baseline_channel, axis=0)[:, normal].T
    fit = sm.OLS(y, sm.add_constant(X, has_constant="add")).fit()
    return float(fit.rsquared)


# -----------------------------
# CSV + manifest
# -----------------------------
def manifest_path_for(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return root + ".manifest"


def write_manifest(dataset: FleetDataset, path: str, config_hash: str = "", extra: Optional[Dict[str, str]] = None) -> str:
    spec = dataset.spec
    lines = [
        f"fleet_id={spec.fleet_id}",
        f"num_channels={spec.num_channels}",
        f"channels={','.join(spec.channel_names)}",
        f"units={','.join(spec.units)}",
        f"sample_freq_hz={spec.sample_freq!r}",
        f"fault_type={spec.fault_type}",
        f"baseline_channel={spec.baseline_name}",
        f"anomaly_rate={spec.anomaly_rate!r}",
        f"has_labels={'true' if dataset.has_labels else 'false'}",
        f"num_points={dataset.length}",
        f"seed={dataset.seed}",
    ]
    if config_hash:
        lines.append(f"config_hash={config_hash}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


@dataclass
class Manifest:
    spec: FleetSpec
    has_labels: bool
    fields: Dict[str, str] = field(default_factory=dict)


def read_manifest(path: str) -> Manifest:
    if not os.path.exists(path):
        raise DataParseError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        kv = dict(read_key_values(f.read()))
    for key in ("fleet_id", "channels", "sample_freq_hz", "fault_type", "baseline_channel"):
        if key not in kv:
            raise DataParseError(f"{path}: manifest is missing {key!r}")
    names = tuple(s.strip() for s in kv["channels"].split(",") if s.strip())
    units = tuple(s.strip() for s in kv.get("units", "").split(","))
    if kv["baseline_channel"] not in names:
        raise DataParseError(f"{path}: baseline_channel {kv['baseline_channel']!r} is not a listed channel")
    try:
        spec = FleetSpec(
            fleet_id=kv["fleet_id"],
            num_channels=len(names),
            sample_freq=float(kv["sample_freq_hz"]),
            fault_type=kv["fault_type"],
            baseline_channel=names.index(kv["baseline_channel"]),
            anomaly_rate=float(kv.get("anomaly_rate", "0.5")),
            num_points=int(kv.get("num_points", "0") or 0),
            channel_names=names,
            units=units if len(units) == len(names) else (),
        )
    except ValueError as e:
        raise DataParseError(f"{path}: {e}") from None
    has_labels = kv.get("has_labels", "false").lower() in ("true", "1", "yes")
    return Manifest(spec=spec, has_labels=has_labels, fields=kv)


def write_csv(dataset: FleetDataset, path: str, config_hash: str = "") -> Tuple[str, str]:
    """Write `path` (CSV) and its manifest; returns both paths."""
    cols: Dict[str, np.ndarray] = {TIME_COLUMN: dataset.times}
    for i, name in enumerate(dataset.spec.channel_names):
        cols[name] = dataset.values[i]
    if dataset.labels is not None:
        cols[LABEL_COLUMN] = dataset.labels.astype(np.int64)
    pd.DataFrame(cols).to_csv(path, index=False, lineterminator="\n")
    mpath = write_manifest(dataset, manifest_path_for(path), config_hash)
    return path, mpath


def _first_bad_row(raw: pd.Series) -> Optional[int]:
    for i, s in enumerate(raw):
        try:
            v = float(s)
        except (TypeError, ValueError):
            return i
        if not math.isfinite(v):
            return i
    return None


def load_csv(path: str, manifest: Optional[str] = None) -> FleetDataset:
    """Parse a CSV written in the `t,<channels...>[,ad_label]` layout."""
    man = read_manifest(manifest or manifest_path_for(path))
    spec = man.spec
    if not os.path.exists(path):
        raise DataParseError(f"data file not found: {path}")
    try:
        # keep_default_na=False: only fields missing from a short row come back as NaN
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataParseError(f"{path}: empty file") from None
    except pd.errors.ParserError as e:
        raise DataParseError(f"{path}: ragged rows ({e})") from None
    short = np.flatnonzero(raw.isna().any(axis=1).to_numpy())
    if short.size:
        row = int(short[0])
        fields = int(raw.iloc[row].notna().sum())
        raise DataParseError(f"{path}: data row {row} has {fields} field(s), the header has {len(raw.columns)}")

    expected = [TIME_COLUMN, *spec.channel_names] + ([LABEL_COLUMN] if man.has_labels else [])
    missing = [c for c in expected if c not in df.columns]
    if missing:
        raise DataParseError(f"{path}: missing column(s) {missing}")
    if len(df) == 0:
        raise DataParseError(f"{path}: empty dataset (header only)")

    for col in expected:
        if not pd.api.types.is_numeric_dtype(df[col]) or df[col].isna().any():
            row = _first_bad_row(raw[col])
            raise DataParseError(f"{path}: non-numeric value in column {col!r} at data row {row}")

    values = df[list(spec.channel_names)].to_numpy(dtype=np.float64).T.copy()
    labels = None
    if man.has_labels:
        lab = df[LABEL_COLUMN].to_numpy()
        bad = np.flatnonzero((lab != 0) & (lab != 1))
        if bad.size:
            raise DataParseError(f"{path}: non-binary {LABEL_COLUMN} {lab[bad[0]]!r} at data row {int(bad[0])}")
        labels = lab.astype(np.int8)
    seed = int(man.fields.get("seed", "0") or 0)
    return FleetDataset(spec=replace(spec, num_points=values.shape[1]), values=values, labels=labels, seed=seed)


# -----------------------------
# Windowing
# -----------------------------
def window_count(T: int, L: int, stride_w: int) -> int:
    if T < L:
        return 0
    return (T - L) // stride_w + 1


def make_windows(
    dataset: FleetDataset,
    L: int,
    stride_w: Optional[int] = None,
    start: int = 0,
    stop: Optional[int] = None,
) -> List[SignalWindow]:
    """Sliding windows over [start, stop) with window stride stride_w (default L)."""
    stride_w = L if stride_w is None else int(stride_w)
    if stride_w < 1:
        raise ConfigError(f"window stride must be >= 1, got {stride_w}")
    stop = dataset.length if stop is None else stop
    if dataset.length < L:
        raise InputTooShortError(f"{dataset.spec.fleet_id}: dataset length {dataset.length} < window length {L}")
    labeled = dataset.labels is not None
    out: List[SignalWindow] = []
    for s in range(start, stop - L + 1, stride_w):
        labels = dataset.labels[s:s + L].copy() if labeled else np.zeros(L, dtype=np.int8)
        out.append(SignalWindow(dataset.values[:, s:s + L].copy(), labels, dataset.spec.fleet_id, s, labeled=labeled))
    return out


def split_bounds(T: int, fractions: Sequence[float] = (0.7, 0.15, 0.15)) -> List[Tuple[int, int]]:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three values summing to 1, got {tuple(fractions)}")
    b1 = int(T * fractions[0])
    b2 = int(T * (fractions[0] + fractions[1]))
    return [(0, b1), (b1, b2), (b2, T)]


def split_windows(
    dataset: FleetDataset,
    L: int,
    stride_w: Optional[int] = None,
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
) -> Dict[str, List[SignalWindow]]:
    """train/val/test windows from contiguous time blocks; no window crosses a boundary."""
    if dataset.length < L:
        raise InputTooShortError(f"{dataset.spec.fleet_id}: dataset length {dataset.length} < window length {L}")
    out: Dict[str, List[SignalWindow]] = {}
    for name, (lo, hi) in zip(("train", "val", "test"), split_bounds(dataset.length, fractions)):
        out[name] = make_windows(dataset, L, stride_w, lo, hi)
        if not out[name]:
            logger.warning("%s: %s split [%d, %d) holds no full window of %d", dataset.spec.fleet_id, name, lo, hi, L)
    return out


def subsample_windows(windows: Sequence[SignalWindow], fraction: float, seed: int) -> List[SignalWindow]:
    """Keep ceil(fraction * n) windows (at least one), in original order."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(windows)
    if n == 0 or fraction >= 1.0:
        return list(windows)
    k = max(1, int(math.ceil(fraction * n)))
    keep = np.sort(np.random.default_rng(int(seed)).choice(n, size=k, replace=False))
    return [windows[i] for i in keep]
