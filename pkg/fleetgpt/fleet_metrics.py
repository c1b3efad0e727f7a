# fleet_metrics.py
"""
fleet_metrics.py

Evaluation metrics, power-law fit, feature export and a logistic-regression
reference for anomaly detection.

Conventions
- BP metrics (MAE, MSE, MAPE) are computed in signal units
- AD counts are per timestep: a score >= threshold is a positive
- a ratio with a zero denominator is undefined and written as "None"; so
  are BP metrics over zero normal timesteps
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from sklearn.linear_model import LogisticRegression

from fleet_data import SignalWindow
from fleet_errors import ContractError, DataParseError, DimensionError
from fleet_tensor import no_grad

logger = logging.getLogger(__name__)

MAPE_FLOOR = 1e-8

# -----------------------------
# Baseline prediction
# -----------------------------


@dataclass
class BPMetrics:
    mae: Optional[float]
    mse: Optional[float]
    mape: Optional[float]
    n: int = 0

    @property
    def defined(self) -> bool:
        return self.n > 0


def bp_metrics(y: np.ndarray, y_hat: np.ndarray, floor: float = MAPE_FLOOR) -> BPMetrics:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"bp_metrics: shapes {y.shape} and {y_hat.shape} differ")
    if y.size == 0:
        return BPMetrics(None, None, None, 0)
    err = np.abs(y - y_hat)
    return BPMetrics(
        mae=float(err.mean()),
        mse=float((err * err).mean()),
        mape=float((err / np.maximum(np.abs(y), floor)).mean()),
        n=int(y.size),
    )


# -----------------------------
# Anomaly detection
# -----------------------------
def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


@dataclass
class ADCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    threshold: float = 0.5

    @property
    def precision(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2.0 * p * r / (p + r)

    def __add__(self, other: "ADCounts") -> "ADCounts":
        return ADCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn, self.threshold)


def ad_metrics(y_labels: np.ndarray, y_scores: np.ndarray, threshold: float = 0.5) -> ADCounts:
    y = np.asarray(y_labels).reshape(-1).astype(bool)
    s = np.asarray(y_scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise DimensionError(f"ad_metrics: {y.size} labels vs {s.size} scores")
    pred = s >= threshold
    return ADCounts(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
        threshold=float(threshold),
    )


def _fmt(v) -> str:
    if v is None:
        return "None"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -----------------------------
# Report
# -----------------------------


def _count_lines(prefix: str, c: ADCounts) -> List[str]:
    return [
        f"{prefix}.threshold={_fmt(c.threshold)}",
        f"{prefix}.tp={c.tp}",
        f"{prefix}.fp={c.fp}",
        f"{prefix}.tn={c.tn}",
        f"{prefix}.fn={c.fn}",
        f"{prefix}.precision={_fmt(c.precision)}",
        f"{prefix}.recall={_fmt(c.recall)}",
        f"{prefix}.f1={_fmt(c.f1)}",
    ]


@dataclass
class EvalReport:
    config_hash: str = ""
    seed: int = 0
    trainable_ratio: float = float("nan")
    trainable_params: int = 0
    total_params: int = 0
    params: Dict[str, int] = field(default_factory=dict)
    bp: Dict[str, BPMetrics] = field(default_factory=dict)
    ad: Dict[str, ADCounts] = field(default_factory=dict)
    baseline_ad: Dict[str, ADCounts] = field(default_factory=dict)
    counting: str = "per-timestep"
    notes: Dict[str, str] = field(default_factory=dict)

    def to_lines(self) -> List[str]:
        lines = [
            f"config_hash={self.config_hash}",
            f"seed={self.seed}",
            f"trainable_params={self.trainable_params}",
            f"total_params={self.total_params}",
            f"trainable_ratio={_fmt(self.trainable_ratio)}",
            "trainable_ratio_reference=0.001",
            f"ad_counting={self.counting}",
        ]
        lines += [f"params.{group}={n}" for group, n in self.params.items()]
        for fid, m in self.bp.items():
            lines += [f"bp.{fid}.mae={_fmt(m.mae)}", f"bp.{fid}.mse={_fmt(m.mse)}", f"bp.{fid}.mape={_fmt(m.mape)}", f"bp.{fid}.n={m.n}"]
        for fid, c in self.ad.items():
            lines += _count_lines(f"ad.{fid}", c)
        for fid, c in self.baseline_ad.items():
            lines += _count_lines(f"baseline.{fid}", c)
        lines += [f"note.{k}={v}" for k, v in self.notes.items()]
        return lines

    def counts_frame(self) -> pd.DataFrame:
        rows = []
        for fid, c in self.ad.items():
            rows.append({
                "fleet_id": fid, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
                "precision": _fmt(c.precision), "recall": _fmt(c.recall), "f1": _fmt(c.f1),
                "threshold": c.threshold, "config_hash": self.config_hash, "seed": self.seed,
            })
        cols = ["fleet_id", "tp", "fp", "tn", "fn", "precision", "recall", "f1", "threshold", "config_hash", "seed"]
        return pd.DataFrame(rows, columns=cols)

    def write(self, path: str) -> Tuple[str, str]:
        """`path` (key=value) and `path.counts.csv`."""
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.to_lines()) + "\n")
        counts_path = path + ".counts.csv"
        self.counts_frame().to_csv(counts_path, index=False, lineterminator="\n")
        return path, counts_path


# -----------------------------
# Power-law fit
# -----------------------------


@dataclass
class PowerLawFit:
    n_c: float
    alpha_n: float
    r2: float


def fit_power_law(points: Sequence[Tuple[float, float]]) -> PowerLawFit:
    """
    Least squares on log L = alpha * (log N_c - log N).
    With alpha = 0 (constant L) N_c is undefined and returned as nan.
    """
    pts = [(float(n), float(l)) for n, l in points]
    if len(pts) < 3:
        raise ContractError(f"fit_power_law needs >= 3 points, got {len(pts)}")
    if any(n <= 0 or l <= 0 for n, l in pts):
        raise ValueError("fit_power_law: parameter counts and losses must be positive")
    x = np.log([n for n, _ in pts])
    y = np.log([l for _, l in pts])
    fit = sm.OLS(y, sm.add_constant(x, has_constant="add")).fit()
    intercept, slope = float(fit.params[0]), float(fit.params[1])
    alpha = -slope
    ssr = float(np.sum(fit.resid ** 2))
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ssr / tss if tss > 0 else (1.0 if ssr < 1e-20 else 0.0)
    if abs(alpha) < 1e-12:
        return PowerLawFit(n_c=float("nan"), alpha_n=0.0, r2=r2)
    return PowerLawFit(n_c=math.exp(intercept / alpha), alpha_n=alpha, r2=r2)


def predict_power_law(n, n_c: float, alpha_n: float):
    return (n_c / np.asarray(n, dtype=np.float64)) ** alpha_n


def read_scaling_points(path: str) -> List[Tuple[float, float]]:
    df = pd.read_csv(path)
    for col in ("params", "mape"):
        if col not in df.columns:
            raise DataParseError(f"{path}: missing column {col!r} (expected params,mape)")
    return list(zip(df["params"].astype(float), df["mape"].astype(float)))


def write_scaling_points(rows: Sequence[Dict[str, object]], path: str) -> str:
    pd.DataFrame(list(rows)).to_csv(path, index=False, lineterminator="\n")
    return path


# -----------------------------
# Feature export
# -----------------------------


def export_features(model, windows: Sequence[SignalWindow], fleet, path: str, config_hash: str = "", seed: int = 0) -> pd.DataFrame:
    """
    One row per window: fleet_id, window start, anomaly flag, and the final-layer
    patch tokens mean-pooled over channels and patches (d values).
    """
    bs = model.cfg.training.batch_size
    rows = []
    d = model.cfg.model.model_dim
    with no_grad():
        for i in range(0, len(windows), bs):
            batch = list(windows[i:i + bs])
            tok, h = model.encode(batch, fleet)
            pooled = h.data[..., tok.sections.patch, :].mean(axis=(-3, -2))  # [B, d]
            for w, vec in zip(batch, pooled):
                row = {"fleet_id": w.fleet_id, "window_start": w.start, "anomaly": int(w.has_fault)}
                row.update({f"f{j}": float(vec[j]) for j in range(d)})
                row["config_hash"] = config_hash
                row["seed"] = seed
                rows.append(row)
    df = pd.DataFrame(rows)
    df.to_csv(path, index=False, lineterminator="\n")
    logger.info("wrote %d feature rows to %s", len(df), path)
    return df


# -----------------------------
# Logistic-regression reference
# -----------------------------


def _timestep_features(windows: Sequence[SignalWindow]) -> Tuple[np.ndarray, np.ndarray]:
    X, y = [], []
    for w in windows:
        v = w.values.astype(np.float64)
        z = (v - v.mean(axis=1, keepdims=True)) / np.maximum(v.std(axis=1, keepdims=True), 1e-5)
        X.append(z.T)
        y.append(w.ad_labels.astype(np.int64))
    return np.concatenate(X), np.concatenate(y)


def logistic_ad_baseline(
    train: Sequence[SignalWindow],
    test: Sequence[SignalWindow],
    threshold: float = 0.5,
    seed: int = 0,
) -> ADCounts:
    """Per-timestep logistic regression on per-window z-scored channel values."""
    X_tr, y_tr = _timestep_features(train)
    X_te, y_te = _timestep_features(test)
    if len(np.unique(y_tr)) < 2:
        raise ContractError("logistic_ad_baseline: training windows need both normal and anomalous timesteps")
    clf = LogisticRegression(max_iter=1000, random_state=seed)
    clf.fit(X_tr, y_tr)
    return ad_metrics(y_te, clf.predict_proba(X_te)[:, 1], threshold)
