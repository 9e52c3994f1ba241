"""Optimizer, training loops, metrics, the horizon sweep and synthetic data."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import BadSpec, DataError, LengthMismatch, TooFewSamples, TooShort
from .ingest import DEFAULT_FEATURES, FeatureTable, ObservationKey, WarningLabel, WarningLabelSet
from .models import (
    PriceModelConfig,
    TrainedModel,
    WarningModelConfig,
    l2_targets,
    new_model,
    warning_input,
)
from .numerics import ParameterSet
from .preprocess import CleaningRecipe, FlatWindow, apply_recipe, build_windows, fit_recipe, split_table

log = logging.getLogger(__name__)


class SingleClassWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 3
    epochs: int = 500
    learning_rate: float = 1e-3
    l2: float | None = None  # None: use the model config's l2
    seed: int = 0
    loss: str | None = None  # None: mse for price, cross_entropy for warning
    class_weights: str = "none"  # "none" | "balanced"
    target_train_mae: float | None = None  # price only: stop once reached
    calibrate_bn: bool = True  # exact batch-norm statistics over the training set after each epoch

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and learning_rate > 0 required")
        if self.loss not in (None, "mse", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.class_weights not in ("none", "balanced"):
            raise ValueError(f"unknown class weighting {self.class_weights!r}")


PRICE_EPOCHS = 500
WARNING_EPOCHS = 300


@dataclass
class LossCurve:
    train_loss: list[float] = field(default_factory=list)
    train_metric: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


class Adam:
    def __init__(self, params: ParameterSet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# metrics


def mae(pred: Sequence[float], target: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.size != t.size or p.size == 0:
        raise LengthMismatch(f"mae needs equal non-empty lengths, got {p.size} and {t.size}")
    # correctly rounded sum: independent of element order
    return math.fsum(np.abs(p - t).tolist()) / p.size


def f1_macro(pred: Sequence[int], true: Sequence[int], classes: int = 3) -> float:
    """Unweighted mean of per-class F1, over classes present in either sequence."""
    p = np.asarray([int(x) for x in pred], dtype=np.int64)
    t = np.asarray([int(x) for x in true], dtype=np.int64)
    if p.size != t.size:
        raise LengthMismatch(f"f1_macro needs equal lengths, got {p.size} and {t.size}")
    scores = []
    for c in range(classes):
        tp = int(np.sum((p == c) & (t == c)))
        fp = int(np.sum((p == c) & (t != c)))
        fn = int(np.sum((p != c) & (t == c)))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 1.0


def persistence_baseline(windows: Sequence[FlatWindow]) -> float:
    """MAE of predicting the target as the last observed price."""
    return mae([w.last_price for w in windows], [w.target_price for w in windows])


# ---------------------------------------------------------------------------
# training loops


def _stack(windows: Sequence[FlatWindow]) -> np.ndarray:
    return np.stack([w.features for w in windows])


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _fit(model: TrainedModel, x, y, cfg: TrainConfig, loss_kind: str, eval_fn, class_w=None) -> LossCurve:
    rng = nx.make_rng(cfg.seed + 1)
    l2 = model.config.l2 if cfg.l2 is None else cfg.l2
    penalized = [model.params[n] for n in l2_targets(model.kind, model.params)] if l2 > 0 else []
    opt = Adam(model.params, lr=cfg.learning_rate)
    curve = LossCurve()
    n = x.shape[0]
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(n, cfg.batch_size, rng):
            if idx.size < 2 and n >= 2:
                # a single-row batch gives degenerate batch statistics
                continue
            model.params.zero_grad()
            out = model.forward(x[idx], train=True, rng=rng)
            if loss_kind == "mse":
                loss = nx.mse_loss(out, y[idx])
            else:
                loss = nx.cross_entropy(out, y[idx], class_w)
            if penalized:
                loss = nx.add(loss, nx.scale(nx.sum_of_squares(penalized), l2))
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
            count += idx.size
        curve.train_loss.append(total / max(count, 1))
        if cfg.calibrate_bn:
            model.calibrate_batch_norm(x)
        train_metric, val_metric = eval_fn()
        curve.train_metric.append(train_metric)
        curve.val_metric.append(val_metric)
        if cfg.target_train_mae is not None and train_metric < cfg.target_train_mae:
            break
    return curve


def train_price(
    windows: Sequence[FlatWindow],
    cfg: TrainConfig,
    model_cfg: PriceModelConfig,
    val_windows: Sequence[FlatWindow] = (),
    recipe: CleaningRecipe | None = None,
) -> tuple[TrainedModel, LossCurve]:
    """Minimize MSE plus the L2 penalty; track train and validation MAE per epoch."""
    if len(windows) < max(cfg.batch_size, 2):
        raise TooFewSamples(f"{len(windows)} training windows for batch size {cfg.batch_size}")
    model = new_model("price", model_cfg, cfg.seed, recipe)
    x = _stack(windows)
    y = np.array([w.target_price for w in windows])
    vx = _stack(val_windows) if val_windows else None
    vy = np.array([w.target_price for w in val_windows]) if val_windows else None

    def evaluate():
        train_mae = mae(model.predict_batch(x), y)
        val_mae = mae(model.predict_batch(vx), vy) if vx is not None else math.nan
        return train_mae, val_mae

    curve = _fit(model, x, y, cfg, cfg.loss or "mse", evaluate)
    model.meta = {"epochs_run": curve.epochs, "train_size": len(windows), "val_size": len(val_windows)}
    return model, curve


def _class_weights(labels: np.ndarray) -> np.ndarray:
    counts = np.bincount(labels, minlength=3).astype(np.float64)
    present = counts > 0
    w = np.zeros(3)
    w[present] = labels.size / (present.sum() * counts[present])
    return w


def train_warning(
    windows: Sequence[FlatWindow],
    predicted_prices,
    cfg: TrainConfig,
    model_cfg: WarningModelConfig,
    val: tuple[Sequence[FlatWindow], np.ndarray] | None = None,
    recipe: CleaningRecipe | None = None,
) -> tuple[TrainedModel, LossCurve]:
    """Cross-entropy training on windows concatenated with ``h`` predicted prices.

    The per-epoch metric is macro F1 (train and, if given, validation).
    """
    if len(windows) < max(cfg.batch_size, 2):
        raise TooFewSamples(f"{len(windows)} training windows for batch size {cfg.batch_size}")
    preds = np.asarray(predicted_prices, dtype=np.float64).reshape(len(windows), -1)
    x = np.stack([warning_input(w, p) for w, p in zip(windows, preds)])
    y = np.array([int(w.target_label or WarningLabel.NONE) for w in windows], dtype=np.int64)
    counts = np.bincount(y, minlength=3)
    log.info("warning class counts: none=%d moderate=%d high=%d", *counts)
    if np.count_nonzero(counts) == 1:
        warnings.warn(f"all {len(y)} training labels are {WarningLabel(int(y[0])).title}", SingleClassWarning)
    class_w = _class_weights(y) if cfg.class_weights == "balanced" else None

    model = new_model("warning", model_cfg, cfg.seed, recipe)
    if val is not None and len(val[0]):
        vw, vp = val
        vp = np.asarray(vp, dtype=np.float64).reshape(len(vw), -1)
        vx = np.stack([warning_input(w, p) for w, p in zip(vw, vp)])
        vy = np.array([int(w.target_label or WarningLabel.NONE) for w in vw])
    else:
        vx = vy = None

    def evaluate():
        tr = f1_macro(model.predict_batch(x).argmax(axis=1), y)
        va = f1_macro(model.predict_batch(vx).argmax(axis=1), vy) if vx is not None else math.nan
        return tr, va

    curve = _fit(model, x, y, cfg, cfg.loss or "cross_entropy", evaluate, class_w)
    model.meta = {
        "epochs_run": curve.epochs,
        "train_size": len(windows),
        "val_size": 0 if vx is None else len(vx),
        "class_counts": [int(c) for c in counts],
    }
    return model, curve


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    recipe: CleaningRecipe
    cleaned: FeatureTable
    train: list[FlatWindow]
    val: list[FlatWindow]


def prepare_dataset(
    table: FeatureTable,
    labels: WarningLabelSet | None,
    m: int,
    h: int,
    train_frac: float = 0.8,
) -> Dataset:
    """Split months chronologically per series, fit cleaning on the early part,
    and assign each window by whether its target month is in that part."""
    train_part, _ = split_table(table, train_frac)
    recipe = fit_recipe(train_part)
    cleaned = apply_recipe(recipe, table)
    windows = build_windows(cleaned, labels, m, h)
    train_keys = set(train_part.rows)
    train, val = [], []
    for w in windows:
        (train if w.key.shift(h) in train_keys else val).append(w)
    return Dataset(recipe, cleaned, train, val)


def price_history_predictions(model: TrainedModel, windows: Sequence[FlatWindow]):
    """For each window at ``t``, the price model's cleaned forecasts for ``t+1..t+h``.

    The forecast for ``t+k`` comes from the window ending at ``t-h+k``.
    Windows lacking that history are dropped; returns ``(kept, predictions)``.
    """
    h = model.config.horizon
    by_key = {w.key: w for w in windows}
    kept, preds = [], []
    for w in windows:
        sources = [by_key.get(w.key.shift(k - h)) for k in range(1, h + 1)]
        if any(s is None for s in sources):
            continue
        kept.append(w)
        # one row at a time, exactly as the report chains forecasts
        preds.append([model.predict_batch(s.features[None, :])[0, 0] for s in sources])
    return kept, np.array(preds).reshape(len(kept), h)


# ---------------------------------------------------------------------------
# horizon sweep


@dataclass
class SweepRow:
    horizon: int
    repeat: int
    seed: int
    val_mae: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    persistence: dict[int, float]
    errors: dict[int, str]

    def summary(self) -> dict[int, tuple[float, float]]:
        out = {}
        for h in dict.fromkeys(r.horizon for r in self.rows):
            vals = np.array([r.val_mae for r in self.rows if r.horizon == h])
            ok = vals[np.isfinite(vals)]
            out[h] = (float(ok.mean()), float(ok.std())) if ok.size else (math.nan, math.nan)
        return out

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon", "repeat", "seed", "val_mae"])
            for r in self.rows:
                w.writerow([r.horizon, r.repeat, r.seed, "" if math.isnan(r.val_mae) else repr(float(r.val_mae))])


def horizon_sweep(
    table: FeatureTable,
    horizons: Sequence[int],
    repeats: int = 3,
    cfg: TrainConfig | None = None,
    model_cfg: PriceModelConfig | None = None,
    train_frac: float = 0.8,
) -> SweepResult:
    """Validation MAE per (horizon, seeded repeat); failures leave NaN rows."""
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or PriceModelConfig(n_features=table.n)
    rows, persistence, errors = [], {}, {}
    for h in horizons:
        seeds = [cfg.seed + r for r in range(repeats)]
        try:
            ds = prepare_dataset(table, None, model_cfg.m, h, train_frac)
            if not ds.val:
                raise TooFewSamples(f"no validation windows at horizon {h}")
            persistence[h] = persistence_baseline(ds.val)
        except DataError as exc:
            errors[h] = str(exc)
            rows.extend(SweepRow(h, r, s, math.nan) for r, s in enumerate(seeds))
            continue
        for r, s in enumerate(seeds):
            try:
                model, curve = train_price(ds.train, _with_seed(cfg, s), model_cfg.replace(horizon=h), ds.val, ds.recipe)
                val = curve.val_metric[-1] if curve.epochs else _val_mae(model, ds.val)
            except DataError as exc:
                errors[h] = str(exc)
                val = math.nan
            log.info("sweep h=%d repeat=%d seed=%d val_mae=%.5f", h, r, s, val)
            rows.append(SweepRow(h, r, s, val))
    return SweepResult(rows, persistence, errors)


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


def _val_mae(model: TrainedModel, windows) -> float:
    return mae(model.predict_batch(_stack(windows)), [w.target_price for w in windows])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Parametric generator settings (a test substitute for real sources)."""

    series_count: int = 5
    months: int = 240
    start_year: int = 2005
    base_level: float = 100.0
    slope_range: tuple[float, float] = (-0.05, 0.15)
    seasonal_amplitude: float = 3.0
    ar_coef: float = 0.6
    noise_std: float = 2.0
    futures_lag: int = 1
    futures_noise: float = 0.5
    feature_noise: float = 0.5
    spike_rate: float = 0.0
    spike_factors: tuple[float, ...] = (1.331, 1.953)
    spike_length: int = 4
    g_mod: float = 0.07
    g_high: float = 0.15
    commodity: str = "MAIZE"
    seed: int = 0

    def validate(self):
        if not abs(self.ar_coef) < 1:
            raise BadSpec("AR coefficient magnitude must be < 1")
        if not self.g_high > self.g_mod > 0:
            raise BadSpec("need g_high > g_mod > 0")
        if self.series_count < 1 or self.months < 4:
            raise BadSpec("need at least one series of 4 months")
        if self.slope_range[0] > self.slope_range[1] or self.noise_std < 0 or self.futures_noise < 0:
            raise BadSpec("invalid slope range or noise level")
        if self.futures_lag < 0 or self.spike_length < 1 or not 0 <= self.spike_rate <= 1:
            raise BadSpec("invalid futures lag or spike settings")
        if self.start_year * 12 + self.months - 1 > 2100 * 12 + 11 or self.start_year < 1900:
            raise BadSpec("generated months fall outside 1900..2100")


def synthetic_warning_oracle(prices: Sequence[float], t: int, g_mod: float = 0.07, g_high: float = 0.15) -> WarningLabel:
    """Label month ``t`` by compound monthly growth over the last three months."""
    if t < 3 or t >= len(prices):
        raise TooShort(f"growth at month {t} needs 3 prior months")
    g = (prices[t] / prices[t - 3]) ** (1.0 / 3.0) - 1.0
    if g > g_high:
        return WarningLabel.HIGH
    if g > g_mod:
        return WarningLabel.MODERATE
    return WarningLabel.NONE


def _smooth(x: np.ndarray, span: int) -> np.ndarray:
    a = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    acc = x[0]
    for i, v in enumerate(x):
        acc = a * v + (1 - a) * acc
        out[i] = acc
    return out


def synthetic_prices(spec: SyntheticSpec, rng: np.random.Generator, extra: int = 0) -> np.ndarray:
    """One raw price path of ``spec.months + extra`` months."""
    n = spec.months + extra
    t = np.arange(n, dtype=np.float64)
    slope = rng.uniform(*spec.slope_range)
    phase = rng.uniform(0, 2 * np.pi)
    ar = np.zeros(n)
    eps = rng.normal(0.0, spec.noise_std, size=n)
    for i in range(1, n):
        ar[i] = spec.ar_coef * ar[i - 1] + eps[i]
    price = spec.base_level + slope * t + spec.seasonal_amplitude * np.sin(2 * np.pi * t / 12 + phase) + ar
    if spec.spike_rate > 0:
        # isolated step-ups lasting spike_length months, at least 3 months apart
        i = 3
        while i < n:
            if rng.random() < spec.spike_rate:
                factor = spec.spike_factors[rng.integers(len(spec.spike_factors))]
                price[i:i + spec.spike_length] *= factor
                i += spec.spike_length + 3
            else:
                i += 1
    return price


def generate_synthetic(spec: SyntheticSpec) -> tuple[FeatureTable, WarningLabelSet]:
    """Seven aligned feature columns per series plus oracle warning labels."""
    spec.validate()
    rng = nx.make_rng(spec.seed)
    rows: dict[ObservationKey, np.ndarray] = {}
    labels = WarningLabelSet()
    for s in range(spec.series_count):
        country = f"C{s:02d}"
        lag = spec.futures_lag
        price_ext = synthetic_prices(spec, rng, extra=lag)
        price = price_ext[:spec.months]
        futures = price_ext[lag:lag + spec.months] + rng.normal(0, spec.futures_noise, spec.months)
        noise = lambda: rng.normal(0, spec.feature_noise, spec.months)  # noqa: E731
        global_index = _smooth(price, 6) + noise()
        proteus = 0.5 - 0.001 * _smooth(price, 24) + 0.01 * noise()
        harvest = 1000.0 - 2.0 * _smooth(price, 12) + noise()
        outlook = 50.0 + 0.1 * _smooth(price, 12) + noise()
        ifs = 10.0 + 0.05 * _smooth(price, 3) + noise()
        columns = {
            "proteus_index": proteus,
            "local_price": price,
            "global_price_index": global_index,
            "harvest_quantity": harvest,
            "outlook_demand": outlook,
            "futures_price": futures,
            "ifs_indicator": ifs,
        }
        first = spec.start_year * 12
        for i in range(spec.months):
            key = ObservationKey(country, spec.commodity, (first + i) // 12, (first + i) % 12 + 1)
            rows[key] = np.array([columns[name][i] for name in DEFAULT_FEATURES])
            if i >= 3:
                label = synthetic_warning_oracle(price, i, spec.g_mod, spec.g_high)
                if label is not WarningLabel.NONE:
                    labels.labels[key] = label
    return FeatureTable(DEFAULT_FEATURES, rows), labels
