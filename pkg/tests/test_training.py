import csv
import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import month_keys
from foodwarn import numerics as nx
from foodwarn.errors import BadSpec, LengthMismatch, TooFewSamples, TooShort
from foodwarn.ingest import DEFAULT_FEATURES, FeatureTable, WarningLabel
from foodwarn.models import PriceModelConfig, WarningModelConfig, l2_targets, new_model
from foodwarn.numerics import ParameterSet
from foodwarn.preprocess import build_windows
from foodwarn.training import (
    Adam,
    SingleClassWarning,
    SyntheticSpec,
    TrainConfig,
    f1_macro,
    generate_synthetic,
    horizon_sweep,
    mae,
    persistence_baseline,
    prepare_dataset,
    price_history_predictions,
    synthetic_warning_oracle,
    train_price,
    train_warning,
)

TINY_PRICE = PriceModelConfig(d_model=8, heads=2, ffn_dim=16, blocks=1)
TINY_WARNING = WarningModelConfig(d_model=8, heads=2, ffn_dims=(12, 6))


def brute_f1(pred, true):
    """Per-class F1 from an explicit confusion matrix, averaged over classes that occur."""
    conf = [[0] * 3 for _ in range(3)]
    for p, t in zip(pred, true):
        conf[t][p] += 1
    scores = []
    for c in range(3):
        tp = conf[c][c]
        fp = sum(conf[t][c] for t in range(3)) - tp
        fn = sum(conf[c]) - tp
        if tp + fp + fn == 0:
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    return sum(scores) / len(scores) if scores else 1.0


# -- metrics ----------------------------------------------------------------


def test_mae_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0
    assert mae([1, 2], [2, 4]) == 1.5
    with pytest.raises(LengthMismatch):
        mae([1], [1, 2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=30))
def test_mae_symmetric(pairs):
    p, t = zip(*pairs)
    assert mae(p, t) == mae(t, p)


def test_f1_examples():
    N, M, H = WarningLabel.NONE, WarningLabel.MODERATE, WarningLabel.HIGH
    assert f1_macro([N, M, H], [N, M, H]) == 1.0
    assert f1_macro([N, M, M, H], [N, N, M, H]) == pytest.approx(7 / 9, abs=1e-12)
    assert brute_f1([0, 1, 1, 2], [0, 0, 1, 2]) == pytest.approx(7 / 9, abs=1e-12)


def test_f1_matches_brute_force_random(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        p, t = rng.integers(0, 3, n).tolist(), rng.integers(0, 3, n).tolist()
        assert abs(f1_macro(p, t) - brute_f1(p, t)) < 1e-12


def test_f1_exhaustive_short_sequences():
    for n in range(1, 4):
        for p in itertools.product(range(3), repeat=n):
            for t in itertools.product(range(3), repeat=n):
                assert abs(f1_macro(p, t) - brute_f1(p, t)) < 1e-12


# -- optimizer and penalty ----------------------------------------------------


def test_adam_first_step():
    ps = ParameterSet({"w": np.array([1.0, -2.0, 0.5])})
    opt = Adam(ps, lr=0.01)
    ps["w"].grad = np.array([3.0, -0.1, 0.0])
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps)
    expected = np.array([1.0 - 0.01 * 3 / (3 + 1e-8), -2.0 + 0.01 * 0.1 / (0.1 + 1e-8), 0.5])
    assert np.allclose(ps["w"].data, expected, atol=1e-15)


def test_l2_penalty_shrinks_norms(rng):
    ps = ParameterSet({"a.W": rng.normal(size=(4, 4)), "b.W": rng.normal(size=(3, 2))})
    opt = Adam(ps, lr=1e-3)
    norms = []
    for _ in range(300):
        ps.zero_grad()
        nx.scale(nx.sum_of_squares([ps["a.W"], ps["b.W"]]), 0.003).backward()
        opt.step()
        norms.append(math.sqrt(sum(float(np.sum(t.data ** 2)) for _, t in ps.items())))
    assert all(b <= a for a, b in zip(norms, norms[1:]))


def _price_fixture():
    table, _ = generate_synthetic(SyntheticSpec(series_count=2, months=40, seed=8))
    return prepare_dataset(table, None, 3, 1)


def test_l2_reduces_kernel_norm_in_training():
    ds = _price_fixture()
    cfg = TrainConfig(epochs=5, seed=1)
    plain, _ = train_price(ds.train, TrainConfig(epochs=5, seed=1, l2=0.0), TINY_PRICE, recipe=ds.recipe)
    heavy, _ = train_price(ds.train, TrainConfig(epochs=5, seed=1, l2=1.0), TINY_PRICE, recipe=ds.recipe)
    names = l2_targets("price", plain.params)
    norm = lambda m: sum(float(np.sum(m.params[n].data ** 2)) for n in names)  # noqa: E731
    assert norm(heavy) < norm(plain)
    assert cfg.batch_size == 3 and cfg.learning_rate == 1e-3


# -- training loops -----------------------------------------------------------


def test_zero_epochs_is_initialization():
    ds = _price_fixture()
    model, curve = train_price(ds.train, TrainConfig(epochs=0, seed=4), TINY_PRICE, ds.val, ds.recipe)
    init = new_model("price", TINY_PRICE, seed=4)
    assert curve.epochs == 0
    for name, t in init.params.items():
        assert np.array_equal(model.params[name].data, t.data)


def test_same_seed_identical_runs():
    ds = _price_fixture()
    cfg = TrainConfig(epochs=4, seed=2)
    a, ca = train_price(ds.train, cfg, TINY_PRICE, ds.val, ds.recipe)
    b, cb = train_price(ds.train, cfg, TINY_PRICE, ds.val, ds.recipe)
    assert ca == cb
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    c, cc = train_price(ds.train, TrainConfig(epochs=4, seed=3), TINY_PRICE, ds.val, ds.recipe)
    assert cc != ca


def test_price_loss_decreases():
    ds = _price_fixture()
    _, curve = train_price(ds.train, TrainConfig(epochs=15, seed=0), TINY_PRICE, ds.val, ds.recipe)
    assert curve.train_loss[0] >= curve.train_loss[-1]
    assert len(curve.val_metric) == 15 and all(np.isfinite(curve.val_metric))


def test_too_few_windows():
    ds = _price_fixture()
    with pytest.raises(TooFewSamples):
        train_price(ds.train[:2], TrainConfig(epochs=1), TINY_PRICE)


def _warning_fixture():
    spec = SyntheticSpec(series_count=2, months=60, spike_rate=0.1, seed=5)
    table, labels = generate_synthetic(spec)
    ds = prepare_dataset(table, labels, 3, 1)
    truth = lambda ws: np.array([[ds.cleaned.rows[w.key.shift(1)][1]] for w in ws])  # noqa: E731
    return ds, truth


def test_warning_training_runs_and_loss_drops():
    ds, truth = _warning_fixture()
    _, curve = train_warning(ds.train, truth(ds.train), TrainConfig(epochs=10), TINY_WARNING, (ds.val, truth(ds.val)))
    assert curve.train_loss[0] >= curve.train_loss[-1]
    assert all(0 <= f <= 1 for f in curve.val_metric)


def test_warning_all_none_labels():
    ds, truth = _warning_fixture()
    none_windows = [w.__class__(w.key, w.features, w.target_price, WarningLabel.NONE, w.last_price) for w in ds.train]
    with pytest.warns(SingleClassWarning):
        model, curve = train_warning(none_windows, truth(none_windows), TrainConfig(epochs=3), TINY_WARNING)
    x = np.stack([np.concatenate([w.features, p]) for w, p in zip(none_windows, truth(none_windows))])
    assert np.all(model.predict_batch(x).argmax(axis=1) == 0)
    assert curve.train_metric[-1] == 1.0


def test_balanced_class_weights_run():
    ds, truth = _warning_fixture()
    with warnings.catch_warnings():
        warnings.simplefilter("error", SingleClassWarning)
        model, _ = train_warning(ds.train, truth(ds.train), TrainConfig(epochs=2, class_weights="balanced"), TINY_WARNING)
    assert sum(model.meta["class_counts"]) == len(ds.train)


def test_price_history_predictions_alignment():
    table, _ = generate_synthetic(SyntheticSpec(series_count=1, months=30, seed=1))
    ds = prepare_dataset(table, None, 3, 2)
    model = new_model("price", TINY_PRICE.replace(horizon=2), seed=0)
    windows = ds.train + ds.val
    kept, preds = price_history_predictions(model, windows)
    assert preds.shape == (len(kept), 2)
    by_key = {w.key: w for w in windows}
    w = kept[3]
    # forecast for t+1 comes from the window ending at t-1; for t+2 from the window at t
    assert preds[3, 0] == model.predict_batch(by_key[w.key.shift(-1)].features[None])[0, 0]
    assert preds[3, 1] == model.predict_batch(w.features[None])[0, 0]
    assert len(kept) == len(windows) - 1


# -- dataset preparation ------------------------------------------------------


def test_prepare_dataset_is_chronological():
    table, _ = generate_synthetic(SyntheticSpec(series_count=3, months=50, seed=3))
    ds = prepare_dataset(table, None, 3, 2, 0.8)
    for sid in table.series():
        tr = [w.key for w in ds.train if w.key.series == sid]
        va = [w.key for w in ds.val if w.key.series == sid]
        assert tr and va and max(tr) < min(va)


# -- horizon sweep ------------------------------------------------------------


def test_sweep_shape_and_failed_horizon(tmp_path):
    table, _ = generate_synthetic(SyntheticSpec(series_count=1, months=24, seed=0))
    res = horizon_sweep(table, [1, 40], repeats=2, cfg=TrainConfig(epochs=1), model_cfg=TINY_PRICE.replace(n_features=7))
    assert [(r.horizon, r.repeat, r.seed) for r in res.rows] == [(1, 0, 0), (1, 1, 1), (40, 0, 0), (40, 1, 1)]
    assert all(np.isfinite(r.val_mae) for r in res.rows[:2])
    assert all(math.isnan(r.val_mae) for r in res.rows[2:]) and 40 in res.errors
    res.to_csv(tmp_path / "s.csv")
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["horizon", "repeat", "seed", "val_mae"]
    assert len(rows) == 5 and rows[-1][-1] == ""
    assert float(rows[1][3]) == res.rows[0].val_mae


# -- persistence baseline -----------------------------------------------------


def _raw_windows(*paths, h=1):
    rows = {}
    for i, prices in enumerate(paths):
        keys = month_keys(f"C{i:02d}", "MAIZE", 1950, 1, len(prices))
        rows.update({k: np.array([1.0, p, 2.0, 3.0, 4.0, p, 5.0]) for k, p in zip(keys, prices)})
    return build_windows(FeatureTable(DEFAULT_FEATURES, rows), None, 3, h)


def test_persistence_constant_series():
    assert persistence_baseline(_raw_windows([4.2] * 20)) == 0.0


def test_persistence_detrended_linear_series():
    table, _ = generate_synthetic(SyntheticSpec(series_count=1, months=40, slope_range=(0.5, 0.5), seasonal_amplitude=0.0,
                                                noise_std=0.0, futures_noise=0.0, feature_noise=0.0))
    ds = prepare_dataset(table, None, 3, 1)
    assert persistence_baseline(ds.train) == pytest.approx(0.0, abs=1e-12)


def test_persistence_random_walk():
    rng = np.random.default_rng(11)
    sigma = 1.5
    walks = [100 + np.cumsum(rng.normal(0, sigma, size=500)) for _ in range(10)]
    expected = sigma * math.sqrt(2 / math.pi)
    assert abs(persistence_baseline(_raw_windows(*walks)) - expected) < 0.1 * expected


# -- synthetic generator and oracle -------------------------------------------


def test_oracle_examples():
    assert synthetic_warning_oracle([100, 100, 100, 100], 3) is WarningLabel.NONE
    # (160/100)^(1/3) - 1 = 0.1696 > 0.15
    assert (1.6 ** (1 / 3) - 1) == pytest.approx(0.1696, abs=1e-4)
    assert synthetic_warning_oracle([100, 0, 0, 160], 3) is WarningLabel.HIGH
    # (125/100)^(1/3) - 1 = 0.0772, between 0.07 and 0.15
    assert (1.25 ** (1 / 3) - 1) == pytest.approx(0.0772, abs=1e-4)
    assert synthetic_warning_oracle([100, 0, 0, 125], 3) is WarningLabel.MODERATE
    with pytest.raises(TooShort):
        synthetic_warning_oracle([1, 2, 3], 2)


def test_generator_degenerate_spec_is_constant():
    spec = SyntheticSpec(series_count=1, months=24, slope_range=(0, 0), seasonal_amplitude=0, noise_std=0)
    table, labels = generate_synthetic(spec)
    prices = {float(r[1]) for r in table.rows.values()}
    assert prices == {100.0} and len(labels) == 0


def test_generator_deterministic():
    spec = SyntheticSpec(series_count=2, months=30, spike_rate=0.2, seed=17)
    (a, la), (b, lb) = generate_synthetic(spec), generate_synthetic(spec)
    assert a.rows.keys() == b.rows.keys()
    assert all(np.array_equal(a.rows[k], b.rows[k]) for k in a.rows)
    assert la.labels == lb.labels


def test_generator_labels_match_oracle():
    spec = SyntheticSpec(series_count=3, months=120, spike_rate=0.08, seed=5)
    table, labels = generate_synthetic(spec)
    pi = DEFAULT_FEATURES.index("local_price")
    counts = {c: 0 for c in WarningLabel}
    for keys in table.series().values():
        prices = [table.rows[k][pi] for k in keys]
        for i in range(3, len(keys)):
            want = synthetic_warning_oracle(prices, i)
            counts[want] += 1
            assert labels.get(keys[i]) is want
    assert counts[WarningLabel.HIGH] > 0 and counts[WarningLabel.MODERATE] > 0


@pytest.mark.parametrize("bad", [
    dict(ar_coef=1.0), dict(g_mod=0.2, g_high=0.1), dict(months=3), dict(noise_std=-1.0),
    dict(start_year=2095, months=240),
])
def test_generator_rejects_bad_spec(bad):
    with pytest.raises(BadSpec):
        generate_synthetic(SyntheticSpec(**bad))
