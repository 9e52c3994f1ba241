"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 model error,
4 generation-backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import chat
from .config import RunConfig, load_config
from .errors import FoodWarnError, NoWindows, TooFewSamples
from .ingest import (
    DEFAULT_FEATURES,
    FeatureTable,
    ObservationKey,
    RawSeries,
    WarningLabel,
    join_complete,
    load_source,
    load_warnings,
    write_source,
)
from .models import load_model, predict_price, save_model
from .preprocess import apply_recipe, build_windows, split_table
from .report import check_report, emit_report, write_report
from .training import (
    SyntheticSpec,
    generate_synthetic,
    horizon_sweep,
    persistence_baseline,
    prepare_dataset,
    price_history_predictions,
    train_price,
    train_warning,
)

log = logging.getLogger("foodwarn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def _ingest(cfg: RunConfig) -> FeatureTable:
    if not cfg.sources:
        raise FoodWarnError("config declares no sources")
    series = [load_source(path, schema) for schema, path in cfg.sources]
    return join_complete(series, cfg.feature_names)


def _table(cfg: RunConfig) -> FeatureTable:
    path = cfg.path("table")
    if path is not None and path.exists():
        return FeatureTable.from_csv(path)
    return _ingest(cfg)


def cmd_ingest(cfg: RunConfig, args) -> int:
    table = _ingest(cfg)
    out = Path(args.out) if args.out else cfg.path("table")
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out)
    print(f"wrote {len(table)} complete rows x {table.n} features to {out}")
    return 0


def cmd_train_price(cfg: RunConfig, args) -> int:
    table = _table(cfg)
    horizon = args.horizon or cfg.horizon
    ds = prepare_dataset(table, None, cfg.m, horizon, cfg.train_frac)
    tc = cfg.train_config("price", args.epochs, args.seed)
    mc = cfg.price_model_config(table.n, horizon)
    model, curve = train_price(ds.train, tc, mc, ds.val, ds.recipe)
    out = Path(args.out) if args.out else cfg.path("price_model")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    metrics = {
        "kind": "price",
        "mae": curve.val_metric[-1] if curve.epochs and ds.val else None,
        "train_mae": curve.train_metric[-1] if curve.epochs else None,
        "persistence_mae": persistence_baseline(ds.val) if ds.val else None,
        "split_sizes": {"train": len(ds.train), "val": len(ds.val)},
        "config": {"model": mc.__dict__, "training": tc.__dict__},
    }
    _dump(metrics, cfg.path("metrics_dir") / "price_metrics.json")
    print(f"price model -> {out}; val MAE {metrics['mae']}")
    return 0


def _warning_data(cfg: RunConfig, price_model, table: FeatureTable):
    if cfg.labels is None:
        raise FoodWarnError("config has no 'labels' file")
    labels = load_warnings(cfg.labels)
    pm = price_model.config
    cleaned = apply_recipe(price_model.recipe, table)
    windows = build_windows(cleaned, labels, pm.m, pm.horizon)
    windows, preds = price_history_predictions(price_model, windows)
    train_keys = set(split_table(table, cfg.train_frac)[0].rows)
    is_train = np.array([w.key.shift(pm.horizon) in train_keys for w in windows], dtype=bool)
    tr = [w for w, f in zip(windows, is_train) if f]
    va = [w for w, f in zip(windows, is_train) if not f]
    return tr, preds[is_train], va, preds[~is_train]


def cmd_train_warning(cfg: RunConfig, args) -> int:
    table = _table(cfg)
    price_model = load_model(cfg.path("price_model"))
    tr, tr_p, va, va_p = _warning_data(cfg, price_model, table)
    if not tr:
        raise TooFewSamples("no training windows for the warning model")
    mc = cfg.warning_model_config(table.n).replace(horizon=price_model.config.horizon)
    tc = cfg.train_config("warning", args.epochs, args.seed)
    model, curve = train_warning(tr, tr_p, tc, mc, (va, va_p), price_model.recipe)
    out = Path(args.out) if args.out else cfg.path("warning_model")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    metrics = {
        "kind": "warning",
        "f1": curve.val_metric[-1] if curve.epochs and va else None,
        "train_f1": curve.train_metric[-1] if curve.epochs else None,
        "split_sizes": {"train": len(tr), "val": len(va)},
        "class_counts": model.meta["class_counts"],
        "config": {"model": {**mc.__dict__, "ffn_dims": list(mc.ffn_dims)}, "training": tc.__dict__},
    }
    _dump(metrics, cfg.path("metrics_dir") / "warning_metrics.json")
    print(f"warning model -> {out}; val macro F1 {metrics['f1']}")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    table = _table(cfg)
    horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else cfg.sweep.get("horizons", [1, 2, 3, 4, 5, 6])
    repeats = args.repeats or cfg.sweep.get("repeats", 3)
    epochs = args.epochs if args.epochs is not None else cfg.sweep.get("epochs")
    result = horizon_sweep(
        table,
        horizons,
        repeats,
        cfg.train_config("price", epochs, args.seed),
        cfg.price_model_config(table.n),
        cfg.train_frac,
    )
    out = Path(args.out) if args.out else cfg.path("sweep")
    out.parent.mkdir(parents=True, exist_ok=True)
    result.to_csv(out)
    for h, (mean, std) in result.summary().items():
        note = f"  ({result.errors[h]})" if h in result.errors else ""
        print(f"h={h}: mean val MAE {mean:.5f} +/- {std:.5f}; persistence {result.persistence.get(h, float('nan')):.5f}{note}")
    print(f"wrote {len(result.rows)} rows to {out}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    model = load_model(args.model or cfg.path("price_model"))
    table = _table(cfg)
    cleaned = apply_recipe(model.recipe, table)
    windows = build_windows(cleaned, None, model.config.m, model.config.horizon, require_target=False)
    country, commodity = args.country.upper(), args.commodity.upper()
    mine = [w for w in windows if w.key.series == (country, commodity)]
    if args.month:
        key = ObservationKey.parse(country, commodity, args.month)
        mine = [w for w in mine if w.key == key]
    if not mine:
        raise NoWindows(f"no eligible window for {country}/{commodity}")
    window = max(mine, key=lambda w: w.key)
    cleaned_p, raw_p = predict_price(model, window)
    print(json.dumps({
        "country": country,
        "commodity": commodity,
        "as_of": window.key.month_str,
        "target_month": window.key.shift(model.config.horizon).month_str,
        "predicted_price": raw_p,
        "predicted_price_cleaned": cleaned_p,
    }))
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    price_model = load_model(cfg.path("price_model"))
    warning_model = load_model(cfg.path("warning_model"))
    report = emit_report(price_model, warning_model, _table(cfg))
    check_report(report)
    out = Path(args.out) if args.out else cfg.path("report")
    write_report(report, out)
    print(f"wrote {len(report['entries'])} entries to {out}")
    return 0


def _severity_from_models(cfg: RunConfig, country: str, commodity: str) -> WarningLabel | None:
    pm_path, wm_path = cfg.path("price_model"), cfg.path("warning_model")
    if not (pm_path and wm_path and pm_path.exists() and wm_path.exists()):
        return None
    report = emit_report(load_model(pm_path), load_model(wm_path), _table(cfg))
    for e in report["entries"]:
        if (e["country"], e["commodity"]) == (country, commodity):
            return WarningLabel.parse(e["label"])
    return None


def cmd_chat(cfg: RunConfig, args) -> int:
    c = cfg.chat
    country, commodity = args.country.upper(), args.commodity.upper()
    severity = WarningLabel.parse(args.severity) if args.severity else _severity_from_models(cfg, country, commodity)
    profile = chat.UserProfile(country, commodity, severity, args.language or c.get("language", "en"))
    backend_name = args.backend or c.get("backend", "stub")
    opts = {k: c[k] for k in ("max_tokens", "temperature") if k in c}
    backend = chat.make_backend(backend_name, c.get("url"), **opts)
    qa_path = cfg.path("qa_store")
    store = chat.QaStore.load(qa_path) if qa_path else chat.QaStore(chat.DEFAULT_QA)
    state = chat.init_conversation(
        profile,
        backend,
        store,
        tau_filter=c.get("tau_filter", chat.TAU_FILTER),
        tau_retrieve=c.get("tau_retrieve", chat.TAU_RETRIEVE),
        llm_filter=c.get("llm_filter", False),
    )
    out = sys.stdout
    out.write(f"assistant: {state.history[-1].text}\n")
    for line in sys.stdin:
        query = line.strip()
        if query in ("exit", "quit"):
            break
        if not query:
            continue
        turn = chat.respond(state, query)
        cite = f" [{turn.citation}]" if turn.citation else ""
        out.write(f"assistant ({turn.route}): {turn.text}{cite}\n")
        out.flush()
    return 0


def cmd_synth(args) -> int:
    """Write a synthetic demo workspace: source CSVs, labels, QA store and config."""
    out = Path(args.out)
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(series_count=args.series, months=args.months, spike_rate=args.spike_rate, seed=args.seed)
    table, labels = generate_synthetic(spec)
    sources = {}
    for j, name in enumerate(DEFAULT_FEATURES):
        rs = RawSeries(name, {k: float(v[j]) for k, v in table.rows.items()})
        write_source(rs, data / f"{name}.csv")
        sources[name] = {"file": f"{name}.csv"}
    labels.to_csv(data / "warnings.csv")
    chat.QaStore(chat.DEFAULT_QA).save(out / "qa.json")
    config = {
        "seed": args.seed,
        "data_dir": "data",
        "m": 3,
        "horizon": 1,
        "sources": sources,
        "labels": "warnings.csv",
        "paths": {"qa_store": "qa.json"},
        "training": {"price_epochs": 20, "warning_epochs": 20},
        "sweep": {"horizons": [1, 2, 3, 4, 5, 6], "repeats": 3, "epochs": 10},
        "chat": {"backend": "stub"},
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    print(f"wrote synthetic workspace to {out} ({len(table)} rows, {len(labels)} warnings)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="foodwarn", description="Food commodity price forecasting and early warnings.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True)
        return sp

    sp = with_config("ingest", "join source CSVs into one feature table")
    sp.add_argument("--out")

    for name in ("train-price", "train-warning"):
        sp = with_config(name, f"train the {name.split('-')[1]} model")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if name == "train-price":
            sp.add_argument("--horizon", type=int)

    sp = with_config("sweep", "validation MAE against forecast horizon")
    sp.add_argument("--horizons")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = with_config("predict", "forecast one series")
    sp.add_argument("--country", required=True)
    sp.add_argument("--commodity", required=True)
    sp.add_argument("--month", help="window end month YYYY-MM (default: latest)")
    sp.add_argument("--model")

    sp = with_config("report", "write the warning report JSON")
    sp.add_argument("--out")

    sp = with_config("chat", "terminal chat session")
    sp.add_argument("--country", required=True)
    sp.add_argument("--commodity", required=True)
    sp.add_argument("--severity", help="none | moderate | high (default: from trained models)")
    sp.add_argument("--language")
    sp.add_argument("--backend", choices=["stub", "http"])

    sp = sub.add_parser("synth", help="write a synthetic demo workspace")
    sp.add_argument("--out", required=True)
    sp.add_argument("--series", type=int, default=5)
    sp.add_argument("--months", type=int, default=240)
    sp.add_argument("--spike-rate", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    return p


COMMANDS = {
    "ingest": cmd_ingest,
    "train-price": cmd_train_price,
    "train-warning": cmd_train_warning,
    "sweep": cmd_sweep,
    "predict": cmd_predict,
    "report": cmd_report,
    "chat": cmd_chat,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except FoodWarnError as exc:
        print(f"foodwarn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"foodwarn {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
