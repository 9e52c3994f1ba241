"""Warning report: chained price forecast then warning classification per series."""

from __future__ import annotations

import datetime as dt
import json
import os
from pathlib import Path

import numpy as np

from .errors import NoWindows, RecipeMismatch, RecipeMissing
from .ingest import FeatureTable
from .models import FORMAT_VERSION, TrainedModel, predict_price, predict_warning
from .preprocess import FlatWindow, apply_recipe, build_windows

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "WarningReport",
    "type": "object",
    "required": ["generated_at", "model_version", "entries"],
    "additionalProperties": False,
    "properties": {
        "generated_at": {"type": "string"},
        "model_version": {"type": "integer", "const": FORMAT_VERSION},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": [
                    "country", "commodity", "as_of", "target_month", "horizon",
                    "predicted_price", "predicted_price_cleaned", "label", "probabilities", "model_version",
                ],
                "properties": {
                    "country": {"type": "string", "minLength": 1},
                    "commodity": {"type": "string", "minLength": 1},
                    "as_of": {"type": "string", "pattern": "^[0-9]{4}-[0-9]{2}$"},
                    "target_month": {"type": "string", "pattern": "^[0-9]{4}-[0-9]{2}$"},
                    "horizon": {"type": "integer", "minimum": 1},
                    "predicted_price": {"type": "number"},
                    "predicted_price_cleaned": {"type": "number"},
                    "label": {"enum": ["none", "moderate", "high"]},
                    "probabilities": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["none", "moderate", "high"],
                        "properties": {
                            c: {"type": "number", "minimum": 0, "maximum": 1} for c in ("none", "moderate", "high")
                        },
                    },
                    "model_version": {"type": "integer"},
                },
            },
        },
    },
}


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp so reruns are byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch else dt.datetime.now(dt.timezone.utc)
    return when.replace(microsecond=0).isoformat()


def latest_windows(price_model: TrainedModel, table: FeatureTable) -> dict[tuple[str, str], list[FlatWindow]]:
    """Per series, the most recent ``h`` windows (ending at ``t-h+1..t``), oldest first."""
    cfg = price_model.config
    cleaned = apply_recipe(price_model.recipe, table)
    try:
        windows = build_windows(cleaned, None, cfg.m, cfg.horizon, require_target=False)
    except NoWindows:
        return {}
    by_series: dict[tuple[str, str], dict] = {}
    for w in windows:
        by_series.setdefault(w.key.series, {})[w.key] = w
    out = {}
    for sid, ws in by_series.items():
        last = max(ws)
        chain = [ws.get(last.shift(k - cfg.horizon)) for k in range(1, cfg.horizon + 1)]
        if all(c is not None for c in chain):
            out[sid] = chain
    return out


def emit_report(price_model: TrainedModel, warning_model: TrainedModel, table: FeatureTable) -> dict:
    if price_model.recipe is None or warning_model.recipe is None:
        raise RecipeMissing("both models must carry a cleaning recipe")
    if price_model.recipe.to_dict() != warning_model.recipe.to_dict():
        raise RecipeMismatch("price and warning models were cleaned with different recipes")
    h = price_model.config.horizon
    if warning_model.config.horizon != h:
        raise RecipeMismatch(f"price horizon {h} differs from warning horizon {warning_model.config.horizon}")
    entries = []
    for (country, commodity), chain in sorted(latest_windows(price_model, table).items()):
        preds = [predict_price(price_model, w) for w in chain]
        window = chain[-1]
        cleaned, raw = preds[-1]
        label, probs = predict_warning(warning_model, window, [p[0] for p in preds])
        entries.append({
            "country": country,
            "commodity": commodity,
            "as_of": window.key.month_str,
            "target_month": window.key.shift(h).month_str,
            "horizon": h,
            "predicted_price": raw,
            "predicted_price_cleaned": cleaned,
            "label": label.name.lower(),
            "probabilities": {name: float(p) for name, p in zip(("none", "moderate", "high"), probs)},
            "model_version": warning_model.format_version,
        })
    return {"generated_at": _timestamp(), "model_version": FORMAT_VERSION, "entries": entries}


def write_report(report: dict, path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2), encoding="utf-8")


def check_report(report: dict):
    """Probability-sum and label/argmax invariants (the schema covers the shape)."""
    for e in report["entries"]:
        p = np.array([e["probabilities"][c] for c in ("none", "moderate", "high")])
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities for {e['country']}/{e['commodity']} sum to {p.sum()}")
        if ("none", "moderate", "high")[int(np.argmax(p))] != e["label"]:
            raise ValueError(f"label for {e['country']}/{e['commodity']} is not the argmax")
