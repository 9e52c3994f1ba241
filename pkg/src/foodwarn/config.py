"""Run configuration: a YAML mapping with a closed key set.

Relative paths resolve against the directory holding the config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .ingest import SourceSchema
from .models import PriceModelConfig, WarningModelConfig
from .training import PRICE_EPOCHS, WARNING_EPOCHS, TrainConfig

_SOURCE_KEYS = {"file", "value_column", "country_column", "commodity_column", "date_column", "date_format", "annual"}
_PATH_KEYS = {"table", "price_model", "warning_model", "metrics_dir", "sweep", "report", "qa_store"}
_PRICE_MODEL_KEYS = {"d_model", "heads", "blocks", "ffn_dim", "dropout", "l2"}
_WARNING_MODEL_KEYS = _PRICE_MODEL_KEYS | {"ffn_dims"}
_TRAINING_KEYS = {
    "batch_size", "price_epochs", "warning_epochs", "learning_rate", "class_weights", "calibrate_bn",
}
_SWEEP_KEYS = {"horizons", "repeats", "epochs"}
_CHAT_KEYS = {"backend", "url", "tau_filter", "tau_retrieve", "language", "max_tokens", "temperature", "llm_filter"}
_TOP_KEYS = {
    "seed", "data_dir", "m", "horizon", "train_frac", "sources", "labels", "paths",
    "price_model", "warning_model", "training", "sweep", "chat",
}

DEFAULT_PATHS = {
    "table": "out/table.csv",
    "price_model": "out/price.nnet.json",
    "warning_model": "out/warning.nnet.json",
    "metrics_dir": "out",
    "sweep": "out/sweep.csv",
    "report": "out/report.json",
    "qa_store": None,
}


def _check_keys(section: str, given: dict, allowed: set):
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(given).__name__}")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")


@dataclass
class RunConfig:
    base_dir: Path
    seed: int = 0
    data_dir: Path | None = None
    m: int = 3
    horizon: int = 1
    train_frac: float = 0.8
    sources: list[tuple[SourceSchema, Path]] = field(default_factory=list)
    labels: Path | None = None
    paths: dict[str, Path | None] = field(default_factory=dict)
    price_model: dict[str, Any] = field(default_factory=dict)
    warning_model: dict[str, Any] = field(default_factory=dict)
    training: dict[str, Any] = field(default_factory=dict)
    sweep: dict[str, Any] = field(default_factory=dict)
    chat: dict[str, Any] = field(default_factory=dict)

    @property
    def feature_names(self) -> list[str]:
        return [schema.source_name for schema, _ in self.sources]

    def path(self, name: str) -> Path | None:
        return self.paths.get(name)

    def price_model_config(self, n_features: int, horizon: int | None = None) -> PriceModelConfig:
        return PriceModelConfig(m=self.m, horizon=horizon or self.horizon, n_features=n_features, **self.price_model)

    def warning_model_config(self, n_features: int) -> WarningModelConfig:
        return WarningModelConfig(m=self.m, horizon=self.horizon, n_features=n_features, **self.warning_model)

    def train_config(self, kind: str, epochs: int | None = None, seed: int | None = None) -> TrainConfig:
        t = self.training
        default_epochs = PRICE_EPOCHS if kind == "price" else WARNING_EPOCHS
        return TrainConfig(
            batch_size=t.get("batch_size", 3),
            epochs=epochs if epochs is not None else t.get(f"{kind}_epochs", default_epochs),
            learning_rate=t.get("learning_rate", 1e-3),
            seed=self.seed if seed is None else seed,
            class_weights=t.get("class_weights", "none") if kind == "warning" else "none",
            calibrate_bn=t.get("calibrate_bn", True),
        )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw, path.resolve().parent)


def parse_config(raw: dict, base_dir: Path) -> RunConfig:
    _check_keys("config", raw, _TOP_KEYS)
    base_dir = Path(base_dir)

    def resolve(p):
        return None if p is None else (base_dir / p).resolve()

    data_dir = resolve(raw.get("data_dir", "."))
    sources = []
    for name, spec in (raw.get("sources") or {}).items():
        _check_keys(f"sources.{name}", spec, _SOURCE_KEYS)
        if "file" not in spec:
            raise ConfigError(f"sources.{name}: 'file' is required")
        opts = {k: v for k, v in spec.items() if k != "file"}
        opts.setdefault("value_column", "value")
        try:
            schema = SourceSchema(source_name=name, **opts)
        except Exception as exc:
            raise ConfigError(f"sources.{name}: {exc}") from None
        sources.append((schema, (data_dir / spec["file"]).resolve()))

    paths_raw = raw.get("paths") or {}
    _check_keys("paths", paths_raw, _PATH_KEYS)
    paths = {k: resolve(v) for k, v in {**DEFAULT_PATHS, **paths_raw}.items()}

    sections = {}
    for name, allowed in (
        ("price_model", _PRICE_MODEL_KEYS),
        ("warning_model", _WARNING_MODEL_KEYS),
        ("training", _TRAINING_KEYS),
        ("sweep", _SWEEP_KEYS),
        ("chat", _CHAT_KEYS),
    ):
        section = raw.get(name) or {}
        _check_keys(name, section, allowed)
        sections[name] = dict(section)
    if "ffn_dims" in sections["warning_model"]:
        sections["warning_model"]["ffn_dims"] = tuple(sections["warning_model"]["ffn_dims"])

    labels = raw.get("labels")
    cfg = RunConfig(
        base_dir=base_dir,
        seed=int(raw.get("seed", 0)),
        data_dir=data_dir,
        m=int(raw.get("m", 3)),
        horizon=int(raw.get("horizon", 1)),
        train_frac=float(raw.get("train_frac", 0.8)),
        sources=sources,
        labels=None if labels is None else (data_dir / labels).resolve(),
        paths=paths,
        **sections,
    )
    try:
        cfg.price_model_config(max(len(sources), 3))
        cfg.warning_model_config(max(len(sources), 3))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model settings: {exc}") from None
    return cfg
