"""The price and warning encoder-only transformers, inference and model files.

Both models treat each scalar of a flat window as one token: a shared dense
embedding lifts it to ``d_model``, sinusoidal positions are added, and the
result runs through post-norm encoder blocks before global average pooling.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import BadVersion, CorruptPayload, KindMismatch, RecipeMissing, ShapeMismatch
from .ingest import WarningLabel
from .numerics import BatchNormState, ParameterSet, Tensor
from .preprocess import CleaningRecipe, FlatWindow, flat_length, invert_price

FORMAT_VERSION = 1
FILE_SUFFIX = ".nnet.json"


@dataclass(frozen=True)
class PriceModelConfig:
    d_model: int = 32
    heads: int = 4
    blocks: int = 2
    ffn_dim: int = 64
    dropout: float = 0.4
    l2: float = 0.003
    m: int = 3
    horizon: int = 1
    n_features: int = 7

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.m < 1 or self.horizon < 1 or self.blocks < 1:
            raise ValueError("m, horizon and blocks must be >= 1")

    @property
    def input_length(self) -> int:
        return flat_length(self.n_features, self.m)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class WarningModelConfig(PriceModelConfig):
    blocks: int = 1
    ffn_dims: tuple[int, ...] = (64, 32, 16)
    skip_connection: bool = True
    classes: int = 3

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "ffn_dims", tuple(self.ffn_dims))
        if not self.ffn_dims or any(a <= b for a, b in zip(self.ffn_dims, self.ffn_dims[1:])):
            raise ValueError(f"ffn_dims must be strictly decreasing, got {self.ffn_dims}")
        if self.classes != 3:
            raise ValueError("the warning model has exactly 3 classes")
        if not self.skip_connection:
            raise ValueError("the skip connection is always on")

    @property
    def input_length(self) -> int:
        return flat_length(self.n_features, self.m) + self.horizon


# ---------------------------------------------------------------------------
# parameters


def _dense_params(ps: ParameterSet, name: str, rng, fan_in: int, fan_out: int, zero: bool = False):
    ps[f"{name}.W"] = np.zeros((fan_in, fan_out)) if zero else nx.glorot(rng, fan_in, fan_out)
    ps[f"{name}.b"] = np.zeros(fan_out)


def _attention_params(ps: ParameterSet, name: str, rng, d: int):
    for p in "qkvo":
        ps[f"{name}.W{p}"] = nx.glorot(rng, d, d)
        ps[f"{name}.b{p}"] = np.zeros(d)


def _norm_params(ps: ParameterSet, name: str, d: int):
    ps[f"{name}.gamma"] = np.ones(d)
    ps[f"{name}.beta"] = np.zeros(d)


def init_price_params(cfg: PriceModelConfig, rng: np.random.Generator) -> tuple[ParameterSet, dict]:
    ps = ParameterSet()
    d = cfg.d_model
    _dense_params(ps, "embed", rng, 1, d)
    bn = {}
    for i in range(cfg.blocks):
        b = f"block{i}"
        _attention_params(ps, f"{b}.attn", rng, d)
        _norm_params(ps, f"{b}.ln", d)
        _dense_params(ps, f"{b}.ffn0", rng, d, cfg.ffn_dim)
        _dense_params(ps, f"{b}.ffn1", rng, cfg.ffn_dim, d)
        _norm_params(ps, f"{b}.bn", d)
        bn[f"{b}.bn"] = BatchNormState.fresh(d)
    _dense_params(ps, "head", rng, d, 1)
    return ps, bn


def init_warning_params(cfg: WarningModelConfig, rng: np.random.Generator) -> tuple[ParameterSet, dict]:
    ps = ParameterSet()
    d = cfg.d_model
    _dense_params(ps, "embed", rng, 1, d)
    bn = {}
    for i in range(cfg.blocks):
        b = f"block{i}"
        _attention_params(ps, f"{b}.attn", rng, d)
        _norm_params(ps, f"{b}.ln", d)
        widths = (d, *cfg.ffn_dims)
        for j, (a, c) in enumerate(zip(widths, widths[1:])):
            _dense_params(ps, f"{b}.ffn{j}", rng, a, c)
        _norm_params(ps, f"{b}.bn", cfg.ffn_dims[-1])
        bn[f"{b}.bn"] = BatchNormState.fresh(cfg.ffn_dims[-1])
        _dense_params(ps, f"{b}.reshape", rng, cfg.ffn_dims[-1], d)
    _dense_params(ps, "head", rng, d, cfg.classes)
    return ps, bn


def l2_targets(kind: str, params: ParameterSet) -> list[str]:
    """Weight matrices that carry the L2 penalty.

    Every kernel for the price model; only feed-forward kernels (including the
    reshape dense) for the warning model.
    """
    names = [n for n in params if n.endswith(".W") or n.split(".")[-1] in ("Wq", "Wk", "Wv", "Wo")]
    if kind == "warning":
        names = [n for n in names if ".ffn" in n or ".reshape" in n]
    return names


# ---------------------------------------------------------------------------
# forward passes


def _embed(params: ParameterSet, x: np.ndarray, d: int) -> Tensor:
    bsz, length = x.shape
    tokens = Tensor(x.reshape(bsz, length, 1))
    h = nx.dense(tokens, params["embed.W"], params["embed.b"])
    return nx.add(h, nx.positional_encoding(length, d))


def _attention_sublayer(cfg, params, h, block, train, rng):
    a = nx.multi_head_attention(h, params.scope(f"{block}.attn"), cfg.heads)
    a = nx.dropout(a, cfg.dropout, rng, train)
    return nx.layer_norm(nx.add(h, a), params[f"{block}.ln.gamma"], params[f"{block}.ln.beta"])


def _check_input(x, length: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != length:
        raise ShapeMismatch(f"expected [batch, {length}] input, got {x.shape}")
    return x


def price_forward(
    cfg: PriceModelConfig,
    params: ParameterSet,
    x,
    bn_state: dict,
    train: bool = False,
    rng: np.random.Generator | None = None,
    bn_momentum: float = nx.BN_MOMENTUM,
) -> Tensor:
    """``[batch, L]`` flat windows to ``[batch, 1]`` cleaned-price predictions."""
    x = _check_input(x, cfg.input_length)
    h = _embed(params, x, cfg.d_model)
    for i in range(cfg.blocks):
        b = f"block{i}"
        h = _attention_sublayer(cfg, params, h, b, train, rng)
        f = nx.relu(nx.dense(h, params[f"{b}.ffn0.W"], params[f"{b}.ffn0.b"]))
        f = nx.dense(f, params[f"{b}.ffn1.W"], params[f"{b}.ffn1.b"])
        f = nx.batch_norm(f, params[f"{b}.bn.gamma"], params[f"{b}.bn.beta"], bn_state[f"{b}.bn"], train, bn_momentum)
        f = nx.dropout(f, cfg.dropout, rng, train)
        h = nx.add(h, f)
    pooled = nx.global_average_pool(h)
    return nx.dense(pooled, params["head.W"], params["head.b"])


def warning_forward(
    cfg: WarningModelConfig,
    params: ParameterSet,
    x,
    bn_state: dict,
    train: bool = False,
    rng: np.random.Generator | None = None,
    skip: bool = True,
    bn_momentum: float = nx.BN_MOMENTUM,
) -> Tensor:
    """``[batch, L + h]`` (window ++ predicted prices) to ``[batch, 3]`` logits.

    ``skip=False`` removes the embedded-input skip path; it exists only so the
    skip connection's effect can be measured.
    """
    x = _check_input(x, cfg.input_length)
    h = _embed(params, x, cfg.d_model)
    for i in range(cfg.blocks):
        b = f"block{i}"
        trunk_in = h
        h = _attention_sublayer(cfg, params, h, b, train, rng)
        f = h
        for j in range(len(cfg.ffn_dims)):
            f = nx.relu(nx.dense(f, params[f"{b}.ffn{j}.W"], params[f"{b}.ffn{j}.b"]))
        f = nx.batch_norm(f, params[f"{b}.bn.gamma"], params[f"{b}.bn.beta"], bn_state[f"{b}.bn"], train, bn_momentum)
        f = nx.dropout(f, cfg.dropout, rng, train)
        f = nx.dense(f, params[f"{b}.reshape.W"], params[f"{b}.reshape.b"])
        h = nx.add(f, trunk_in) if skip else f
    pooled = nx.global_average_pool(h)
    return nx.dense(pooled, params["head.W"], params["head.b"])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# trained models


@dataclass
class TrainedModel:
    kind: str  # "price" | "warning"
    config: PriceModelConfig
    params: ParameterSet
    bn_state: dict
    recipe: CleaningRecipe | None = None
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def forward(self, x, train: bool = False, rng=None) -> Tensor:
        if self.kind == "price":
            return price_forward(self.config, self.params, x, self.bn_state, train, rng)
        return warning_forward(self.config, self.params, x, self.bn_state, train, rng)

    def predict_batch(self, x) -> np.ndarray:
        return self.forward(x).data

    def calibrate_batch_norm(self, x):
        """Replace running statistics with exact statistics over ``x`` (no dropout)."""
        saved = {k: (s.mean.copy(), s.var.copy()) for k, s in self.bn_state.items()}
        try:
            cfg = self.config.replace(dropout=0.0)
            fwd = price_forward if self.kind == "price" else warning_forward
            fwd(cfg, self.params, x, self.bn_state, train=True, bn_momentum=0.0)
        except Exception:
            for k, (m, v) in saved.items():
                self.bn_state[k] = BatchNormState(m, v)
            raise


def new_model(kind: str, config: PriceModelConfig, seed: int, recipe: CleaningRecipe | None = None) -> TrainedModel:
    rng = nx.make_rng(seed)
    if kind == "price":
        params, bn = init_price_params(config, rng)
    elif kind == "warning":
        params, bn = init_warning_params(config, rng)
    else:
        raise KindMismatch(f"unknown model kind {kind!r}")
    return TrainedModel(kind, config, params, bn, recipe)


def _require(model: TrainedModel, kind: str):
    if model.kind != kind:
        raise KindMismatch(f"expected a {kind} model, got {model.kind}")


def predict_price(model: TrainedModel, window: FlatWindow) -> tuple[float, float]:
    """Cleaned prediction for ``window.key + horizon`` and its raw-currency value."""
    _require(model, "price")
    if model.recipe is None:
        raise RecipeMissing("price model carries no cleaning recipe")
    cleaned = float(model.predict_batch(window.features[None, :])[0, 0])
    target_key = window.key.shift(model.config.horizon)
    return cleaned, invert_price(model.recipe, target_key, cleaned)


def warning_input(window: FlatWindow, predicted_prices: Sequence[float]) -> np.ndarray:
    return np.concatenate([window.features, np.asarray(predicted_prices, dtype=np.float64)])


def predict_warning(model: TrainedModel, window: FlatWindow, predicted_prices: Sequence[float]):
    _require(model, "warning")
    if len(predicted_prices) != model.config.horizon:
        raise ShapeMismatch(f"need {model.config.horizon} predicted prices, got {len(predicted_prices)}")
    logits = model.predict_batch(warning_input(window, predicted_prices)[None, :])
    probs = softmax(logits)[0]
    return WarningLabel(int(np.argmax(probs))), probs


# ---------------------------------------------------------------------------
# model files


def _encode(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(d["shape"])


def _canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def model_to_dict(model: TrainedModel) -> dict:
    cfg = dataclasses.asdict(model.config)
    body = {
        "format_version": model.format_version,
        "kind": model.kind,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "recipe": None if model.recipe is None else model.recipe.to_dict(),
        "parameters": {name: _encode(t.data) for name, t in model.params.items()},
        "bn_state": {name: {"mean": _encode(s.mean), "var": _encode(s.var)} for name, s in model.bn_state.items()},
        "meta": model.meta,
    }
    body["checksum"] = f"{zlib.crc32(_canonical(body)):08x}"
    return body


def save_model(model: TrainedModel, path: str | Path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> TrainedModel:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptPayload(f"{path}: unreadable model file ({exc})") from None
    if not isinstance(body, dict):
        raise CorruptPayload(f"{path}: not a model document")
    version = body.get("format_version")
    if version != FORMAT_VERSION:
        raise BadVersion(f"{path}: format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    checksum = body.pop("checksum", None)
    if checksum != f"{zlib.crc32(_canonical(body)):08x}":
        raise CorruptPayload(f"{path}: checksum mismatch")
    try:
        kind = body["kind"]
        cls = PriceModelConfig if kind == "price" else WarningModelConfig
        config = cls(**body["config"])
        params = ParameterSet({k: _decode(v) for k, v in body["parameters"].items()})
        bn = {k: BatchNormState(_decode(v["mean"]), _decode(v["var"])) for k, v in body["bn_state"].items()}
        recipe = None if body["recipe"] is None else CleaningRecipe.from_dict(body["recipe"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptPayload(f"{path}: malformed model payload ({exc})") from None
    return TrainedModel(kind, config, params, bn, recipe, version, body.get("meta", {}))
