"""Reduced dense-block CNN with cell-type fusion and two classifier heads.

Layout (defaults, 6 x 64 x 64 input)::

    stem      7x7 conv stride 2 -> 3x3 maxpool stride 2
    block b   [ReLU -> 1x1 conv -> ReLU -> 3x3 conv] x block_layers[b], concatenated
    trans b   ReLU -> 1x1 conv (halve channels) -> 2x2 avgpool stride 2
    head      ReLU -> adaptive avgpool -> concat(cell one-hot) -> fully connected

Images are standardised per channel with fixed constants stored in the
config (``input_mean``/``input_std``, typically train-split statistics;
empty means no standardisation).  The embedding feeds a softmax head (``W_soft x``) and a cosine head
(normalised ``W_arc`` against the normalised embedding).  Neither head has a
bias term.
"""

from __future__ import annotations

import dataclasses
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ShapeError, Tensor, ops

CHECKPOINT_MAGIC = b"PLAB1"
COSINE_CLAMP = 1.0 - 1e-9
BOTTLENECK_FACTOR = 4
COMPRESSION = 0.5
_FLOAT_LIST_FIELDS = ("input_mean", "input_std")


class ConfigError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 10
    in_channels: int = 6
    input_size: int = 64
    growth_rate: int = 8
    block_layers: list[int] = field(default_factory=lambda: [2, 2, 2])
    embedding_dim: int = 32
    num_cell_types: int = 4
    seed: int = 0
    input_mean: list[float] = field(default_factory=list)
    input_std: list[float] = field(default_factory=list)

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if not self.block_layers or any(n < 1 for n in self.block_layers):
            raise ConfigError("block_layers must be a non-empty list of positive ints")
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_cell_types != 4:
            raise ConfigError("num_cell_types must be 4 (HUVEC, RPE, HepG2, U2OS)")
        if self.growth_rate < 1:
            raise ConfigError("growth_rate must be >= 1")
        # each transition halves the map; the stem divides by 4
        min_size = 4 * 2 ** (len(self.block_layers) - 1)
        if self.input_size < min_size:
            raise ConfigError(f"input_size must be >= {min_size} for {len(self.block_layers)} blocks")
        if len(self.input_mean) != len(self.input_std) or len(self.input_mean) not in (0, self.in_channels):
            raise ConfigError(f"input_mean/input_std need 0 or {self.in_channels} entries each")
        if any(not v > 0 for v in self.input_std):
            raise ConfigError("input_std entries must be > 0")

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out.append((f.name, ",".join(map(repr, v)) if isinstance(v, list) else str(v)))
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> ModelConfig:
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name in _FLOAT_LIST_FIELDS:
                kw[f.name] = [float(v) for v in raw.split(",") if v]
            elif f.name == "block_layers":
                kw[f.name] = [int(v) for v in raw.split(",") if v]
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


def _conv_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration order."""
    k = config.growth_rate
    stem = 2 * k
    specs: list[tuple[str, tuple[int, ...]]] = [("stem.conv", (stem, config.in_channels, 7, 7))]
    ch = stem
    for b, n_layers in enumerate(config.block_layers, start=1):
        for l in range(1, n_layers + 1):
            specs.append((f"block{b}.layer{l}.conv1", (BOTTLENECK_FACTOR * k, ch, 1, 1)))
            specs.append((f"block{b}.layer{l}.conv2", (k, BOTTLENECK_FACTOR * k, 3, 3)))
            ch += k
        if b < len(config.block_layers):
            out = max(1, int(ch * COMPRESSION))
            specs.append((f"transition{b}.conv", (out, ch, 1, 1)))
            ch = out
    specs.append(("fusion.weight", (config.embedding_dim, ch + config.num_cell_types)))
    specs.append(("fusion.bias", (config.embedding_dim,)))
    specs.append(("head.soft", (config.num_classes, config.embedding_dim)))
    specs.append(("head.arc", (config.num_classes, config.embedding_dim)))
    return specs


def feature_dim(config: ModelConfig) -> int:
    """Channel count of the final dense block (the pooled feature length)."""
    return dict(_conv_spec(config))["fusion.weight"][1] - config.num_cell_types


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in _conv_spec(config))


def layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample output shape of every named stage, for a config alone."""
    k = config.growth_rate
    size = config.input_size
    size = (size + 6 - 7) // 2 + 1
    ch = 2 * k
    trace = [("stem.conv", (ch, size, size))]
    size = (size + 2 - 3) // 2 + 1
    trace.append(("stem", (ch, size, size)))
    for b, n_layers in enumerate(config.block_layers, start=1):
        for l in range(1, n_layers + 1):
            trace.append((f"block{b}.layer{l}", (k, size, size)))
            ch += k
        trace.append((f"block{b}", (ch, size, size)))
        if b < len(config.block_layers):
            ch = max(1, int(ch * COMPRESSION))
            size //= 2
            trace.append((f"transition{b}", (ch, size, size)))
    trace.append(("features", (ch,)))
    trace.append(("combined", (ch + config.num_cell_types,)))
    trace.append(("embedding", (config.embedding_dim,)))
    return trace


Hook = Callable[[Tensor], Tensor]


class Model:
    """Parameters plus the forward computation; see module docstring for layout."""

    def __init__(self, config: ModelConfig, params: OrderedDict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def conv_layer_names(self, kernel: int | None = None) -> list[str]:
        names = [n for n, p in self.params.items() if p.ndim == 4]
        if kernel is not None:
            names = [n for n in names if self.params[n].shape[2:] == (kernel, kernel)]
        return names

    def forward_embedding(
        self,
        images,
        cell_onehots,
        hooks: dict[str, Hook] | None = None,
        capture: dict[str, Tensor] | None = None,
    ) -> Tensor:
        """Embed a batch of images.

        ``hooks`` may replace the output of any named stage (see
        :func:`layer_shapes`); ``capture`` receives every stage output.
        """
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"forward_embedding: expected N x {cfg.in_channels} x {cfg.input_size} x {cfg.input_size},"
                f" got {x.shape}"
            )
        onehot = _check_onehots(cell_onehots, x.shape[0], cfg.num_cell_types)
        if cfg.input_mean:
            # fixed preprocessing: pixels are constants, never differentiated
            mean = np.asarray(cfg.input_mean)[None, :, None, None]
            std = np.asarray(cfg.input_std)[None, :, None, None]
            x = Tensor((x.data - mean) / std)

        def tap(name: str, t: Tensor) -> Tensor:
            if hooks and name in hooks:
                t = hooks[name](t)
            if capture is not None:
                capture[name] = t
            return t

        p = self.params
        h = tap("stem.conv", ops.conv2d(x, p["stem.conv"], stride=2, padding=3))
        h = tap("stem", ops.maxpool2d(h, 3, stride=2, padding=1))
        for b, n_layers in enumerate(cfg.block_layers, start=1):
            feats = [h]
            for l in range(1, n_layers + 1):
                inp = feats[0] if len(feats) == 1 else ops.concat(feats, axis=1)
                y = ops.conv2d(ops.relu(inp), p[f"block{b}.layer{l}.conv1"])
                y = ops.conv2d(ops.relu(y), p[f"block{b}.layer{l}.conv2"], padding=1)
                feats.append(tap(f"block{b}.layer{l}", y))
            h = tap(f"block{b}", ops.concat(feats, axis=1))
            if b < len(cfg.block_layers):
                t = ops.conv2d(ops.relu(h), p[f"transition{b}.conv"])
                h = tap(f"transition{b}", ops.avgpool2d(t, 2, stride=2))
        pooled = ops.adaptive_avgpool(ops.relu(h), 1)
        feat = tap("features", ops.reshape(pooled, pooled.shape[:2]))
        combined = tap("combined", ops.concat([feat, Tensor(onehot)], axis=1))
        n = combined.shape[0]
        emb = ops.matmul(combined, ops.transpose(p["fusion.weight"]))
        bias = ops.reshape(ops.concat([p["fusion.bias"]] * n, axis=0), (n, cfg.embedding_dim))
        return tap("embedding", ops.add(emb, bias))

    def logits(self, embeddings: Tensor) -> tuple[Tensor, Tensor]:
        """Return (softmax logits, clamped cosines), both N x num_classes."""
        emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        if emb.ndim == 1:
            emb = ops.reshape(emb, (1, emb.shape[0]))
        norms = np.linalg.norm(emb.data, axis=1)
        if np.any(norms <= 1e-12):
            raise DegenerateEmbeddingError("embedding with zero norm has no direction")
        soft = ops.matmul(emb, ops.transpose(self.params["head.soft"]))
        w_hat = ops.l2norm(self.params["head.arc"], 1.0)
        x_hat = ops.l2norm(emb, 1.0)
        cosines = ops.clamp(ops.matmul(x_hat, ops.transpose(w_hat)), -COSINE_CLAMP, COSINE_CLAMP)
        return soft, cosines

    def predict_proba(self, images, cell_onehots) -> np.ndarray:
        soft, _ = self.logits(self.forward_embedding(images, cell_onehots))
        z = soft.data - soft.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def state_bytes(self) -> bytes:
        return b"".join(p.data.astype("<f8").tobytes() for p in self.params.values())

    def copy(self) -> Model:
        params = OrderedDict(
            (n, Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)) for n, p in self.params.items()
        )
        cfg = self.config
        return Model(dataclasses.replace(cfg, block_layers=list(cfg.block_layers), input_mean=list(cfg.input_mean),
                                         input_std=list(cfg.input_std)), params)


def _check_onehots(cell_onehots, n: int, k: int) -> np.ndarray:
    arr = np.asarray(cell_onehots.data if isinstance(cell_onehots, Tensor) else cell_onehots, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.shape != (n, k):
        raise ShapeError(f"cell one-hots must be {n} x {k}, got {arr.shape}")
    ok = np.all((arr == 0) | (arr == 1), axis=1) & (arr.sum(axis=1) == 1)
    if not np.all(ok):
        raise ValueError(f"malformed cell-type one-hot in rows {np.flatnonzero(~ok).tolist()}")
    return arr


def build_model(config: ModelConfig) -> Model:
    """Seeded uniform initialisation.

    Conv kernels draw from +-sqrt(6/fan_in), which keeps activation variance
    roughly constant through ReLU layers; fully connected weights draw from
    +-1/sqrt(fan_in); the fusion bias starts at zero.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in _conv_spec(config):
        if name == "fusion.bias":
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in) if len(shape) == 4 else 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(config, params)


def forward_embedding(model: Model, images, cell_onehots) -> Tensor:
    return model.forward_embedding(images, cell_onehots)


def logits(model: Model, embeddings) -> tuple[Tensor, Tensor]:
    return model.logits(embeddings)


# ---------------------------------------------------------------------------
# checkpoint: magic line, key=value config lines, blank line, little-endian f8 weights


def save_checkpoint(model: Model, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    for k, v in model.config.to_items():
        buf.write(f"{k}={v}\n".encode())
    buf.write(b"\n")
    buf.write(model.state_bytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    head_end = raw.find(b"\n\n", len(CHECKPOINT_MAGIC))
    if head_end < 0:
        raise ValueError(f"{path}: unterminated config block")
    lines = raw[len(CHECKPOINT_MAGIC) + 1:head_end].decode().splitlines()
    items = dict(line.split("=", 1) for line in lines if line)
    config = ModelConfig.from_items(items)
    config.validate()
    body = raw[head_end + 2:]
    expected = parameter_count(config) * 8
    if len(body) != expected:
        raise ValueError(f"{path}: weight block has {len(body)} bytes, expected {expected}")
    params: OrderedDict[str, Tensor] = OrderedDict()
    offset = 0
    for name, shape in _conv_spec(config):
        count = int(np.prod(shape))
        data = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
        offset += count * 8
    return Model(config, params)
