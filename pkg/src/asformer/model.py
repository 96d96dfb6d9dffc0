"""Encoder/decoder network with hierarchical windowed attention."""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np

from . import tensor as tn
from .tensor import Tensor

WINDOW_BASE = 2
KERNEL_SIZE = 3
NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"ASFM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture and optimisation hyperparameters."""

    num_classes: int
    feature_dim: int = 2048
    num_blocks: int = 9
    num_decoders: int = 3
    model_dim: int = 64
    input_dropout: float = 0.3
    alpha_decay: float = 0.5
    smooth_weight: float = 0.25
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 120

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 1 or self.num_blocks > 62:
            raise tn.ConfigError(f"num_blocks must be in [1, 62], got {self.num_blocks}")
        if self.num_decoders < 0:
            raise tn.ConfigError(f"num_decoders must be >= 0, got {self.num_decoders}")
        for name in ("feature_dim", "model_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise tn.ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.input_dropout < 1.0:
            raise tn.ConfigError(f"input_dropout must lie in [0, 1), got {self.input_dropout}")
        if not 0.0 < self.alpha_decay <= 1.0:
            raise tn.ConfigError(f"alpha_decay must lie in (0, 1], got {self.alpha_decay}")
        if self.smooth_weight < 0:
            raise tn.ConfigError(f"smooth_weight must be >= 0, got {self.smooth_weight}")
        if self.epochs < 0:
            raise tn.ConfigError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise tn.ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)


def window_schedule(i: int, num_blocks: int | None = None) -> int:
    """Attention window (and conv dilation) of block ``i``, counted from 1."""
    if i < 1 or (num_blocks is not None and i > num_blocks):
        raise IndexError(f"block index {i} outside [1, {num_blocks}]")
    return WINDOW_BASE**i


def alpha_schedule(k: int, num_decoders: int | None = None, alpha_decay: float = 0.5) -> float:
    """Cross-attention weight of decoder ``k``, counted from 1."""
    if k < 1 or (num_decoders is not None and k > num_decoders):
        raise IndexError(f"decoder index {k} outside [1, {num_decoders}]")
    return alpha_decay ** (k - 1)


class AttentionProbe(Protocol):
    def __call__(self, stage: str, block: int, weights: np.ndarray, mask: np.ndarray) -> None: ...


class ScoreCounter:
    """Counts materialized (in-window) attention scores per stage and block."""

    def __init__(self):
        self.counts: dict[tuple[str, int], int] = {}

    def __call__(self, stage, block, weights, mask):
        self.counts[(stage, block)] = self.counts.get((stage, block), 0) + int(mask.sum())

    def stage_total(self, stage: str) -> int:
        return sum(c for (s, _), c in self.counts.items() if s == stage)


# ---------------------------------------------------------------- modules


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for idx, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{idx}.")


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, d_in, (d_in, d_out))
        self.bias = _uniform(rng, d_in, (1, d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tn.affine_projection(x, self.weight, self.bias)


def windowed_attention(
    q: Tensor, k: Tensor, v: Tensor, window: int, probe=None, stage: str = "", block: int = 0
) -> Tensor:
    """Scaled dot-product attention restricted to ``|j - t| <= window / 2``."""
    n, d = q.shape
    half = min(window // 2, n - 1)
    mask = tn.band_mask(n, half)
    scores = tn.band_scores(q, k, half, scale_by=1.0 / math.sqrt(d))
    weights = tn.masked_softmax(scores, mask)
    if probe is not None:
        probe(stage, block, weights.data, mask)
    return tn.band_combine(weights, v, half)


class SelfAttention(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.query = Linear(dim, dim, rng)
        # a key bias shifts every score in a row equally, so it is omitted
        self.key = Linear(dim, dim, rng, bias=False)
        self.value = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, window: int, probe=None, stage="", block=0) -> Tensor:
        return windowed_attention(
            self.query(x), self.key(x), self.value(x), window, probe, stage, block
        )


class CrossAttention(Module):
    """Query and key read ``[external | x]``; value reads ``x`` only."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.query = Linear(2 * dim, dim, rng)
        self.key = Linear(2 * dim, dim, rng, bias=False)
        self.value = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, external: Tensor, window: int, probe=None, stage="", block=0):
        if x.shape != external.shape:
            raise tn.ShapeError(
                f"cross attention: stream {x.shape} and external {external.shape} differ"
            )
        both = tn.concat_cols(external, x)
        return windowed_attention(
            self.query(both), self.key(both), self.value(x), window, probe, stage, block
        )


class FeedForward(Module):
    """Dilated temporal convolution, instance norm, ReLU."""

    def __init__(self, dim: int, dilation: int, rng: np.random.Generator):
        self.dilation = dilation
        self.kernel = _uniform(rng, KERNEL_SIZE * dim, (KERNEL_SIZE * dim, dim))

    def __call__(self, x: Tensor) -> Tensor:
        h = tn.dilated_conv1d(x, self.kernel, self.dilation, KERNEL_SIZE)
        return tn.relu(tn.instance_norm(h, NORM_EPS))


class EncoderBlock(Module):
    def __init__(self, index: int, dim: int, rng: np.random.Generator):
        self.index = index
        self.window = window_schedule(index)
        self.feed_forward = FeedForward(dim, self.window, rng)
        self.attention = SelfAttention(dim, rng)
        self.mix = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, probe=None, stage="encoder") -> Tensor:
        f = self.feed_forward(x)
        a = self.attention(f, self.window, probe, stage, self.index)
        return tn.add(x, self.mix(tn.add(a, f)))


class DecoderBlock(Module):
    def __init__(self, index: int, dim: int, rng: np.random.Generator):
        self.index = index
        self.window = window_schedule(index)
        self.feed_forward = FeedForward(dim, self.window, rng)
        self.attention = CrossAttention(dim, rng)
        self.mix = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, external: Tensor, alpha: float, probe=None, stage="") -> Tensor:
        f = self.feed_forward(x)
        a = self.attention(f, external, self.window, probe, stage, self.index)
        return tn.add(x, self.mix(tn.add(tn.scale(a, alpha), f)))

    def without_attention(self, x: Tensor) -> Tensor:
        """The block with its cross-attention sublayer removed."""
        return tn.add(x, self.mix(self.feed_forward(x)))


class Encoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.dropout = config.input_dropout
        self.feature_dim = config.feature_dim
        self.inp = Linear(config.feature_dim, config.model_dim, rng)
        self.blocks = [EncoderBlock(i, config.model_dim, rng) for i in range(1, config.num_blocks + 1)]
        self.out = Linear(config.model_dim, config.num_classes, rng)

    def __call__(self, features: Tensor, training: bool, rng: np.random.Generator | None, probe=None):
        if features.shape[0] == 0:
            raise ValueError("encoder input has no frames")
        if features.shape[1] != self.feature_dim:
            raise tn.ShapeError(
                f"encoder expects {self.feature_dim}-d features, got {features.shape[1]}-d"
            )
        x = tn.channel_dropout(features, self.dropout, training, rng)
        h = self.inp(x)
        for block in self.blocks:
            h = block(h, probe, "encoder")
        return self.out(h), h


class Decoder(Module):
    def __init__(self, name: str, config: ModelConfig, rng: np.random.Generator):
        self.name = name
        self.inp = Linear(config.num_classes, config.model_dim, rng)
        self.blocks = [DecoderBlock(i, config.model_dim, rng) for i in range(1, config.num_blocks + 1)]
        self.out = Linear(config.model_dim, config.num_classes, rng)

    def __call__(self, probs: Tensor, external: Tensor, alpha: float, probe=None):
        row_sums = probs.data.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-4):
            bad = int(np.argmax(np.abs(row_sums - 1.0)))
            raise ValueError(f"decoder input row {bad} sums to {row_sums[bad]:.6f}, not 1")
        h = self.inp(probs)
        for block in self.blocks:
            h = block(h, external, alpha, probe, self.name)
        return self.out(h), h


@dataclass
class StagePredictions:
    """Per-stage logits; stage 0 is the encoder."""

    names: list[str]
    logits: list[Tensor]

    def __len__(self) -> int:
        return len(self.logits)

    def final(self) -> Tensor:
        return self.logits[-1]

    def probabilities(self, stage: int = -1) -> np.ndarray:
        z = self.logits[stage].data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def labels(self, stage: int = -1) -> np.ndarray:
        return np.argmax(self.logits[stage].data, axis=1)


class ASFormer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        self.encoder = Encoder(config, rng)
        self.decoders = [Decoder(f"decoder{k}", config, rng) for k in range(1, config.num_decoders + 1)]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def forward(
        self,
        features: Tensor | np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        probe: AttentionProbe | None = None,
    ) -> StagePredictions:
        if not isinstance(features, Tensor):
            features = Tensor(features)
        if training and rng is None:
            raise ValueError("training-mode forward needs a random generator")
        logits, feature = self.encoder(features, training, rng, probe)
        names, outputs = ["encoder"], [logits]
        for k, decoder in enumerate(self.decoders, start=1):
            alpha = alpha_schedule(k, self.config.num_decoders, self.config.alpha_decay)
            logits, feature = decoder(tn.softmax(logits), feature, alpha, probe)
            names.append(decoder.name)
            outputs.append(logits)
        return StagePredictions(names, outputs)

    __call__ = forward

    def predict(self, features: np.ndarray, all_stages: bool = False):
        with tn.no_grad():
            stages = self.forward(Tensor(features), training=False)
        if all_stages:
            return [stages.labels(i) for i in range(len(stages))]
        return stages.labels()

    # ------------------------------------------------------------ checkpoint

    def save(self, path: str | Path) -> None:
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
        for name, p in self.named_parameters():
            raw = name.encode("utf-8")
            rows, cols = p.shape
            chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", rows, cols))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path: str | Path) -> "ASFormer":
        buf = Path(path).read_bytes()
        if buf[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
        if len(buf) < 12:
            raise CheckpointError(f"{path}: truncated header")
        version, cfg_len = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12 + cfg_len
        config = ModelConfig.from_dict(json.loads(buf[12:pos].decode("utf-8")))
        model = cls(config, 0)
        params = model.parameters()
        seen = set()
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            rows, cols = struct.unpack_from("<II", buf, pos + 4 + n)
            pos += 12 + n
            end = pos + 4 * rows * cols
            if end > len(buf):
                raise CheckpointError(f"{path}: tensor {name!r} truncated at byte {pos}")
            if name not in params or params[name].shape != (rows, cols):
                raise CheckpointError(f"{path}: unexpected tensor {name!r} ({rows}x{cols})")
            values = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos)
            params[name].data = values.reshape(rows, cols).astype(tn.DEFAULT_DTYPE)
            seen.add(name)
            pos = end
        missing = set(params) - seen
        if missing:
            raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
        return model
