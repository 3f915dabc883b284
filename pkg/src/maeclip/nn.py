"""Transformer building blocks shared by the encoders and the decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

INIT_STD = 0.02
NEG_INF = -1e9


class ConfigError(ValueError):
    """Invalid architecture or run configuration."""


@dataclass
class TransformerConfig:
    depth: int
    width: int
    heads: int
    mlp_ratio: int = 4
    vocab_size: int = 0
    max_seq: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by {self.heads} heads")


class Module:
    """Container whose parameters are discovered from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ad.DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = INIT_STD, dtype=np.float64):
        self.weight = _normal(rng, (d_in, d_out), std, dtype)
        self.bias = Parameter(np.zeros(d_out), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, dtype=np.float64, eps: float = ad.LAYERNORM_EPS):
        self.gain = Parameter(np.ones(width), dtype=dtype)
        self.bias = Parameter(np.zeros(width), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gain, self.bias, self.eps)


def key_bias(valid: Optional[np.ndarray], dtype=np.float64) -> Optional[np.ndarray]:
    """Turn a ``[B, T]`` validity mask into an additive attention bias ``[B, 1, 1, T]``."""
    if valid is None:
        return None
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, S, D = x.shape
    return ad.transpose(ad.reshape(x, (B, S, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, S, Dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, S, H * Dh))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ad.DimensionError(f"expected [S, D] or [B, S, D], got {x.shape}")
    return x, False


class MultiHeadAttention(Module):
    """Bidirectional scaled dot-product attention with per-head projections."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, depth: int = 1,
                 dtype=np.float64):
        if width % heads:
            raise ConfigError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(width, width, rng, dtype=dtype)
        # no key bias: it shifts every score of a query equally, which softmax ignores
        self.k = Linear(width, width, rng, bias=False, dtype=dtype)
        self.v = Linear(width, width, rng, dtype=dtype)
        self.out = Linear(width, width, rng, std=INIT_STD / math.sqrt(2 * depth), dtype=dtype)

    def __call__(self, x: Tensor, kv: Optional[Tensor] = None,
                 key_valid: Optional[np.ndarray] = None) -> Tensor:
        x, squeeze = _batched(x)
        kv = x if kv is None else _batched(kv)[0]
        dh = x.shape[-1] // self.heads
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(kv), self.heads)
        v = _split_heads(self.v(kv), self.heads)
        scores = ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
        bias = key_bias(key_valid, x.dtype)
        if bias is not None:
            scores = scores + Tensor(bias)
        y = self.out(_merge_heads(ad.softmax(scores, axis=-1) @ v))
        return ad.reshape(y, y.shape[1:]) if squeeze else y


class MLP(Module):
    def __init__(self, width: int, ratio: int, rng: np.random.Generator, depth: int = 1,
                 dtype=np.float64):
        self.fc1 = Linear(width, width * ratio, rng, dtype=dtype)
        self.fc2 = Linear(width * ratio, width, rng, std=INIT_STD / math.sqrt(2 * depth), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-layernorm residual block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator,
                 depth: int = 1, dtype=np.float64):
        self.ln1 = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, heads, rng, depth, dtype)
        self.ln2 = LayerNorm(width, dtype)
        self.mlp = MLP(width, mlp_ratio, rng, depth, dtype)

    def __call__(self, x: Tensor, key_valid: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.ln1(x), key_valid=key_valid)
        return x + self.mlp(self.ln2(x))


class Transformer(Module):
    """Stack of pre-LN layers followed by a final layernorm."""

    def __init__(self, config: TransformerConfig, rng: np.random.Generator, dtype=np.float64):
        self.config = config
        self.layers = [
            TransformerLayer(config.width, config.heads, config.mlp_ratio, rng, config.depth, dtype)
            for _ in range(config.depth)
        ]
        self.ln_final = LayerNorm(config.width, dtype)

    def __call__(self, x: Tensor, key_valid: Optional[np.ndarray] = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, key_valid)
        return self.ln_final(x)


def init_params(config: TransformerConfig, rng: np.random.Generator, dtype=np.float64) -> Transformer:
    """Build a transformer stack with N(0, 0.02^2) weights.

    Residual output projections use ``0.02 / sqrt(2 * depth)``; biases start at
    zero and layernorm gains at one.
    """
    return Transformer(config, rng, dtype)


def sincos_1d(positions: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal table ``[len(positions), width]``: sines in the first half, cosines in the second."""
    if width % 2:
        raise ConfigError(f"1-D sincos width must be even, got {width}")
    omega = 1.0 / 10000.0 ** (np.arange(width // 2, dtype=np.float64) / (width / 2.0))
    angles = np.outer(np.asarray(positions, dtype=np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass(frozen=True)
class PosEncoding2D:
    grid_h: int
    grid_w: int
    table: np.ndarray


def pos_encoding_2d(grid_h: int, grid_w: int, width: int) -> PosEncoding2D:
    """Fixed 2-D encoding; row ``i`` col ``j`` is ``concat(sincos(i), sincos(j))``."""
    if width % 4:
        raise ConfigError(f"2-D position encoding needs width divisible by 4, got {width}")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    table = np.concatenate(
        [sincos_1d(rows.ravel(), width // 2), sincos_1d(cols.ravel(), width // 2)], axis=1
    )
    table.setflags(write=False)
    return PosEncoding2D(grid_h, grid_w, table)
