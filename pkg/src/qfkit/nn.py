"""Transformer building blocks on top of the autodiff engine.

Modules are plain objects holding named ``Parameter`` tensors. Collection
order is construction order, which keeps optimizer iteration and checkpoint
layout deterministic.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

INIT_STD = 0.02  # truncated normal, clipped at +/- 2 std


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) with resampling outside +/- 2 std."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


class Module:
    """Base for parameterized blocks; tracks children and own parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
            children = self.__dict__.setdefault("_children", {})
            for i, v in enumerate(value):
                children[f"{name}[{i}]"] = v
        object.__setattr__(self, name, value)

    def parameters(self) -> list[Parameter]:
        out = list(self._params.values())
        for child in self._children.values():
            out.extend(child.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def parameter_hash(params: list[Parameter]) -> str:
    """SHA-256 over the name-sorted raw bytes of the given parameters."""
    digest = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        digest.update(p.name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(f"{name}.weight", trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, name: str, d: int):
        super().__init__()
        self.gain = Parameter(f"{name}.gain", np.ones(d))
        self.bias = Parameter(f"{name}.bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def residual(self, x: Tensor, sub: Tensor) -> Tensor:
        return ad.residual_layer_norm(x, sub, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query/key-value sources.

    Self-attention passes the same tensor for both (and uses one fused QKV
    projection); cross-attention passes a key/value source with its own
    feature width.
    """

    def __init__(self, name: str, d_model: int, n_heads: int,
                 rng: np.random.Generator, d_kv: int | None = None):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_head = d_model // n_heads
        self.fused = d_kv is None
        if self.fused:
            self.wqkv = Linear(f"{name}.wqkv", d_model, 3 * d_model, rng)
        else:
            self.wq = Linear(f"{name}.wq", d_model, d_model, rng)
            self.wkv = Linear(f"{name}.wkv", d_kv, 2 * d_model, rng)
        self.wo = Linear(f"{name}.wo", d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, s, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, kv: Tensor,
                 allow: np.ndarray | None = None,
                 additive: np.ndarray | None = None) -> Tensor:
        """Mask broadcasts against (batch, heads, n_query_pos, n_kv_pos)."""
        b, sq, _ = query.shape
        d = self.d_model
        if self.fused:
            qkv = self.wqkv(query)
            q = self._split(ad.slice_axis(qkv, 2, 0, d))
            k = self._split(ad.slice_axis(qkv, 2, d, 2 * d))
            v = self._split(ad.slice_axis(qkv, 2, 2 * d, 3 * d))
        else:
            q = self._split(self.wq(query))
            kv_proj = self.wkv(kv)
            k = self._split(ad.slice_axis(kv_proj, 2, 0, d))
            v = self._split(ad.slice_axis(kv_proj, 2, d, 2 * d))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.d_head))
        weights = ad.masked_softmax(scores, allow=allow, additive=additive)
        mixed = ad.matmul(weights, v)
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, sq, d))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, name: str, d_model: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(f"{name}.fc1", d_model, d_hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", d_hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TokenEmbedding(Module):
    """Token + learned absolute position embeddings."""

    def __init__(self, name: str, vocab_size: int, max_len: int, d_model: int,
                 rng: np.random.Generator):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.tokens = Parameter(f"{name}.tokens", trunc_normal(rng, (vocab_size, d_model)))
        self.positions = Parameter(f"{name}.positions", trunc_normal(rng, (max_len, d_model)))

    def __call__(self, ids: np.ndarray, position_offset: int = 0) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError("token ids must be a (batch, length) array")
        length = ids.shape[1]
        if position_offset + length > self.max_len:
            raise ValueError(f"sequence of length {length} at offset {position_offset} "
                             f"exceeds max length {self.max_len}")
        tok = ad.embedding(self.tokens, ids)
        pos = ad.slice_axis(self.positions, 0, position_offset, position_offset + length)
        return tok + pos
