"""Transformer building blocks.

Weights are stored input-major (``x @ W + b``). Every block is post-norm:
``x = LN(x + sublayer(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DropoutStream, ShapeError, Tensor

INIT_STD = 0.02
LN_EPS = 1e-12


class Module:
    """Minimal parameter container with hierarchical dot-separated names.

    Attributes holding a :class:`Tensor` with ``requires_grad`` set at
    assignment time become parameters; attributes holding a ``Module``
    become children. Registration order defines parameter order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (64-bit for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())


class Init:
    """A random generator paired with the weight-init standard deviation.

    Layers accept either an ``Init`` or a bare ``np.random.Generator``;
    the latter draws with ``INIT_STD``.
    """

    def __init__(self, generator: np.random.Generator, std: float = INIT_STD):
        if not std > 0.0:
            raise ValueError(f"init std must be positive, got {std}")
        self.generator = generator
        self.std = float(std)


def _normal(rng, shape, dtype=np.float32) -> Tensor:
    if isinstance(rng, Init):
        values = rng.generator.normal(0.0, rng.std, size=shape)
    else:
        values = rng.normal(0.0, INIT_STD, size=shape)
    return Tensor(values.astype(dtype), requires_grad=True)


def _zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = _normal(rng, (d_in, d_out))
        self.bias = _zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = _ones((dim,))
        self.beta = _zeros((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, LN_EPS)


@dataclass
class Context:
    """Per-forward settings threaded through the blocks."""

    dropout: float = 0.0
    train: bool = False
    stream: DropoutStream | None = None

    def drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.dropout, self.train, self.stream)


EVAL = Context()


def check_mask(mask: np.ndarray, op: str = "attention") -> None:
    if not np.all(mask.any(axis=-1)):
        bad = np.flatnonzero(~mask.any(axis=-1))
        raise ValueError(f"{op}: no unmasked key for batch rows {bad.tolist()}")


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads over model dim ``dim``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ShapeError("attention", f"dim divisible by heads={heads}", dim)
        self.dim, self.heads = dim, heads
        self.wq = _normal(rng, (dim, dim))
        self.bq = _zeros((dim,))
        self.wk = _normal(rng, (dim, dim))
        self.bk = _zeros((dim,))
        self.wv = _normal(rng, (dim, dim))
        self.bv = _zeros((dim,))
        self.wo = _normal(rng, (dim, dim))
        self.bo = _zeros((dim,))
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        x = T.reshape(x, (b, n, self.heads, self.dim // self.heads))
        return T.transpose(x, (0, 2, 1, 3))

    def mix(self, queries: Tensor, keys_values: Tensor, key_mask: np.ndarray, ctx: Context = EVAL) -> Tensor:
        """Attention output before the output projection, shape (B, Tq, D)."""
        b, tq, d = queries.shape
        if d != self.dim or keys_values.shape[-1] != self.dim:
            raise ShapeError("attention", f"model dim {self.dim}", (queries.shape, keys_values.shape))
        tk = keys_values.shape[1]
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (b, tk):
            raise ShapeError("attention", f"key mask {(b, tk)}", key_mask.shape)
        check_mask(key_mask)
        q = self._split(T.add(T.matmul(queries, self.wq), self.bq))
        k = self._split(T.add(T.matmul(keys_values, self.wk), self.bk))
        v = self._split(T.add(T.matmul(keys_values, self.wv), self.bv))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.dim // self.heads))
        weights = T.softmax(scores, key_mask[:, None, None, :])
        self.last_weights = weights.data
        weights = ctx.drop(weights)
        out = T.matmul(weights, v)
        out = T.transpose(out, (0, 2, 1, 3))
        return T.reshape(out, (b, tq, d))

    def __call__(self, queries: Tensor, keys_values: Tensor, key_mask: np.ndarray, ctx: Context = EVAL) -> Tensor:
        return T.add(T.matmul(self.mix(queries, keys_values, key_mask, ctx), self.wo), self.bo)


class FeedForward(Module):
    def __init__(self, dim: int, inner: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = _normal(rng, (dim, inner))
        self.b1 = _zeros((inner,))
        self.w2 = _normal(rng, (inner, dim))
        self.b2 = _zeros((dim,))

    def __call__(self, x: Tensor, ctx: Context = EVAL) -> Tensor:
        h = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, inner: int, rng: np.random.Generator):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, inner, rng)
        self.ln2 = LayerNorm(dim)

    def __call__(self, x: Tensor, mask: np.ndarray, ctx: Context = EVAL) -> Tensor:
        x = self.ln1(T.add(x, ctx.drop(self.attn(x, x, mask, ctx))))
        return self.ln2(T.add(x, ctx.drop(self.ffn(x, ctx))))


def encoder_block_param_count(dim: int, inner: int) -> int:
    return (4 * dim * dim + 4 * dim) + (2 * dim * inner + dim + inner) + 4 * dim


class Encoder(Module):
    """A stack of ``EncoderBlock``; children are named ``block0``, ``block1``, ..."""

    def __init__(self, dim: int, heads: int, inner: int, layers: int, rng: np.random.Generator):
        super().__init__()
        self.blocks = []
        for i in range(layers):
            blk = EncoderBlock(dim, heads, inner, rng)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)

    def __call__(self, x: Tensor, mask: np.ndarray, ctx: Context = EVAL) -> Tensor:
        return encode(self.blocks, x, mask, ctx)


def encode(blocks, states: Tensor, pad_mask: np.ndarray, ctx: Context = EVAL) -> Tensor:
    for blk in blocks:
        states = blk(states, pad_mask, ctx)
    return states


class TextEmbedding(Module):
    """Token + position + token-type lookup, layer norm, optional E -> D projection."""

    def __init__(self, vocab_size: int, max_len: int, embed_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.vocab_size, self.max_len = vocab_size, max_len
        self.embed_dim, self.hidden = embed_dim, hidden
        self.token_table = _normal(rng, (vocab_size, embed_dim))
        self.position_table = _normal(rng, (max_len, embed_dim))
        self.token_type_table = _normal(rng, (2, embed_dim))
        self.ln = LayerNorm(embed_dim)
        if embed_dim != hidden:
            self.proj = Linear(embed_dim, hidden, rng)
        else:
            self.proj = None

    def __call__(self, ids: np.ndarray, ctx: Context = EVAL, token_type: int = 0) -> Tensor:
        ids = np.asarray(ids)
        b, n = ids.shape
        if n > self.max_len:
            raise ShapeError("text_embedding", f"length <= {self.max_len}", n)
        if ids.size and ids.max() >= self.vocab_size:
            raise ValueError(f"token id {int(ids.max())} >= vocab size {self.vocab_size}")
        x = T.embedding(self.token_table, ids)
        x = T.add(x, T.slice_(self.position_table, slice(0, n)))
        x = T.add(x, T.slice_(self.token_type_table, token_type))
        x = ctx.drop(self.ln(x))
        if self.proj is not None:
            x = self.proj(x)
        return x

    def type_vector(self, token_type: int) -> Tensor:
        """Token-type embedding expressed in the hidden dim (no bias)."""
        v = T.slice_(self.token_type_table, slice(token_type, token_type + 1))
        if self.proj is not None:
            v = T.matmul(v, self.proj.weight)
        return T.reshape(v, (self.hidden,))


class PatchEmbedding(Module):
    """Square patches flattened in (row, col, channel) order and projected.

    A CLS vector is prepended, learned positions added, then layer norm.
    """

    def __init__(self, height: int, width: int, channels: int, patch: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        if height % patch or width % patch:
            raise ShapeError("patch_embed", f"H and W multiples of P={patch}", (height, width))
        self.height, self.width, self.channels, self.patch = height, width, channels, patch
        self.num_patches = (height // patch) * (width // patch)
        self.proj = Linear(patch * patch * channels, hidden, rng)
        self.cls_token = _normal(rng, (hidden,))
        self.position_table = _normal(rng, (self.num_patches + 1, hidden))
        self.ln = LayerNorm(hidden)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        b, h, w, c = images.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError("patch_embed", f"H={h}, W={w} divisible by P={p}", (h, w))
        if (h, w, c) != (self.height, self.width, self.channels):
            raise ShapeError("patch_embed", (self.height, self.width, self.channels), (h, w, c))
        x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def __call__(self, images: np.ndarray, ctx: Context = EVAL) -> Tensor:
        patches = self.patchify(images)
        b = patches.shape[0]
        x = self.proj(Tensor(patches.astype(self.proj.weight.dtype)))
        cls = T.reshape(self.cls_token, (1, 1, -1))
        cls = T.concat([cls] * b, axis=0) if b > 1 else cls
        x = T.concat([cls, x], axis=1)
        x = T.add(x, self.position_table)
        return ctx.drop(self.ln(x))


class CrossModalStream(Module):
    """One stream's half of a bidirectional cross-modal block."""

    def __init__(self, dim: int, heads: int, inner: int, rng: np.random.Generator):
        super().__init__()
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln_cross = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln_self = LayerNorm(dim)
        self.ffn = FeedForward(dim, inner, rng)
        self.ln_ffn = LayerNorm(dim)


class CrossModalBlock(Module):
    def __init__(self, dim: int, heads: int, inner: int, rng: np.random.Generator):
        super().__init__()
        self.text = CrossModalStream(dim, heads, inner, rng)
        self.vision = CrossModalStream(dim, heads, inner, rng)

    def __call__(self, text: Tensor, vision: Tensor, text_mask, vision_mask, ctx: Context = EVAL):
        return cross_modal_forward(self, text, vision, text_mask, vision_mask, ctx)


def cross_modal_forward(block: CrossModalBlock, text: Tensor, vision: Tensor, text_mask, vision_mask, ctx: Context = EVAL):
    """Cross-attention (both directions from the entering states), then
    per-stream self-attention, then per-stream FFN; each with add & norm."""
    t, v = block.text, block.vision
    t_cross = t.cross_attn(text, vision, vision_mask, ctx)
    v_cross = v.cross_attn(vision, text, text_mask, ctx)
    text = t.ln_cross(T.add(text, ctx.drop(t_cross)))
    vision = v.ln_cross(T.add(vision, ctx.drop(v_cross)))
    text = t.ln_self(T.add(text, ctx.drop(t.self_attn(text, text, text_mask, ctx))))
    vision = v.ln_self(T.add(vision, ctx.drop(v.self_attn(vision, vision, vision_mask, ctx))))
    text = t.ln_ffn(T.add(text, ctx.drop(t.ffn(text, ctx))))
    vision = v.ln_ffn(T.add(vision, ctx.drop(v.ffn(vision, ctx))))
    return text, vision


class CrossModalStack(Module):
    def __init__(self, dim: int, heads: int, inner: int, layers: int, rng: np.random.Generator):
        super().__init__()
        self.blocks = []
        for i in range(layers):
            blk = CrossModalBlock(dim, heads, inner, rng)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)

    def __call__(self, text, vision, text_mask, vision_mask, ctx: Context = EVAL):
        for blk in self.blocks:
            text, vision = blk(text, vision, text_mask, vision_mask, ctx)
        return text, vision


def cross_stream_param_count(dim: int, inner: int) -> int:
    return 2 * (4 * dim * dim + 4 * dim) + (2 * dim * inner + dim + inner) + 6 * dim
