"""Layers shared by the tokenizer, decoder, and prediction head.

Modules are plain objects holding Tensors; ``parameters()`` walks the
attribute tree and returns a flat dict of dotted names so the optimizer
and checkpoint code can address every learnable array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        self._collect("", out)
        return out

    def _collect(self, prefix: str, out: dict[str, Tensor]) -> None:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                value._collect(key + ".", out)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{key}.{i}.", out)
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item


@dataclass
class ForwardCtx:
    """Per-call forward state: dropout behavior and its seeded stream."""

    training: bool = False
    dropout: float = 0.0
    rng: np.random.Generator | None = None

    def drop(self, x: Tensor) -> Tensor:
        if not self.training or self.dropout <= 0.0:
            return x
        return ad.dropout(x, self.dropout, self.rng, True)


EVAL_CTX = ForwardCtx()


def _uniform(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        self.w = _uniform(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, self.d_in)) if x.ndim != 2 else x
        out = ad.matmul(flat, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        if x.ndim != 2:
            out = ad.reshape(out, (*lead, self.d_out))
        return out


class MLP(Module):
    """Stack of Linear layers with SiLU between them (none after the last)."""

    def __init__(self, rng, dims: list[int]):
        self.layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ad.silu(x)
        return x


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, rng, count: int, d: int):
        self.table = _uniform(rng, (count, d), 0.1)

    def __call__(self, index: np.ndarray) -> Tensor:
        return ad.gather(self.table, np.asarray(index, dtype=np.int64))


class GRUCell(Module):
    """Gated recurrent cell; hidden-to-hidden weights start orthogonal."""

    def __init__(self, rng, d_in: int, d: int):
        self.d = d
        self.wx = _uniform(rng, (d_in, 3 * d), 1.0 / np.sqrt(d_in))
        self.wh = Tensor(
            np.concatenate([orthogonal(rng, d) for _ in range(3)], axis=1),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(3 * d), requires_grad=True)

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        gx = ad.add(ad.matmul(x, self.wx), self.b)
        gh = ad.matmul(h, self.wh)
        d = self.d
        z = ad.sigmoid(ad.add(ad.narrow(gx, 1, 0, d), ad.narrow(gh, 1, 0, d)))
        r = ad.sigmoid(ad.add(ad.narrow(gx, 1, d, d), ad.narrow(gh, 1, d, d)))
        n = ad.tanh(
            ad.add(ad.narrow(gx, 1, 2 * d, d), ad.mul(r, ad.narrow(gh, 1, 2 * d, d)))
        )
        one_minus_z = ad.sub(ad.tensor(1.0), z)
        return ad.add(ad.mul(one_minus_z, n), ad.mul(z, h))


class RelAttention(Module):
    """Multi-head attention whose keys/values are [element, relation] pairs.

    Shapes: q [B, Nq, d], kv [B, K, d], rel [B, Nq, K, d], mask [B, Nq, K]
    (boolean; False entries never serve as keys/values). Queries whose mask
    row is entirely False receive a zero attention output, so the caller's
    residual connection passes them through unchanged.
    """

    def __init__(self, rng, d: int, heads: int, head_dim: int):
        if heads * head_dim != d:
            raise ad.ShapeError(f"heads*head_dim {heads}x{head_dim} != hidden {d}")
        self.d = d
        self.heads = heads
        self.head_dim = head_dim
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d, bias=False)
        self.wkr = Linear(rng, d, d, bias=False)
        self.wv = Linear(rng, d, d, bias=False)
        self.wvr = Linear(rng, d, d, bias=False)
        # no output bias: queries with empty key sets must contribute exactly 0
        self.wo = Linear(rng, d, d, bias=False)

    def __call__(self, q: Tensor, kv: Tensor, rel: Tensor, mask: np.ndarray,
                 ctx: ForwardCtx = EVAL_CTX) -> Tensor:
        b, nq, _ = q.shape
        k = kv.shape[1]
        h, hd = self.heads, self.head_dim
        qh = ad.reshape(self.wq(q), (b, nq, h, hd))
        kx = ad.reshape(self.wk(kv), (b, k, h, hd))
        kr = ad.reshape(self.wkr(rel), (b, nq, k, h, hd))
        vx = ad.reshape(self.wv(kv), (b, k, h, hd))
        vr = ad.reshape(self.wvr(rel), (b, nq, k, h, hd))
        scale = 1.0 / np.sqrt(hd)
        scores = ad.add(
            ad.einsum("bqhd,bkhd->bqhk", qh, kx),
            ad.einsum("bqhd,bqkhd->bqhk", qh, kr),
        )
        scores = ad.mul(scores, ad.tensor(scale))
        attn = ad.masked_softmax(scores, mask[:, :, None, :], axis=-1)
        attn = ctx.drop(attn)
        mixed = ad.add(
            ad.einsum("bqhk,bkhd->bqhd", attn, vx),
            ad.einsum("bqhk,bqkhd->bqhd", attn, vr),
        )
        return self.wo(ad.reshape(mixed, (b, nq, h * hd)))


class FeedForward(Module):
    def __init__(self, rng, d: int, mult: int = 4):
        self.lin1 = Linear(rng, d, mult * d)
        self.lin2 = Linear(rng, mult * d, d)

    def __call__(self, x: Tensor, ctx: ForwardCtx = EVAL_CTX) -> Tensor:
        return self.lin2(ctx.drop(ad.silu(self.lin1(x))))


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()
