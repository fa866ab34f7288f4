"""Triple-attention decoder.

Each block interleaves three pre-norm attention sublayers over the
agent-by-patch feature grid: causal self-attention along each agent's own
patch sequence, cross-attention to the k nearest map segments, and
same-time self-attention over the k nearest other agents. Every attention
is followed by its own residual feed-forward sublayer. Invalid grid
entries are zeroed after every sublayer group and are masked out of all
key/value sets, which makes causality and masking exact rather than
approximate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import EVAL_CTX, FeedForward, ForwardCtx, LayerNorm, Module, RelAttention
from .relgeom import RelEmbed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 2
    d: int = 128
    heads: int = 8
    head_dim: int = 16
    knn: int = 32
    dropout: float = 0.1
    ffn_mult: int = 4
    agent_attn: bool = True

    def validate(self) -> None:
        if self.heads * self.head_dim != self.d:
            raise ValueError(
                f"heads*head_dim = {self.heads}*{self.head_dim} must equal d = {self.d}"
            )


@dataclass
class PatchFeatureGrid:
    features: Tensor  # [A, P, d]
    valid: np.ndarray  # [A, P] bool


@dataclass
class SceneGeometry:
    """Pure-numpy attention geometry shared by all decoder blocks."""

    patch_valid: np.ndarray  # [A, P]
    temporal_rel: np.ndarray  # [A, P, P, 5] raw descriptors key->query
    temporal_mask: np.ndarray  # [A, P, P] strict causal & key-valid
    map_idx: np.ndarray  # [A*P, Km] into map tokens
    map_rel: np.ndarray  # [A*P, 1, Km, 5]
    map_mask: np.ndarray  # [A*P, 1, Km]
    agent_idx: np.ndarray  # [A*P, Ka] into the flattened grid
    agent_rel: np.ndarray  # [A*P, 1, Ka, 5]
    agent_mask: np.ndarray  # [A*P, 1, Ka]


class Sublayer(Module):
    """Pre-norm attention plus its residual feed-forward."""

    def __init__(self, rng, cfg: DecoderConfig):
        self.norm = LayerNorm(cfg.d)
        self.attn = RelAttention(rng, cfg.d, cfg.heads, cfg.head_dim)
        self.norm_ffn = LayerNorm(cfg.d)
        self.ffn = FeedForward(rng, cfg.d, cfg.ffn_mult)


class TripleBlock(Module):
    def __init__(self, rng, cfg: DecoderConfig):
        self.temporal = Sublayer(rng, cfg)
        self.map_cross = Sublayer(rng, cfg)
        self.social = Sublayer(rng, cfg) if cfg.agent_attn else None


def _apply_self(sub: Sublayer, x: Tensor, rel: Tensor, mask: np.ndarray,
                ctx: ForwardCtx) -> Tensor:
    n = sub.norm(x)
    x = ad.add(x, ctx.drop(sub.attn(n, n, rel, mask, ctx)))
    return ad.add(x, ctx.drop(sub.ffn(sub.norm_ffn(x), ctx)))


def _apply_cross(sub: Sublayer, x: Tensor, kv: Tensor, rel: Tensor,
                 mask: np.ndarray, ctx: ForwardCtx) -> Tensor:
    n = sub.norm(x)
    x = ad.add(x, ctx.drop(sub.attn(n, kv, rel, mask, ctx)))
    return ad.add(x, ctx.drop(sub.ffn(sub.norm_ffn(x), ctx)))


def _apply_social(sub: Sublayer, x: Tensor, idx: np.ndarray, rel: Tensor,
                  mask: np.ndarray, ctx: ForwardCtx) -> Tensor:
    n = sub.norm(x)  # [B,1,d]
    kv = ad.gather(ad.reshape(n, (n.shape[0], n.shape[2])), idx)
    x = ad.add(x, ctx.drop(sub.attn(n, kv, rel, mask, ctx)))
    return ad.add(x, ctx.drop(sub.ffn(sub.norm_ffn(x), ctx)))


class Decoder(Module):
    def __init__(self, rng, cfg: DecoderConfig):
        cfg.validate()
        self.cfg = cfg
        self.blocks = [TripleBlock(rng, cfg) for _ in range(cfg.depth)]
        self._warned_empty_map = False

    def __call__(
        self,
        x: Tensor,
        geo: SceneGeometry,
        map_emb: Tensor | None,
        rel_embed: RelEmbed,
        ctx: ForwardCtx = EVAL_CTX,
    ) -> PatchFeatureGrid:
        a, p, d = x.shape
        vmask = geo.patch_valid.astype(np.float64)[:, :, None]
        have_map = map_emb is not None and map_emb.shape[0] > 0
        if not have_map and not self._warned_empty_map:
            logger.warning("scene has no map tokens; map cross-attention passes through")
            self._warned_empty_map = True
        have_social = geo.agent_idx.shape[1] > 0

        rel_t = rel_embed(geo.temporal_rel)
        rel_m = rel_embed(geo.map_rel) if have_map else None
        rel_a = rel_embed(geo.agent_rel) if have_social else None

        x = ad.mul(x, Tensor(vmask))
        for block in self.blocks:
            x = _apply_self(block.temporal, x, rel_t, geo.temporal_mask, ctx)
            x = ad.mul(x, Tensor(vmask))
            if have_map:
                xq = ad.reshape(x, (a * p, 1, d))
                kv = ad.gather(map_emb, geo.map_idx)
                xq = _apply_cross(block.map_cross, xq, kv, rel_m, geo.map_mask, ctx)
                x = ad.mul(ad.reshape(xq, (a, p, d)), Tensor(vmask))
            if block.social is not None and have_social:
                xq = ad.reshape(x, (a * p, 1, d))
                xq = _apply_social(block.social, xq, geo.agent_idx, rel_a,
                                   geo.agent_mask, ctx)
                x = ad.mul(ad.reshape(xq, (a, p, d)), Tensor(vmask))
        return PatchFeatureGrid(features=x, valid=geo.patch_valid.copy())
