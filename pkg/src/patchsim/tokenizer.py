"""Map tokenization and agent-state/patch embedding.

Map polylines are resampled into 5-meter arclength segments whose learned
embedding depends only on the semantic kind; geometry lives exclusively in
the segment anchors and is injected downstream through relative embeddings.
Agent states embed speed, the velocity direction relative to the heading,
the bounding box, and the agent kind; absolute coordinates never enter any
embedding MLP. Patch embeddings aggregate a patch's states by attending
from the last state over the earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import EVAL_CTX, FeedForward, ForwardCtx, LayerNorm, MLP, Module, Embedding, RelAttention
from .relgeom import PoseStamped, wrap_angle
from .scenario import (
    AGENT_KIND_INDEX,
    POLYLINE_KIND_INDEX,
    AgentMeta,
    AgentState,
    PolylineKind,
    VectorMap,
)

SEGMENT_LEN = 5.0
SEGMENT_TAIL_MIN = 0.5
STATE_FEATURES = 6  # speed, sin/cos velocity-vs-heading, bbox l/w/h


@dataclass(frozen=True)
class MapSegment:
    kind_index: int
    anchor: np.ndarray  # (x, y, z, heading, t=0)


@dataclass
class MapToken:
    embedding: Tensor
    anchor: PoseStamped
    kind: PolylineKind


def _interp(points: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(max(i, 0), len(cum) - 2)
    seg = cum[i + 1] - cum[i]
    frac = 0.0 if seg == 0 else (s - cum[i]) / seg
    return points[i] + frac * (points[i + 1] - points[i])


def segment_map(vmap: VectorMap) -> list[MapSegment]:
    """Resample polylines into 5 m segments.

    A tail shorter than 0.5 m merges into the preceding segment; shorter
    polylines yield a single segment covering their full length.
    """
    segments: list[MapSegment] = []
    for poly in vmap.polylines:
        pts = poly.points
        cum = np.concatenate(
            [[0.0], np.cumsum(np.linalg.norm(np.diff(pts[:, :2], axis=0), axis=1))]
        )
        total = float(cum[-1])
        n_full = int(total // SEGMENT_LEN)
        tail = total - n_full * SEGMENT_LEN
        if n_full == 0:
            bounds = [(0.0, total)]
        else:
            bounds = [(k * SEGMENT_LEN, (k + 1) * SEGMENT_LEN) for k in range(n_full)]
            if tail >= SEGMENT_TAIL_MIN:
                bounds.append((n_full * SEGMENT_LEN, total))
            else:
                bounds[-1] = (bounds[-1][0], total)
        for a, b in bounds:
            pa = _interp(pts, cum, a)
            pb = _interp(pts, cum, b)
            mid = _interp(pts, cum, 0.5 * (a + b))
            heading = float(np.arctan2(pb[1] - pa[1], pb[0] - pa[0]))
            anchor = np.array([mid[0], mid[1], mid[2], heading, 0.0])
            segments.append(MapSegment(POLYLINE_KIND_INDEX[poly.kind], anchor))
    return segments


def segments_to_arrays(segments: list[MapSegment]) -> tuple[np.ndarray, np.ndarray]:
    if not segments:
        return np.zeros((0, 5)), np.zeros((0,), dtype=np.int64)
    anchors = np.stack([s.anchor for s in segments])
    kinds = np.array([s.kind_index for s in segments], dtype=np.int64)
    return anchors, kinds


class MapTokenizer(Module):
    def __init__(self, rng, d: int):
        self.kind_emb = Embedding(rng, len(POLYLINE_KIND_INDEX), d)

    def __call__(self, kinds: np.ndarray) -> Tensor:
        return self.kind_emb(kinds)

    def tokenize(self, vmap: VectorMap) -> list[MapToken]:
        segments = segment_map(vmap)
        anchors, kinds = segments_to_arrays(segments)
        emb = self(kinds)
        kinds_rev = list(POLYLINE_KIND_INDEX)
        return [
            MapToken(
                embedding=ad.narrow(emb, 0, i, 1),
                anchor=PoseStamped(tuple(anchors[i, :3]), float(anchors[i, 3]), 0.0),
                kind=kinds_rev[s.kind_index],
            )
            for i, s in enumerate(segments)
        ]


def state_feature_rows(states: np.ndarray, bbox: tuple[float, float, float]) -> np.ndarray:
    """Coordinate-free features for state rows [..., 7] -> [..., 6]."""
    states = np.asarray(states, dtype=np.float64)
    vx, vy, yaw = states[..., 3], states[..., 4], states[..., 5]
    speed = np.hypot(vx, vy)
    # stationary agents have no velocity direction; use 0 by convention
    ang = np.where(speed > 0.0, wrap_angle(np.arctan2(vy, vx) - yaw), 0.0)
    l, w, h = bbox
    ones = np.ones_like(speed)
    return np.stack(
        [speed, np.sin(ang), np.cos(ang), l * ones, w * ones, h * ones], axis=-1
    )


class StateEmbedder(Module):
    def __init__(self, rng, d: int):
        self.d = d
        self.kind_emb = Embedding(rng, len(AGENT_KIND_INDEX), d)
        self.mlp = MLP(rng, [STATE_FEATURES + d, d, d])

    def __call__(self, features: Tensor, kind_emb: Tensor) -> Tensor:
        """features [..., 6] with a matching kind embedding [..., d]."""
        return self.mlp(ad.concat([features, kind_emb], axis=-1))

    def embed_state(self, state: AgentState, meta: AgentMeta) -> Tensor:
        """Single-state entry point; the caller must mask invalid states."""
        if not state.valid:
            raise ValueError("cannot embed an invalid state; mask it out instead")
        row = np.array(
            [*state.position, *state.velocity, state.yaw, 1.0], dtype=np.float64
        )
        feats = Tensor(state_feature_rows(row, meta.bbox)[None, :])
        kind = self.kind_emb(np.array([AGENT_KIND_INDEX[meta.kind]]))
        return ad.reshape(self(feats, kind), (self.d,))


class PatchAggregator(Module):
    """Attention from a patch's last state over its earlier states."""

    def __init__(self, rng, d: int, heads: int, head_dim: int, ffn_mult: int = 4):
        self.norm = LayerNorm(d)
        self.attn = RelAttention(rng, d, heads, head_dim)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn_mult)

    def __call__(
        self,
        q: Tensor,
        kv: Tensor,
        rel: Tensor,
        mask: np.ndarray,
        ctx: ForwardCtx = EVAL_CTX,
    ) -> Tensor:
        """q [B,1,d]; kv [B,K,d]; rel [B,1,K,d]; mask [B,1,K] -> [B,d]."""
        b, _, d = q.shape
        x = ad.add(q, ctx.drop(self.attn(self.norm(q), self.norm(kv), rel, mask, ctx)))
        x = ad.add(x, ctx.drop(self.ffn(self.norm_ffn(x), ctx)))
        return ad.reshape(x, (b, d))
