"""End-to-end simulator model: tokenizer -> triple-attention decoder ->
next-patch mixture head, plus the pure-numpy scene preprocessing that
turns raw state arrays into attention geometry.

All geometry (anchors, descriptors, kNN sets, frame-transformed targets)
is computed outside the autodiff tape: during teacher forcing it derives
from ground truth, during rollout from already-simulated states, so no
gradients ever flow through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import Decoder, DecoderConfig, PatchFeatureGrid, SceneGeometry
from .errors import ConfigError, DataError
from .head import MixtureParams, NextPatchHead, mixture_nll
from .nn import EVAL_CTX, ForwardCtx, Module
from .relgeom import RelEmbed, pairwise_descriptors, wrap_angle
from .scenario import AGENT_KIND_INDEX, Scenario, aligned_offset
from .tokenizer import (
    MapTokenizer,
    PatchAggregator,
    StateEmbedder,
    segment_map,
    segments_to_arrays,
    state_feature_rows,
)


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    heads: int = 8
    head_dim: int = 16
    depth: int = 2
    knn: int = 32
    n_modes: int = 16
    patch_len: int = 10
    dropout: float = 0.1
    ffn_mult: int = 4
    agent_attn: bool = True

    def validate(self) -> None:
        if self.heads * self.head_dim != self.hidden:
            raise ConfigError(
                f"heads*head_dim = {self.heads}*{self.head_dim} != hidden = {self.hidden}"
            )
        if self.patch_len < 1 or self.depth < 0 or self.n_modes < 1:
            raise ConfigError("patch_len/depth/n_modes out of range")

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            depth=self.depth,
            d=self.hidden,
            heads=self.heads,
            head_dim=self.head_dim,
            knn=self.knn,
            dropout=self.dropout,
            ffn_mult=self.ffn_mult,
            agent_attn=self.agent_attn,
        )


@dataclass
class SceneInputs:
    """Everything one forward pass needs, precomputed as plain arrays."""

    n_agents: int
    n_patches: int
    patch_len: int
    offset: int
    kind_idx: np.ndarray  # [A]
    state_feats: np.ndarray  # [A, L, 6]
    state_valid: np.ndarray  # [A, L]
    state_anchor: np.ndarray  # [A, L, 5]
    q_idx: np.ndarray  # [A*P]
    k_idx: np.ndarray  # [A*P, ell-1]
    patchify_rel: np.ndarray  # [A*P, 1, ell-1, 5]
    patchify_mask: np.ndarray  # [A*P, 1, ell-1]
    geometry: SceneGeometry
    map_kinds: np.ndarray  # [M]
    map_anchors: np.ndarray  # [M, 5]
    targets: np.ndarray | None = None  # [A, P-1, ell, 6]
    target_valid: np.ndarray | None = None  # [A, P-1]
    scenario_id: str = ""


def anchors_from_states(states: np.ndarray, t0: int) -> np.ndarray:
    """Stamped poses (x, y, z, yaw, t) for state rows starting at step t0."""
    a, t, _ = states.shape
    out = np.zeros((a, t, 5))
    out[:, :, :3] = states[:, :, :3]
    out[:, :, 3] = states[:, :, 5]
    out[:, :, 4] = np.arange(t0, t0 + t)[None, :]
    return out


def local_frame_targets(
    states: np.ndarray, offset: int, n_patches: int, patch_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Targets for each context patch: the following patch's states in the
    frame of the context patch's last state (origin at its position, x-axis
    along its heading). Returns ([A, P-1, ell, 6], valid [A, P-1])."""
    a = states.shape[0]
    win = states[:, offset:, :]
    ell = patch_len
    targets = np.zeros((a, n_patches - 1, ell, 6))
    valid = np.zeros((a, n_patches - 1), dtype=bool)
    for p in range(n_patches - 1):
        anchor = win[:, (p + 1) * ell - 1, :]  # [A, 7]
        nxt = win[:, (p + 1) * ell : (p + 2) * ell, :]  # [A, ell, 7]
        c, s = np.cos(anchor[:, 5]), np.sin(anchor[:, 5])
        dx = nxt[:, :, 0] - anchor[:, None, 0]
        dy = nxt[:, :, 1] - anchor[:, None, 1]
        targets[:, p, :, 0] = c[:, None] * dx + s[:, None] * dy
        targets[:, p, :, 1] = -s[:, None] * dx + c[:, None] * dy
        targets[:, p, :, 2] = nxt[:, :, 2] - anchor[:, None, 2]
        targets[:, p, :, 3] = c[:, None] * nxt[:, :, 3] + s[:, None] * nxt[:, :, 4]
        targets[:, p, :, 4] = -s[:, None] * nxt[:, :, 3] + c[:, None] * nxt[:, :, 4]
        targets[:, p, :, 5] = wrap_angle(nxt[:, :, 5] - anchor[:, None, 5])
        valid[:, p] = (anchor[:, 6] > 0.5) & np.all(nxt[:, :, 6] > 0.5, axis=1)
    return targets, valid


def local_states_to_global(local: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Inverse of the target transform: local [ell, 6] rows plus an anchor
    state row [7] -> global state rows [ell, 7] (marked valid)."""
    c, s = np.cos(anchor[5]), np.sin(anchor[5])
    out = np.zeros((local.shape[0], 7))
    out[:, 0] = anchor[0] + c * local[:, 0] - s * local[:, 1]
    out[:, 1] = anchor[1] + s * local[:, 0] + c * local[:, 1]
    out[:, 2] = anchor[2] + local[:, 2]
    out[:, 3] = c * local[:, 3] - s * local[:, 4]
    out[:, 4] = s * local[:, 3] + c * local[:, 4]
    out[:, 5] = wrap_angle(anchor[5] + local[:, 5])
    out[:, 6] = 1.0
    return out


def _knn_indices(dist: np.ndarray, k: int) -> np.ndarray:
    """First k columns of a stable ascending argsort: ties break by index."""
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k]


def build_scene_inputs(
    map_anchors: np.ndarray,
    map_kinds: np.ndarray,
    states: np.ndarray,
    kind_idx: np.ndarray,
    bboxes: np.ndarray,
    cfg: ModelConfig,
    with_targets: bool = True,
    scenario_id: str = "",
) -> SceneInputs:
    """Build attention geometry from raw arrays.

    states: [A, T, 7]; kind_idx: [A]; bboxes: [A, 3].
    """
    a, t_total, _ = states.shape
    ell = cfg.patch_len
    offset = aligned_offset(t_total, ell)
    if t_total - offset < ell:
        raise DataError(
            f"scenario {scenario_id or '<arrays>'}: {t_total} steps cannot hold one "
            f"patch of length {ell}"
        )
    n_patches = (t_total - offset) // ell
    win = states[:, offset:, :]
    length = n_patches * ell

    feats = np.stack(
        [state_feature_rows(win[i], tuple(bboxes[i])) for i in range(a)], axis=0
    )
    state_valid = win[:, :, 6] > 0.5
    anchor = anchors_from_states(win, offset)

    last = np.arange(n_patches) * ell + (ell - 1)  # [P], window-relative
    flat_last = (np.arange(a)[:, None] * length + last[None, :]).reshape(-1)
    patch_valid = state_valid[:, last]  # [A, P]
    patch_anchor = anchor[:, last, :]  # [A, P, 5]

    # patchify: last state attends over the earlier states of its patch
    early = last[:, None] - np.arange(ell - 1, 0, -1)[None, :]  # [P, ell-1]
    k_idx = (np.arange(a)[:, None, None] * length + early[None, :, :]).reshape(
        a * n_patches, ell - 1
    )
    early_anchor = anchor[:, early.reshape(-1), :].reshape(a, n_patches, ell - 1, 5)
    patchify_rel = pairwise_descriptors(
        early_anchor, patch_anchor[:, :, None, :]
    ).reshape(a * n_patches, 1, ell - 1, 5)
    patchify_mask = (
        state_valid[:, early.reshape(-1)]
        .reshape(a, n_patches, ell - 1)
        .reshape(a * n_patches, 1, ell - 1)
    )

    # temporal: descriptors and strict causal masks between patch anchors
    temporal_rel = pairwise_descriptors(
        patch_anchor[:, None, :, :], patch_anchor[:, :, None, :]
    )  # key axis last-but-one: [A, P(query), P(key), 5]
    causal = np.tril(np.ones((n_patches, n_patches), dtype=bool), k=-1)
    temporal_mask = causal[None, :, :] & patch_valid[:, None, :]

    # agent-map kNN at each patch anchor
    m = map_anchors.shape[0]
    km = min(cfg.knn, m)
    flat_anchor = patch_anchor.reshape(a * n_patches, 5)
    if m > 0 and km > 0:
        d_map = np.linalg.norm(
            flat_anchor[:, None, :2] - map_anchors[None, :, :2], axis=2
        )
        map_idx = _knn_indices(d_map, km)
        map_src = map_anchors[map_idx].copy()  # [A*P, Km, 5]
        map_src[:, :, 4] = flat_anchor[:, None, 4]  # map tokens are timeless
        map_rel = pairwise_descriptors(map_src, flat_anchor[:, None, :])[:, None, :, :]
        map_mask = np.ones((a * n_patches, 1, km), dtype=bool)
    else:
        map_idx = np.zeros((a * n_patches, 0), dtype=np.int64)
        map_rel = np.zeros((a * n_patches, 1, 0, 5))
        map_mask = np.zeros((a * n_patches, 1, 0), dtype=bool)

    # agent-agent kNN per patch time among valid other agents
    ka = min(cfg.knn, a - 1)
    if ka > 0:
        agent_idx = np.zeros((a, n_patches, ka), dtype=np.int64)
        agent_mask = np.zeros((a, n_patches, ka), dtype=bool)
        agent_rel = np.zeros((a, n_patches, ka, 5))
        for p in range(n_patches):
            pos = patch_anchor[:, p, :2]
            d_aa = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
            np.fill_diagonal(d_aa, np.inf)
            d_aa[:, ~patch_valid[:, p]] = np.inf
            nbr = _knn_indices(d_aa, ka)  # [A, Ka]
            ok = np.isfinite(np.take_along_axis(d_aa, nbr, axis=1))
            agent_idx[:, p, :] = nbr * n_patches + p
            agent_mask[:, p, :] = ok
            src = patch_anchor[nbr, p, :]  # [A, Ka, 5]
            agent_rel[:, p, :, :] = pairwise_descriptors(
                src, patch_anchor[:, p, None, :]
            )
        agent_idx = agent_idx.reshape(a * n_patches, ka)
        agent_mask = agent_mask.reshape(a * n_patches, 1, ka)
        agent_rel = agent_rel.reshape(a * n_patches, 1, ka, 5)
    else:
        agent_idx = np.zeros((a * n_patches, 0), dtype=np.int64)
        agent_mask = np.zeros((a * n_patches, 1, 0), dtype=bool)
        agent_rel = np.zeros((a * n_patches, 1, 0, 5))

    geometry = SceneGeometry(
        patch_valid=patch_valid,
        temporal_rel=temporal_rel,
        temporal_mask=temporal_mask,
        map_idx=map_idx,
        map_rel=map_rel,
        map_mask=map_mask,
        agent_idx=agent_idx,
        agent_rel=agent_rel,
        agent_mask=agent_mask,
    )

    targets = target_valid = None
    if with_targets:
        if n_patches < 2:
            raise DataError(
                f"scenario {scenario_id or '<arrays>'}: needs a context and a target patch"
            )
        targets, target_valid = local_frame_targets(states, offset, n_patches, ell)

    return SceneInputs(
        n_agents=a,
        n_patches=n_patches,
        patch_len=ell,
        offset=offset,
        kind_idx=np.asarray(kind_idx, dtype=np.int64),
        state_feats=feats,
        state_valid=state_valid,
        state_anchor=anchor,
        q_idx=flat_last,
        k_idx=k_idx,
        patchify_rel=patchify_rel,
        patchify_mask=patchify_mask,
        geometry=geometry,
        map_kinds=np.asarray(map_kinds, dtype=np.int64),
        map_anchors=map_anchors,
        targets=targets,
        target_valid=target_valid,
        scenario_id=scenario_id,
    )


def scenario_arrays(s: Scenario) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    states = np.stack([agent.states for agent in s.agents], axis=0)
    kinds = np.array([AGENT_KIND_INDEX[a.meta.kind] for a in s.agents], dtype=np.int64)
    bboxes = np.array([a.meta.bbox for a in s.agents], dtype=np.float64)
    return states, kinds, bboxes


def prepare_scenario(s: Scenario, cfg: ModelConfig, with_targets: bool = True) -> SceneInputs:
    anchors, kinds = segments_to_arrays(segment_map(s.map))
    states, agent_kinds, bboxes = scenario_arrays(s)
    return build_scene_inputs(
        anchors, kinds, states, agent_kinds, bboxes, cfg,
        with_targets=with_targets, scenario_id=s.scenario_id,
    )


class SimulatorModel(Module):
    def __init__(self, cfg: ModelConfig, init_rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden
        self.map_tokenizer = MapTokenizer(init_rng, d)
        self.state_embedder = StateEmbedder(init_rng, d)
        self.rel_embed = RelEmbed(init_rng, d)
        self.patchifier = PatchAggregator(init_rng, d, cfg.heads, cfg.head_dim, cfg.ffn_mult)
        self.decoder = Decoder(init_rng, cfg.decoder_config())
        self.head = NextPatchHead(init_rng, d, cfg.n_modes, cfg.patch_len)

    def _ctx(self, training: bool, rng: np.random.Generator | None) -> ForwardCtx:
        if not training:
            return EVAL_CTX
        return ForwardCtx(training=True, dropout=self.cfg.dropout, rng=rng)

    def patch_tokens(self, scene: SceneInputs, ctx: ForwardCtx) -> Tensor:
        a, p, ell = scene.n_agents, scene.n_patches, scene.patch_len
        d = self.cfg.hidden
        length = p * ell
        kind_e = self.state_embedder.kind_emb(scene.kind_idx)  # [A, d]
        kind_b = ad.broadcast_to(ad.reshape(kind_e, (a, 1, d)), (a, length, d))
        s_emb = self.state_embedder(Tensor(scene.state_feats), kind_b)  # [A, L, d]
        s_flat = ad.reshape(s_emb, (a * length, d))
        q = ad.reshape(ad.gather(s_flat, scene.q_idx), (a * p, 1, d))
        kv = ad.gather(s_flat, scene.k_idx)  # [A*P, ell-1, d]
        rel = self.rel_embed(scene.patchify_rel)
        tokens = self.patchifier(q, kv, rel, scene.patchify_mask, ctx)
        x = ad.reshape(tokens, (a, p, d))
        return ad.mul(x, Tensor(scene.geometry.patch_valid.astype(np.float64)[:, :, None]))

    def forward_features(
        self,
        scene: SceneInputs,
        training: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> PatchFeatureGrid:
        ctx = self._ctx(training, dropout_rng)
        x = self.patch_tokens(scene, ctx)
        map_emb = (
            self.map_tokenizer(scene.map_kinds) if scene.map_kinds.size > 0 else None
        )
        return self.decoder(x, scene.geometry, map_emb, self.rel_embed, ctx)

    def loss(
        self,
        scene: SceneInputs,
        training: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, int]:
        """Teacher-forced NLL summed over all valid (agent, patch) targets."""
        if scene.targets is None:
            raise DataError("scene was built without targets")
        grid = self.forward_features(scene, training, dropout_rng)
        a, p = scene.n_agents, scene.n_patches
        sel = np.argwhere(scene.target_valid)  # rows (agent, context patch)
        if sel.shape[0] == 0:
            raise DataError(f"scenario {scene.scenario_id}: no valid prediction targets")
        flat_idx = sel[:, 0] * p + sel[:, 1]
        f = ad.gather(ad.reshape(grid.features, (a * p, self.cfg.hidden)), flat_idx)
        ctx = self._ctx(training, dropout_rng)
        mp = self.head.predict_batch(f, ctx)
        targets = scene.targets[sel[:, 0], sel[:, 1]]
        return mixture_nll(targets, mp), sel.shape[0]

    def predict_last_patch(
        self, scene: SceneInputs
    ) -> tuple[MixtureParams, np.ndarray]:
        """MixtureParams predicting the patch after the last one in the scene,
        for every agent whose final patch anchor is valid."""
        grid = self.forward_features(scene, training=False)
        a, p = scene.n_agents, scene.n_patches
        valid = grid.valid[:, p - 1]
        rows = np.arange(a)[valid]
        flat_idx = rows * p + (p - 1)
        f = ad.gather(ad.reshape(grid.features, (a * p, self.cfg.hidden)), flat_idx)
        return self.head.predict_batch(f), rows
