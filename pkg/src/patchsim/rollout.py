"""Closed-loop autoregressive simulation.

Each replan cycle re-tokenizes the full simulated history (patch
boundaries re-aligned backward from the current last step), predicts every
agent's next-patch mixture, samples one behavior mode per agent, unrolls
the mode's location parameters in the agent's local frame, and executes
the first alpha steps. History is strictly append-only. Replicas run on
independent seed streams keyed (seed, replica, cycle, agent), so paired
rollouts stay aligned draw-for-draw.

Within a mode the unroll is deterministic (location parameters only);
optional Laplace/von-Mises sampling sits behind ``sample_within_mode``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import jsonio
from . import rng as rngmod
from .errors import ConfigError, DataError
from .model import (
    SimulatorModel,
    build_scene_inputs,
    local_states_to_global,
    scenario_arrays,
)
from .relgeom import wrap_angle
from .scenario import (
    Agent,
    AgentKind,
    AgentMeta,
    Polyline,
    PolylineKind,
    Scenario,
    VectorMap,
    scenario_to_doc,
)
from .tokenizer import segment_map, segments_to_arrays

logger = logging.getLogger(__name__)

REPLAN_RATES = (1, 2, 5, 10)


@dataclass(frozen=True)
class RolloutConfig:
    replan_hz: int = 2
    replicas: int = 32
    horizon_steps: int = 80
    seed: int = 0
    sample_within_mode: bool = False

    def validate(self, patch_len: int) -> int:
        return compute_alpha(self.replan_hz, patch_len)


def compute_alpha(replan_hz: int, patch_len: int) -> int:
    """Steps executed per replan cycle; must divide the 10 Hz step rate and
    fit inside one planned patch."""
    if replan_hz not in REPLAN_RATES or 10 % replan_hz != 0:
        raise ConfigError(
            f"replan_hz={replan_hz} invalid: alpha = 10/replan_hz must be a whole "
            f"number of 0.1 s steps (choose from {REPLAN_RATES})"
        )
    alpha = 10 // replan_hz
    if alpha > patch_len:
        raise ConfigError(
            f"replan_hz={replan_hz} gives alpha={alpha} steps per cycle, but only "
            f"patch_len={patch_len} steps are planned per patch (need alpha <= patch_len)"
        )
    return alpha


def sample_mode(pi: np.ndarray, rng: np.random.Generator) -> int:
    """Categorical draw from a mode simplex."""
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 1 or abs(float(pi.sum()) - 1.0) > 1e-6 or np.any(pi < 0):
        raise ValueError("pi must be a 1-D probability simplex")
    r = rng.random()
    return int(min(np.searchsorted(np.cumsum(pi), r, side="right"), len(pi) - 1))


@dataclass
class _StaticScene:
    map_anchors: np.ndarray
    map_kinds: np.ndarray
    kind_idx: np.ndarray
    bboxes: np.ndarray


def _sample_local_states(
    mu: np.ndarray, b: np.ndarray, kappa: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Optional within-mode sampling: Laplace noise on positions/velocities,
    von Mises on yaw."""
    local = mu.copy()
    u = rng.random(b.shape) - 0.5
    local[:, :5] = mu[:, :5] - b * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    local[:, 5] = np.array(
        [rng.vonmises(mu[t, 5], kappa[t]) for t in range(mu.shape[0])]
    )
    local[:, 5] = wrap_angle(local[:, 5])
    return local


def step_cycle(
    model: SimulatorModel,
    static: _StaticScene,
    states: np.ndarray,
    alpha: int,
    rng_for_agent,
    sample_within_mode: bool = False,
) -> np.ndarray:
    """Advance the world by one replan cycle; returns extended state array.

    The input history is never mutated; the returned array appends alpha
    fresh steps per agent (invalid rows for agents without a valid anchor).
    """
    n_agents = states.shape[0]
    scene = build_scene_inputs(
        static.map_anchors,
        static.map_kinds,
        states,
        static.kind_idx,
        static.bboxes,
        model.cfg,
        with_targets=False,
    )
    mp, rows = model.predict_last_patch(scene)
    pi = mp.pi.data
    mu = mp.mu.data
    b = mp.b.data
    kappa = mp.kappa.data

    new = np.zeros((n_agents, alpha, 7))
    consistency_gap = 0.0
    for r_i, agent in enumerate(rows):
        rng = rng_for_agent(int(agent))
        k = sample_mode(pi[r_i], rng)
        local = mu[r_i, k]
        if sample_within_mode:
            local = _sample_local_states(local, b[r_i, k], kappa[r_i, k], rng)
        anchor = states[agent, -1]
        glob = local_states_to_global(local, anchor)
        new[agent] = glob[:alpha]
        # diagnostic: disagreement between emitted positions and integrating
        # the emitted velocities (positions are taken from the location
        # parameters, never integrated)
        prev = np.concatenate([anchor[None, :], glob[:alpha]], axis=0)
        integ = prev[:-1, :2] + prev[:-1, 3:5] * 0.1
        consistency_gap += float(np.abs(integ - glob[:alpha, :2]).mean())
    if len(rows):
        logger.debug("position/velocity consistency gap: %.4f m", consistency_gap / len(rows))
    return np.concatenate([states, new], axis=1)


@dataclass
class ReplicaSet:
    """R independent rollouts of one scenario (history prefix included)."""

    scenario_id: str
    config: RolloutConfig
    patch_len: int
    base: Scenario
    states: np.ndarray  # [R, A, history + horizon, 7]

    @property
    def n_replicas(self) -> int:
        return int(self.states.shape[0])

    def replica_scenario(self, r: int) -> Scenario:
        agents = [
            Agent(meta=agent.meta, states=self.states[r, i].copy())
            for i, agent in enumerate(self.base.agents)
        ]
        return Scenario(
            scenario_id=f"{self.scenario_id}#r{r}",
            map=self.base.map,
            agents=agents,
            dt=self.base.dt,
            history_len=self.base.history_len,
        )


def rollout(model: SimulatorModel, scenario: Scenario, cfg: RolloutConfig) -> ReplicaSet:
    """Simulate R replicas of horizon_steps new steps after the history."""
    ell = model.cfg.patch_len
    alpha = cfg.validate(ell)
    h = scenario.history_len
    if h - (h % ell) < ell:
        raise DataError(
            f"scenario {scenario.scenario_id}: {h}-step prefix is shorter than one "
            f"patch context (patch_len={ell})"
        )
    states_all, kind_idx, bboxes = scenario_arrays(scenario)
    prefix = states_all[:, :h, :].copy()
    anchors, kinds = segments_to_arrays(segment_map(scenario.map))
    static = _StaticScene(anchors, kinds, kind_idx, bboxes)

    replicas = []
    for rep in range(cfg.replicas):
        states = prefix.copy()
        done = 0
        cycle = 0
        while done < cfg.horizon_steps:
            step = min(alpha, cfg.horizon_steps - done)
            rng_for_agent = lambda agent, _rep=rep, _cyc=cycle: rngmod.stream(
                cfg.seed, "rollout", _rep, _cyc, agent
            )
            states = step_cycle(
                model, static, states, step, rng_for_agent, cfg.sample_within_mode
            )
            done += step
            cycle += 1
        replicas.append(states)
    return ReplicaSet(
        scenario_id=scenario.scenario_id,
        config=cfg,
        patch_len=ell,
        base=scenario,
        states=np.stack(replicas, axis=0),
    )


# ---------------------------------------------------------------------------
# dump format: scenario-schema JSON so replicas reload as scenarios

def save_replica_set(rs: ReplicaSet, path) -> None:
    base_doc = scenario_to_doc(rs.base)
    doc = {
        "scenario_id": rs.scenario_id,
        "dt": float(rs.base.dt),
        "history_len": int(rs.base.history_len),
        "patch_len": int(rs.patch_len),
        "config": asdict(rs.config),
        "map": base_doc["map"],
        "agents_meta": [
            {"id": a.meta.id, "kind": a.meta.kind.value, "bbox": list(a.meta.bbox)}
            for a in rs.base.agents
        ],
        "replicas": [
            {"index": r, "states": rs.states[r].tolist()} for r in range(rs.n_replicas)
        ],
    }
    jsonio.dump(doc, path)


def load_replica_set(path, base: Scenario | None = None) -> ReplicaSet:
    doc = jsonio.load(path)
    try:
        cfg = RolloutConfig(**doc["config"])
        states = np.asarray(
            [rep["states"] for rep in doc["replicas"]], dtype=np.float64
        )
        if base is None:
            polylines = [
                Polyline(PolylineKind(p["kind"]), np.asarray(p["points"], dtype=np.float64))
                for p in doc["map"]["polylines"]
            ]
            agents = [
                Agent(
                    AgentMeta(m["id"], AgentKind(m["kind"]), tuple(m["bbox"])),
                    states[0, i].copy(),
                )
                for i, m in enumerate(doc["agents_meta"])
            ]
            base = Scenario(
                scenario_id=str(doc["scenario_id"]),
                map=VectorMap(polylines),
                agents=agents,
                dt=float(doc["dt"]),
                history_len=int(doc["history_len"]),
            )
    except KeyError as e:
        raise DataError(f"{path}: missing field {e.args[0]!r}") from e
    return ReplicaSet(
        scenario_id=str(doc["scenario_id"]),
        config=cfg,
        patch_len=int(doc["patch_len"]),
        base=base,
        states=states,
    )
