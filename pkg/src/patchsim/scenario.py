"""Scenario data model, text-file schema, and patch segmentation.

A scenario is a vector map plus per-agent state time series sampled at a
fixed 0.1 s step. States are stored per agent as a float64 array with
columns (x, y, z, vx, vy, yaw, valid); yaws are wrapped into (-pi, pi] and
invalid steps carry no semantic content.

The on-disk schema is canonical JSON (see jsonio): top-level keys
``scenario_id``, ``dt``, ``history_len``, ``map.polylines[]{kind, points}``,
``agents[]{id, kind, bbox, states}``. Floats use 17 significant digits, so
write -> load -> write is byte-stable.

Road-edge orientation convention: the driveable region lies to the LEFT of
each road_edge polyline's direction of travel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import jsonio
from .errors import DataError
from .relgeom import wrap_angle

DT = 0.1
STATE_COLS = 7  # x, y, z, vx, vy, yaw, valid
HISTORY_LEN_DEFAULT = 11


class AgentKind(enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class PolylineKind(enum.Enum):
    LANE_CENTER = "lane_center"
    ROAD_EDGE = "road_edge"
    CROSSWALK = "crosswalk"
    OTHER = "other"


AGENT_KIND_INDEX = {k: i for i, k in enumerate(AgentKind)}
POLYLINE_KIND_INDEX = {k: i for i, k in enumerate(PolylineKind)}


@dataclass(frozen=True)
class AgentState:
    position: tuple[float, float, float]
    velocity: tuple[float, float]
    yaw: float
    valid: bool

    @staticmethod
    def from_row(row: np.ndarray) -> "AgentState":
        return AgentState(
            position=(float(row[0]), float(row[1]), float(row[2])),
            velocity=(float(row[3]), float(row[4])),
            yaw=float(row[5]),
            valid=bool(row[6] > 0.5),
        )


@dataclass(frozen=True)
class AgentMeta:
    id: str
    kind: AgentKind
    bbox: tuple[float, float, float]  # length, width, height (m)


@dataclass
class Polyline:
    kind: PolylineKind
    points: np.ndarray  # [n, 3]


@dataclass
class VectorMap:
    polylines: list[Polyline] = field(default_factory=list)

    def by_kind(self, kind: PolylineKind) -> list[Polyline]:
        return [p for p in self.polylines if p.kind is kind]


@dataclass
class Agent:
    meta: AgentMeta
    states: np.ndarray  # [T, 7]

    def state(self, t: int) -> AgentState:
        return AgentState.from_row(self.states[t])


@dataclass
class Scenario:
    scenario_id: str
    map: VectorMap
    agents: list[Agent]
    dt: float = DT
    history_len: int = HISTORY_LEN_DEFAULT

    @property
    def num_steps(self) -> int:
        return int(self.agents[0].states.shape[0]) if self.agents else 0

    def validate(self) -> None:
        if abs(self.dt - DT) > 1e-12:
            raise DataError(f"scenario {self.scenario_id}: dt must be {DT}, got {self.dt}")
        if not self.agents:
            raise DataError(f"scenario {self.scenario_id}: no agents")
        t_ref = self.agents[0].states.shape[0]
        if t_ref < self.history_len:
            raise DataError(
                f"scenario {self.scenario_id}: T={t_ref} < history_len={self.history_len}"
            )
        for agent in self.agents:
            s = agent.states
            if s.ndim != 2 or s.shape[1] != STATE_COLS:
                raise DataError(f"agent {agent.meta.id}: states must be [T,{STATE_COLS}]")
            if s.shape[0] != t_ref:
                raise DataError(
                    f"agent {agent.meta.id}: has {s.shape[0]} steps, expected {t_ref}"
                )
            if not np.all(np.isfinite(s)):
                bad = np.argwhere(~np.isfinite(s))[0]
                raise DataError(
                    f"agent {agent.meta.id}: non-finite state at step {int(bad[0])}"
                )
            yaw = s[:, 5]
            if np.any(yaw <= -np.pi) or np.any(yaw > np.pi):
                step = int(np.argwhere((yaw <= -np.pi) | (yaw > np.pi))[0])
                raise DataError(f"agent {agent.meta.id}: unwrapped yaw at step {step}")
            if not np.all((s[:, 6] == 0.0) | (s[:, 6] == 1.0)):
                step = int(np.argwhere((s[:, 6] != 0.0) & (s[:, 6] != 1.0))[0])
                raise DataError(f"agent {agent.meta.id}: valid flag not 0/1 at step {step}")
            if min(agent.meta.bbox) <= 0:
                raise DataError(f"agent {agent.meta.id}: non-positive bbox {agent.meta.bbox}")
        for i, poly in enumerate(self.map.polylines):
            pts = poly.points
            if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
                raise DataError(f"polyline {i}: needs >= 2 points of dim 3")
            if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
                raise DataError(f"polyline {i}: consecutive duplicate points")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        if (
            self.scenario_id != other.scenario_id
            or self.dt != other.dt
            or self.history_len != other.history_len
            or len(self.agents) != len(other.agents)
            or len(self.map.polylines) != len(other.map.polylines)
        ):
            return False
        for a, b in zip(self.map.polylines, other.map.polylines):
            if a.kind is not b.kind or not np.array_equal(a.points, b.points):
                return False
        for a, b in zip(self.agents, other.agents):
            if a.meta != b.meta or not np.array_equal(a.states, b.states):
                return False
        return True


@dataclass
class TrajectoryPatch:
    """ell consecutive states of one agent; tau is 1-based so the patch
    covers steps ((tau-1)*ell+1)..(tau*ell) of the aligned window."""

    agent_index: int
    tau: int
    states: np.ndarray  # [ell, 7]


def aligned_offset(num_steps: int, patch_len: int) -> int:
    """Leading steps dropped so patch boundaries land on the final step."""
    return num_steps % patch_len


def make_patches(scenario: Scenario, patch_len: int) -> list[list[TrajectoryPatch]]:
    """Segment every agent's trajectory into backward-aligned patches.

    Patches are aligned to the final step; a leading remainder of
    T mod patch_len steps is dropped. Requires room for at least one
    context patch and one target patch.
    """
    if patch_len < 1:
        raise DataError(f"patch_len must be >= 1, got {patch_len}")
    t_total = scenario.num_steps
    offset = aligned_offset(t_total, patch_len)
    if t_total - offset < 2 * patch_len:
        raise DataError(
            f"scenario {scenario.scenario_id}: T={t_total} with patch_len={patch_len} "
            "is too short to form a context and a target patch"
        )
    n_patch = (t_total - offset) // patch_len
    out: list[list[TrajectoryPatch]] = []
    for idx, agent in enumerate(scenario.agents):
        win = agent.states[offset:]
        patches = [
            TrajectoryPatch(idx, p + 1, win[p * patch_len : (p + 1) * patch_len].copy())
            for p in range(n_patch)
        ]
        out.append(patches)
    return out


# ---------------------------------------------------------------------------
# file I/O

def scenario_to_doc(s: Scenario) -> dict:
    return {
        "scenario_id": s.scenario_id,
        "dt": float(s.dt),
        "history_len": int(s.history_len),
        "map": {
            "polylines": [
                {"kind": p.kind.value, "points": p.points.tolist()}
                for p in s.map.polylines
            ]
        },
        "agents": [
            {
                "id": a.meta.id,
                "kind": a.meta.kind.value,
                "bbox": [float(v) for v in a.meta.bbox],
                "states": a.states.tolist(),
            }
            for a in s.agents
        ],
    }


def save_scenario(s: Scenario, path) -> None:
    s.validate()
    jsonio.dump(scenario_to_doc(s), path)


def scenario_from_doc(doc: dict, source: str = "<doc>") -> Scenario:
    try:
        polylines = [
            Polyline(PolylineKind(p["kind"]), np.asarray(p["points"], dtype=np.float64))
            for p in doc["map"]["polylines"]
        ]
        agents = []
        for a in doc["agents"]:
            states = np.asarray(a["states"], dtype=np.float64)
            if states.ndim != 2 or states.shape[1] != STATE_COLS:
                raise DataError(
                    f"{source}: agent {a['id']}: states must be rows of {STATE_COLS} values"
                )
            states = states.copy()
            states[:, 5] = wrap_angle(states[:, 5])
            agents.append(
                Agent(
                    AgentMeta(str(a["id"]), AgentKind(a["kind"]), tuple(float(v) for v in a["bbox"])),
                    states,
                )
            )
        scenario = Scenario(
            scenario_id=str(doc.get("scenario_id", "unnamed")),
            map=VectorMap(polylines),
            agents=agents,
            dt=float(doc["dt"]),
            history_len=int(doc["history_len"]),
        )
    except KeyError as e:
        raise DataError(f"{source}: missing field {e.args[0]!r}") from e
    except ValueError as e:
        raise DataError(f"{source}: {e}") from e
    scenario.validate()
    return scenario


def load_scenario(path) -> Scenario:
    return scenario_from_doc(jsonio.load(path), source=str(path))
