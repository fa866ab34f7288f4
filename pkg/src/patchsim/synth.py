"""Synthetic scenario generation.

Templates build a vector map plus route polylines, then drive agents along
their routes with a bounded-acceleration speed controller and a simple
car-following/merge-yield rule. Everything is deterministic under the
supplied seed. Routes are sized so no agent reaches the end of its path
within the episode; curvature and speed changes are rich enough that
constant-velocity extrapolation has a clearly nonzero displacement error.

Road-edge polylines follow the package convention: the driveable region is
to the left of the edge's direction of travel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigError
from .relgeom import wrap_angle
from .scenario import (
    DT,
    Agent,
    AgentKind,
    AgentMeta,
    Polyline,
    PolylineKind,
    Scenario,
    VectorMap,
)

TEMPLATES = ("straight_road", "curved_road", "four_way_intersection", "merge")

LANE_W = 3.5
CAR_LEN = 4.6
CAR_W = 2.0
CAR_H = 1.7


@dataclass(frozen=True)
class SynthConfig:
    template: str = "straight_road"
    n_agents: int = 2
    num_steps: int = 91
    history_len: int = 11
    v_min: float = 3.0
    v_max: float = 12.0
    accel_max: float = 2.5
    decel_max: float = 4.0
    gap_min: float = 6.0
    headway: float = 1.2

    def check(self) -> None:
        if self.template not in TEMPLATES and self.template != "mix":
            raise ConfigError(
                f"unknown template {self.template!r}; expected one of {TEMPLATES} or 'mix'"
            )
        if not (1 <= self.n_agents <= 128):
            raise ConfigError(f"n_agents must be in [1,128], got {self.n_agents}")
        if self.num_steps < self.history_len:
            raise ConfigError("num_steps must be >= history_len")
        if not (0.0 < self.v_min <= self.v_max):
            raise ConfigError("need 0 < v_min <= v_max")


class Route:
    """Arclength-parameterized path used both as lane geometry and as the
    coordinate along which agents progress."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.points[:, :2], axis=0), axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.cum[-1])

    def sample(self, s: float) -> tuple[np.ndarray, float]:
        """Return (xyz position, heading) at clamped arclength s."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(i, len(self.cum) - 2)
        seg_len = self.cum[i + 1] - self.cum[i]
        frac = 0.0 if seg_len == 0 else (s - self.cum[i]) / seg_len
        pos = self.points[i] + frac * (self.points[i + 1] - self.points[i])
        d = self.points[i + 1, :2] - self.points[i, :2]
        heading = float(np.arctan2(d[1], d[0]))
        return pos, heading


def _polyline(kind: PolylineKind, pts) -> Polyline:
    return Polyline(kind, np.asarray(pts, dtype=np.float64))


def _line(a, b, step=5.0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / step)) + 1)
    return a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)


def _arc(center, radius, theta0, theta1, step=2.0) -> np.ndarray:
    span = abs(theta1 - theta0) * radius
    n = max(3, int(np.ceil(span / step)) + 1)
    th = np.linspace(theta0, theta1, n)
    return np.stack(
        [center[0] + radius * np.cos(th), center[1] + radius * np.sin(th), np.zeros(n)],
        axis=1,
    )


def _offset_curve(pts: np.ndarray, offset: float) -> np.ndarray:
    """Parallel curve at signed lateral offset (positive = left of travel)."""
    d = np.gradient(pts[:, :2], axis=0)
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    tang = d / np.where(norms == 0, 1.0, norms)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    out = pts.copy()
    out[:, :2] = pts[:, :2] + offset * normal
    return out


@dataclass
class _World:
    polylines: list[Polyline] = field(default_factory=list)
    routes: list[Route] = field(default_factory=list)


def _straight_road(rng: np.random.Generator, min_len: float) -> _World:
    length = max(float(rng.uniform(150.0, 220.0)), min_len)
    n_lanes = int(rng.integers(1, 3))
    w = _World()
    for lane in range(n_lanes):
        y = (lane - (n_lanes - 1) / 2.0) * LANE_W
        pts = _line([0.0, y, 0.0], [length, y, 0.0])
        w.polylines.append(_polyline(PolylineKind.LANE_CENTER, pts))
        w.routes.append(Route(pts))
    half = n_lanes * LANE_W / 2.0 + 0.5
    w.polylines.append(
        _polyline(PolylineKind.ROAD_EDGE, _line([0.0, -half, 0.0], [length, -half, 0.0]))
    )
    w.polylines.append(
        _polyline(PolylineKind.ROAD_EDGE, _line([length, half, 0.0], [0.0, half, 0.0]))
    )
    return w


def _curved_road(rng: np.random.Generator, min_len: float) -> _World:
    """Chain of alternating-curvature arcs (an S road) of at least min_len."""
    n_lanes = int(rng.integers(1, 3))
    ds = 2.0
    pos = np.array([0.0, 0.0])
    heading = 0.0
    pts = [np.array([0.0, 0.0, 0.0])]
    total = 0.0
    sign = 1.0 if rng.random() < 0.5 else -1.0
    target = max(min_len, 160.0) + 10.0
    while total < target:
        radius = float(rng.uniform(40.0, 90.0))
        sweep = float(rng.uniform(np.deg2rad(25.0), np.deg2rad(60.0)))
        arc_len = radius * sweep
        n = max(2, int(np.ceil(arc_len / ds)))
        for _ in range(n):
            heading += sign * (sweep / n)
            pos = pos + (arc_len / n) * np.array([np.cos(heading), np.sin(heading)])
            pts.append(np.array([pos[0], pos[1], 0.0]))
            total += arc_len / n
        sign = -sign
    center = np.asarray(pts)
    w = _World()
    for lane in range(n_lanes):
        off = (lane - (n_lanes - 1) / 2.0) * LANE_W
        lane_pts = _offset_curve(center, off)
        w.polylines.append(_polyline(PolylineKind.LANE_CENTER, lane_pts))
        w.routes.append(Route(lane_pts))
    half = n_lanes * LANE_W / 2.0 + 0.5
    w.polylines.append(_polyline(PolylineKind.ROAD_EDGE, _offset_curve(center, -half)))
    w.polylines.append(
        _polyline(PolylineKind.ROAD_EDGE, _offset_curve(center, half)[::-1].copy())
    )
    return w


def _four_way_intersection(rng: np.random.Generator, min_len: float) -> _World:
    leg = max(80.0, min_len / 2.0 + 10.0)
    off = LANE_W / 2.0
    w = _World()
    for x0, y0, x1, y1 in (
        (-leg, -off, leg, -off),  # eastbound
        (leg, off, -leg, off),  # westbound
        (off, -leg, off, leg),  # northbound
        (-off, leg, -off, -leg),  # southbound
    ):
        w.polylines.append(
            _polyline(PolylineKind.LANE_CENTER, _line([x0, y0, 0.0], [x1, y1, 0.0]))
        )

    east_straight = Route(_line([-leg, -off, 0.0], [leg, -off, 0.0]))
    north_straight = Route(_line([off, -leg, 0.0], [off, leg, 0.0]))
    # left turn east -> north: straight approach, quarter arc, straight exit
    r_turn = off + 3.0 * LANE_W
    xc, yc = off - r_turn, -off + r_turn
    east_to_north = Route(
        np.concatenate(
            [
                _line([-leg, -off, 0.0], [xc, -off, 0.0]),
                _arc([xc, yc], r_turn, -np.pi / 2, 0.0)[1:],
                _line([off, yc, 0.0], [off, leg, 0.0])[1:],
            ]
        )
    )
    w.routes = [east_straight, north_straight, east_to_north]

    half = LANE_W + 0.5
    for x0, y0, x1, y1 in (
        (-leg, -half, -half, -half),
        (half, -half, leg, -half),
        (leg, half, half, half),
        (-half, half, -leg, half),
        (-half, -half, -half, -leg),
        (half, -leg, half, -half),
        (half, half, half, leg),
        (-half, leg, -half, half),
    ):
        w.polylines.append(
            _polyline(PolylineKind.ROAD_EDGE, _line([x0, y0, 0.0], [x1, y1, 0.0]))
        )
    w.polylines.append(
        _polyline(
            PolylineKind.CROSSWALK,
            _line([-half - 1.0, -half - 2.0, 0.0], [half + 1.0, -half - 2.0, 0.0]),
        )
    )
    return w


def _merge(rng: np.random.Generator, min_len: float) -> _World:
    """Two inbound lanes joining into one outbound lane (Y merge)."""
    approach = 80.0
    outbound = max(130.0, min_len)
    ramp_angle = np.deg2rad(16.0)
    w = _World()
    main_pts = _line([-approach, 0.0, 0.0], [outbound, 0.0, 0.0])
    ramp_start = np.array(
        [-approach * np.cos(ramp_angle), -approach * np.sin(ramp_angle), 0.0]
    )
    ramp_approach = _line(ramp_start, [0.0, 0.0, 0.0])
    ramp_pts = np.concatenate([ramp_approach, _line([0.0, 0.0, 0.0], [outbound, 0.0, 0.0])[1:]])
    w.routes = [Route(main_pts), Route(ramp_pts)]
    w.polylines.append(_polyline(PolylineKind.LANE_CENTER, main_pts))
    w.polylines.append(_polyline(PolylineKind.LANE_CENTER, ramp_approach))
    half = LANE_W / 2.0 + 0.5
    w.polylines.append(
        _polyline(
            PolylineKind.ROAD_EDGE, _line([-approach, -half, 0.0], [outbound, -half, 0.0])
        )
    )
    w.polylines.append(
        _polyline(
            PolylineKind.ROAD_EDGE, _line([outbound, half, 0.0], [-approach, half, 0.0])
        )
    )
    return w


_BUILDERS = {
    "straight_road": _straight_road,
    "curved_road": _curved_road,
    "four_way_intersection": _four_way_intersection,
    "merge": _merge,
}


def _route_conflicts(routes: list[Route]) -> dict[tuple[int, int], tuple[float, float]]:
    """Arclengths of the closest approach for each route pair that gets
    within lane-overlap distance (crossings, merges, shared segments)."""
    dense = []
    for r in routes:
        s_grid = np.arange(0.0, r.length + 0.5, 1.0)
        dense.append((s_grid, np.stack([r.sample(s)[0][:2] for s in s_grid])))
    out: dict[tuple[int, int], tuple[float, float]] = {}
    for a in range(len(routes)):
        for b in range(a + 1, len(routes)):
            sa, pa = dense[a]
            sb, pb = dense[b]
            d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
            ia, ib = np.unravel_index(int(np.argmin(d2)), d2.shape)
            if d2[ia, ib] < 2.0**2:
                out[(a, b)] = (float(sa[ia]), float(sb[ib]))
                out[(b, a)] = (float(sb[ib]), float(sa[ia]))
    return out


def synth_generate(config: SynthConfig, seed: int, scenario_id: str | None = None) -> Scenario:
    """Generate one deterministic scenario from a template."""
    config.check()
    template = config.template
    if template == "mix":
        raise ConfigError("template 'mix' is a corpus-level choice; pick one template here")
    rng = rngmod.stream(seed, "synth", template)

    n_agents = config.n_agents
    travel = config.v_max * config.num_steps * DT
    min_len = 20.0 + n_agents * (CAR_LEN + 26.0) + travel + 15.0
    world = _BUILDERS[template](rng, min_len)
    conflicts = _route_conflicts(world.routes)

    n_routes = len(world.routes)
    route_of = [int(rng.integers(0, n_routes)) for _ in range(n_agents)]
    if template == "merge" and n_agents >= 2:
        route_of[0], route_of[1] = 0, 1  # force one agent per merging branch

    # stagger start arclengths per route so agents never spawn overlapping
    s0 = np.zeros(n_agents)
    per_route_rank: dict[int, int] = {}
    for i in range(n_agents):
        r = route_of[i]
        rank = per_route_rank.get(r, 0)
        per_route_rank[r] = rank + 1
        s0[i] = rng.uniform(2.0, 14.0) + rank * (CAR_LEN + float(rng.uniform(14.0, 26.0)))
    if template == "merge" and n_agents >= 2:
        # time both branches to reach the conflict point within about 1 s
        c_main, c_ramp = conflicts[(0, 1)]
        v_mid = 0.5 * (config.v_min + config.v_max)
        d_to_merge = float(rng.uniform(28.0, 40.0))
        s0[0] = c_main - d_to_merge
        s0[1] = max(c_ramp - d_to_merge + v_mid * float(rng.uniform(-1.0, 1.0)), 1.0)

    # enforce spawn spacing along each route (push leaders forward)
    for r in set(route_of):
        members = sorted((i for i in range(n_agents) if route_of[i] == r), key=lambda i: s0[i])
        for prev, cur in zip(members[:-1], members[1:]):
            s0[cur] = max(s0[cur], s0[prev] + CAR_LEN + 8.0)

    v0 = rng.uniform(config.v_min, config.v_max, size=n_agents)
    v_des = rng.uniform(config.v_min, config.v_max, size=n_agents)

    num_steps = config.num_steps
    s = s0.copy()
    v = v0.copy()
    states = np.zeros((n_agents, num_steps, 7))
    for t in range(num_steps):
        accel = np.clip(0.8 * (v_des - v), -config.accel_max, config.accel_max)
        for i in range(n_agents):
            gap = np.inf
            for j in range(n_agents):
                if i == j:
                    continue
                if route_of[j] == route_of[i]:
                    ahead = s[j] - s[i]
                    if ahead > 0:
                        gap = min(gap, ahead - CAR_LEN)
                else:
                    conflict = conflicts.get((route_of[i], route_of[j]))
                    if conflict is None:
                        continue
                    # progress of each agent relative to the conflict point
                    ri = s[i] - conflict[0]
                    rj = s[j] - conflict[1]
                    if rj > ri and ri > -60.0 and rj - ri < 60.0:
                        gap = min(gap, (rj - ri) - CAR_LEN)
            safe = config.gap_min + v[i] * config.headway
            if gap < safe:
                brake = -config.decel_max * (1.0 - max(gap, 0.0) / safe)
                accel[i] = min(accel[i], brake)
        v = np.clip(v + accel * DT, 0.0, config.v_max)
        s = s + v * DT
        for i in range(n_agents):
            pos, heading = world.routes[route_of[i]].sample(s[i])
            states[i, t] = [
                pos[0],
                pos[1],
                pos[2],
                v[i] * np.cos(heading),
                v[i] * np.sin(heading),
                wrap_angle(heading),
                1.0,
            ]

    agents = [
        Agent(AgentMeta(f"a{i}", AgentKind.VEHICLE, (CAR_LEN, CAR_W, CAR_H)), states[i])
        for i in range(n_agents)
    ]
    scn = Scenario(
        scenario_id=scenario_id or f"{template}_{seed:08d}",
        map=VectorMap(world.polylines),
        agents=agents,
        dt=DT,
        history_len=config.history_len,
    )
    scn.validate()
    return scn


def generate_corpus(config: SynthConfig, n: int, seed: int) -> list[Scenario]:
    """Generate n scenarios; template 'mix' cycles the template list."""
    out = []
    for i in range(n):
        cfg_i = config
        if config.template == "mix":
            cfg_i = replace(config, template=TEMPLATES[i % len(TEMPLATES)])
        sub_seed = int(rngmod.stream(seed, "corpus", i).integers(0, 2**31 - 1))
        out.append(synth_generate(cfg_i, sub_seed, scenario_id=f"{cfg_i.template}_{i:05d}"))
    return out
