"""Deterministic synthetic 2-D driving world.

Straight lanes and a fixed three-way junction, scripted agents, a
pure-pursuit expert with gap keeping, and a 32x32 top-down ego-centric
raster. Everything is a pure function of state; all randomness enters
through explicit integer seeds at scenario construction time.

Units: meters, seconds, radians. One simulation step is 0.5 s (2 Hz),
matching the waypoint rate of the 3 s / 6-waypoint trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DT = 0.5
HORIZON_STEPS = 6
CLIP_LEN = 16
V_MAX = 15.0
LANE_HALFWIDTH = 3.5
WORKSPACE_BOUND = 25.0
DISC_RADIUS = 1.0
MAX_AGENTS = 4

ACCEL_LIMIT = 3.0       # service braking bound for the expert
ACCEL_PUSH = 1.5        # acceleration bound
JERK_LIMIT = 7.0        # commanded accel slew bound, below the 8 comfort gate
GAP_BASE = 6.0          # desired standstill gap to a lead vehicle
GAP_TIME = 1.0          # time-headway component of the desired gap
GAP_KP = 0.5

COMMANDS = ("FOLLOW", "LEFT", "RIGHT", "STOP")
FOLLOW, LEFT, RIGHT, STOP = range(4)

BEHAVIOR_CONSTANT, BEHAVIOR_LEAD, BEHAVIOR_CROSSING = range(3)

SCENARIO_KINDS = ("cruise", "lead_follow", "junction_turn", "stop", "crossing_agent")

JUNCTION_X = 40.0
TURN_RADIUS = 8.0

IMG_SIZE = 32
VIEW_AHEAD = 24.0   # meters of view in front of the ego
VIEW_BEHIND = 8.0
COLOR_BACKGROUND = (32, 32, 32)
COLOR_LANE = (96, 96, 96)
COLOR_EGO = (230, 60, 60)
COLOR_AGENT = (60, 120, 230)


# ---------------------------------------------------------------------------
# polyline geometry


def _arc_points(center: np.ndarray, radius: float, phi0: float, phi1: float,
                n: int = 11) -> np.ndarray:
    phi = np.linspace(phi0, phi1, n)
    return np.stack([center[0] + radius * np.cos(phi),
                     center[1] + radius * np.sin(phi)], axis=1)


def straight_route() -> np.ndarray:
    return np.array([[-100.0, 0.0], [400.0, 0.0]])


def junction_route(turn: int) -> np.ndarray:
    """Approach along +x, quarter-circle turn at the junction, long exit leg."""
    approach = np.array([[-100.0, 0.0], [JUNCTION_X, 0.0]])
    if turn == LEFT:
        arc = _arc_points(np.array([JUNCTION_X, TURN_RADIUS]), TURN_RADIUS,
                          -np.pi / 2, 0.0)
        exit_leg = np.array([[JUNCTION_X + TURN_RADIUS, 300.0]])
    elif turn == RIGHT:
        arc = _arc_points(np.array([JUNCTION_X, -TURN_RADIUS]), TURN_RADIUS,
                          np.pi / 2, 0.0)
        exit_leg = np.array([[JUNCTION_X + TURN_RADIUS, -300.0]])
    else:
        raise ValueError(f"junction turn must be LEFT or RIGHT, got {turn}")
    return np.concatenate([approach, arc[1:], exit_leg], axis=0)


def polyline_lengths(poly: np.ndarray) -> np.ndarray:
    seg = np.diff(poly, axis=0)
    return np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])


def project_to_polyline(poly: np.ndarray, p: np.ndarray) -> tuple[float, float]:
    """Return (arc length of closest point, distance to it)."""
    a = poly[:-1]
    b = poly[1:]
    ab = b - a
    seg_len2 = (ab * ab).sum(axis=1)
    t = np.clip(((p - a) * ab).sum(axis=1) / np.maximum(seg_len2, 1e-12), 0.0, 1.0)
    closest = a + t[:, None] * ab
    d = np.hypot(*(p - closest).T)
    i = int(np.argmin(d))
    s = polyline_lengths(poly)[i] + t[i] * np.sqrt(seg_len2[i])
    return float(s), float(d[i])


def point_at_arclength(poly: np.ndarray, s: float) -> np.ndarray:
    lengths = polyline_lengths(poly)
    s = float(np.clip(s, 0.0, lengths[-1]))
    i = int(np.searchsorted(lengths, s, side="right") - 1)
    i = min(i, len(poly) - 2)
    seg = poly[i + 1] - poly[i]
    seg_len = np.hypot(*seg)
    frac = 0.0 if seg_len < 1e-12 else (s - lengths[i]) / seg_len
    return poly[i] + frac * seg


def distance_to_polylines(points: np.ndarray, polys: list[np.ndarray]) -> np.ndarray:
    """Min distance from each point (N,2) to any segment of any polyline."""
    best = np.full(len(points), np.inf)
    for poly in polys:
        a = poly[:-1]
        ab = poly[1:] - a
        seg_len2 = np.maximum((ab * ab).sum(axis=1), 1e-12)
        ap = points[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab[None, :, :]).sum(axis=2) / seg_len2[None, :], 0.0, 1.0)
        closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        d = np.hypot(*(points[:, None, :] - closest).transpose(2, 0, 1)).min(axis=1)
        best = np.minimum(best, d)
    return best


def world_to_ego(points: np.ndarray, ego_pos: np.ndarray, ego_heading: float) -> np.ndarray:
    c, s = np.cos(ego_heading), np.sin(ego_heading)
    rot = np.array([[c, s], [-s, c]])
    return (np.atleast_2d(points) - ego_pos) @ rot.T


def ego_to_world(points: np.ndarray, ego_pos: np.ndarray, ego_heading: float) -> np.ndarray:
    c, s = np.cos(ego_heading), np.sin(ego_heading)
    rot = np.array([[c, -s], [s, c]])
    return np.atleast_2d(points) @ rot.T + ego_pos


# ---------------------------------------------------------------------------
# state


@dataclass
class Agent:
    pos: np.ndarray            # world frame (2,)
    heading: float
    speed: float
    behavior: int              # BEHAVIOR_*
    base_speed: float = 0.0

    def copy(self) -> "Agent":
        return Agent(self.pos.copy(), self.heading, self.speed, self.behavior,
                     self.base_speed)


@dataclass
class SceneState:
    ego_pos: np.ndarray
    ego_heading: float
    ego_speed: float
    command: int
    route: np.ndarray                    # centerline of the commanded route
    network: list[np.ndarray]            # all corridor centerlines in the scene
    lane_halfwidth: float
    agents: list[Agent]
    v_cruise: float
    time_index: int = 0
    seed: int = 0
    ego_prev_accel: float = 0.0
    has_junction: bool = False

    def copy(self) -> "SceneState":
        return replace(self, ego_pos=self.ego_pos.copy(),
                       agents=[a.copy() for a in self.agents])


@dataclass
class EgoAction:
    speed_cmd: float
    yaw_rate: float


# ---------------------------------------------------------------------------
# dynamics


def _step_agent(agent: Agent, others: list[Agent]) -> Agent:
    nxt = agent.copy()
    if agent.behavior == BEHAVIOR_LEAD:
        # keep a speed-dependent gap to any slower agent ahead on its heading
        v_des = agent.base_speed
        fwd = np.array([np.cos(agent.heading), np.sin(agent.heading)])
        for other in others:
            rel = other.pos - agent.pos
            along = float(rel @ fwd)
            lateral = abs(float(rel @ np.array([-fwd[1], fwd[0]])))
            if along > 0 and lateral < 2.0:
                want = GAP_BASE + GAP_TIME * agent.speed
                if along < want:
                    v_des = min(v_des, max(0.0, other.speed + GAP_KP * (along - want)))
        dv = np.clip(v_des - agent.speed, -ACCEL_LIMIT * DT, ACCEL_PUSH * DT)
        nxt.speed = max(0.0, agent.speed + float(dv))
    nxt.pos = agent.pos + nxt.speed * DT * np.array([np.cos(agent.heading),
                                                     np.sin(agent.heading)])
    return nxt


def step_dynamics(state: SceneState, action: EgoAction) -> SceneState:
    """Advance ego (kinematic unicycle) and scripted agents by one 0.5 s step.

    The ego translates with the commanded speed along its current heading,
    then rotates by yaw_rate * dt.
    """
    v_new = float(np.clip(action.speed_cmd, 0.0, V_MAX))
    heading_vec = np.array([np.cos(state.ego_heading), np.sin(state.ego_heading)])
    new_pos = state.ego_pos + v_new * DT * heading_vec
    new_heading = state.ego_heading + action.yaw_rate * DT
    agents = [_step_agent(a, [o for o in state.agents if o is not a])
              for a in state.agents]
    return replace(state, ego_pos=new_pos, ego_heading=new_heading,
                   ego_speed=v_new, agents=agents, time_index=state.time_index + 1,
                   ego_prev_accel=(v_new - state.ego_speed) / DT)


# ---------------------------------------------------------------------------
# expert policy


def _route_for_command(state: SceneState, command: int) -> tuple[np.ndarray, bool]:
    """Commanded route, or a FOLLOW fallback flag when no branch exists."""
    if command in (LEFT, RIGHT) and not state.has_junction:
        return straight_route(), True
    if command in (LEFT, RIGHT):
        return junction_route(command), False
    return state.route if command == state.command else straight_route(), False


def expert_control(state: SceneState, command: int,
                   route: np.ndarray | None = None) -> EgoAction:
    """One pure-pursuit + gap-keeping control step."""
    if route is None:
        route, _ = _route_for_command(state, command)
    s0, _ = project_to_polyline(route, state.ego_pos)
    v = state.ego_speed

    if command == STOP:
        v_des = 0.0
    else:
        v_des = state.v_cruise
        fwd = np.array([np.cos(state.ego_heading), np.sin(state.ego_heading)])
        for agent in state.agents:
            if agent.behavior == BEHAVIOR_CROSSING:
                continue
            s_a, d_a = project_to_polyline(route, agent.pos)
            ahead = float((agent.pos - state.ego_pos) @ fwd) > 0.0
            if d_a < 2.0 and ahead and s_a > s0:
                gap = s_a - s0
                want = GAP_BASE + GAP_TIME * v
                if gap < want:
                    v_des = min(v_des, max(0.0, agent.speed + GAP_KP * (gap - want)))

    a_des = (v_des - v) / DT
    a_lo = max(-ACCEL_LIMIT, state.ego_prev_accel - JERK_LIMIT * DT)
    a_hi = min(ACCEL_PUSH, state.ego_prev_accel + JERK_LIMIT * DT)
    a_cmd = float(np.clip(a_des, a_lo, a_hi))
    v_cmd = max(0.0, v + a_cmd * DT)

    lookahead = float(np.clip(1.0 + 0.8 * v, 2.0, 6.0))
    target_w = point_at_arclength(route, s0 + lookahead)
    target_e = world_to_ego(target_w, state.ego_pos, state.ego_heading)[0]
    alpha = float(np.arctan2(target_e[1], target_e[0]))
    curvature = 2.0 * np.sin(alpha) / lookahead
    yaw_rate = float(np.clip(v_cmd * curvature, -1.5, 1.5))
    return EgoAction(speed_cmd=v_cmd, yaw_rate=yaw_rate)


def expert_rollout(state: SceneState, command: int,
                   n_steps: int = HORIZON_STEPS) -> tuple[np.ndarray, np.ndarray, bool]:
    """Closed-loop rollout of the expert for n steps.

    Returns (ego waypoints in start-state ego frame [n,2],
             agent positions in the same frame [n_agents, n, 2],
             FOLLOW-fallback flag).
    """
    route, fallback = _route_for_command(state, command)
    cmd = FOLLOW if fallback else command
    cur = state.copy()
    ego_pts = np.zeros((n_steps, 2))
    agent_pts = np.zeros((len(state.agents), n_steps, 2))
    for k in range(n_steps):
        action = expert_control(cur, cmd, route)
        cur = step_dynamics(cur, action)
        ego_pts[k] = cur.ego_pos
        for i, agent in enumerate(cur.agents):
            agent_pts[i, k] = agent.pos
    ego_frame = world_to_ego(ego_pts, state.ego_pos, state.ego_heading)
    agents_frame = np.stack(
        [world_to_ego(agent_pts[i], state.ego_pos, state.ego_heading)
         for i in range(len(state.agents))], axis=0) if state.agents else agent_pts
    return ego_frame, agents_frame, fallback


def expert_policy(state: SceneState, command: int) -> tuple[np.ndarray, bool]:
    """6-waypoint expert trajectory in the ego frame, plus a fallback flag."""
    traj, _, fallback = expert_rollout(state, command)
    return traj, fallback


# ---------------------------------------------------------------------------
# rendering


def render_frame(state: SceneState) -> np.ndarray:
    """32x32x3 uint8 top-down raster centered on the ego.

    View spans (-8, 24] m ahead/behind and (-16, 16] m laterally; rows run
    from far-ahead to behind, columns from left to right. One pixel per
    meter; each agent and the ego occupy exactly the cell containing their
    center.
    """
    rows = np.arange(IMG_SIZE)
    cols = np.arange(IMG_SIZE)
    x_c = (VIEW_AHEAD - 0.5) - rows
    y_c = (IMG_SIZE / 2 - 0.5) - cols
    xg, yg = np.meshgrid(x_c, y_c, indexing="ij")
    centers_e = np.stack([xg.ravel(), yg.ravel()], axis=1)
    centers_w = ego_to_world(centers_e, state.ego_pos, state.ego_heading)
    dist = distance_to_polylines(centers_w, state.network)
    img = np.empty((IMG_SIZE, IMG_SIZE, 3), dtype=np.uint8)
    img[:] = COLOR_BACKGROUND
    lane = (dist <= state.lane_halfwidth).reshape(IMG_SIZE, IMG_SIZE)
    img[lane] = COLOR_LANE

    def draw_point(p_world: np.ndarray, color: tuple[int, int, int]) -> None:
        p = world_to_ego(p_world, state.ego_pos, state.ego_heading)[0]
        i = int(np.floor(VIEW_AHEAD - p[0]))
        j = int(np.floor(IMG_SIZE / 2 - p[1]))
        if 0 <= i < IMG_SIZE and 0 <= j < IMG_SIZE:
            img[i, j] = color

    for agent in state.agents:
        draw_point(agent.pos, COLOR_AGENT)
    draw_point(state.ego_pos, COLOR_EGO)
    return img


# ---------------------------------------------------------------------------
# scenario construction


def _base_state(rng: np.random.Generator, command: int, route: np.ndarray,
                network: list[np.ndarray], v_cruise: float,
                has_junction: bool = False,
                x_range: tuple[float, float] = (-5.0, 15.0)) -> SceneState:
    x0 = rng.uniform(*x_range)
    y0 = rng.uniform(-1.0, 1.0)
    heading = rng.uniform(-0.08, 0.08)
    return SceneState(
        ego_pos=np.array([x0, y0]),
        ego_heading=heading,
        ego_speed=v_cruise,
        command=command,
        route=route,
        network=network,
        lane_halfwidth=LANE_HALFWIDTH,
        agents=[],
        v_cruise=v_cruise,
        has_junction=has_junction,
    )


def make_scenario(kind: str, rng: np.random.Generator) -> SceneState:
    """Build the initial state for one clip of the given scenario kind."""
    if kind == "cruise":
        v = rng.uniform(3.0, 6.5)
        return _base_state(rng, FOLLOW, straight_route(), [straight_route()], v)

    if kind == "lead_follow":
        v = rng.uniform(4.0, 6.5)
        state = _base_state(rng, FOLLOW, straight_route(), [straight_route()], v)
        gap = rng.uniform(12.0, 18.0)
        lead_v = rng.uniform(1.5, 3.5)
        state.agents.append(Agent(
            pos=np.array([state.ego_pos[0] + gap, 0.0]),
            heading=0.0, speed=lead_v, behavior=BEHAVIOR_LEAD, base_speed=lead_v))
        return state

    if kind == "junction_turn":
        turn = LEFT if rng.uniform() < 0.5 else RIGHT
        route = junction_route(turn)
        network = [straight_route(), junction_route(LEFT), junction_route(RIGHT)]
        v = rng.uniform(3.0, 5.0)
        return _base_state(rng, turn, route, network, v, has_junction=True,
                           x_range=(12.0, 22.0))

    if kind == "stop":
        v = rng.uniform(3.0, 6.0)
        state = _base_state(rng, STOP, straight_route(), [straight_route()], v)
        state.agents.append(Agent(
            pos=np.array([state.ego_pos[0] + 30.0, 0.0]),
            heading=0.0, speed=0.0, behavior=BEHAVIOR_CONSTANT))
        return state

    if kind == "crossing_agent":
        v = rng.uniform(3.0, 5.0)
        state = _base_state(rng, FOLLOW, straight_route(), [straight_route()], v,
                            x_range=(0.0, 10.0))
        v_a = rng.uniform(2.5, 4.0)
        y_start = -12.0
        # agent fully clears the lane band at least 2 s before the ego arrives
        t_exit = (abs(y_start) + LANE_HALFWIDTH + 2.0) / v_a
        x_cross = state.ego_pos[0] + v * (t_exit + 2.0 + rng.uniform(0.0, 1.0))
        state.agents.append(Agent(
            pos=np.array([x_cross, y_start]),
            heading=np.pi / 2, speed=v_a, behavior=BEHAVIOR_CROSSING))
        return state

    raise ValueError(f"unknown scenario kind: {kind!r}")
