"""Open-loop driving metrics: sub-scores, PDMS/EPDMS composites, reports.

Composite formulas:
    PDMS  = NC * DAC * (5*EP + 5*TTC + 2*C) / 12
    EPDMS = NC * DAC * DDC * TLC * (5*EP + 5*TTC + 2*LK + 2*HC + 2*EC) / 16

Grid-world sub-scores are computed from a predicted trajectory and one
scene record; thresholds (1.0 m discs, 1.0 s TTC gate, 4 m/s^2 / 8 m/s^3
comfort limits) are local calibrations. Composites are always computed per
scenario and then averaged; averaging sub-scores first gives a different
number, and that order is deliberately not used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import gridworld as gw
from .dataset import SceneRecord

TTC_HORIZON = 1.0
COMFORT_ACCEL = 4.0
COMFORT_JERK = 8.0
EP_MIN_EXPERT_PROGRESS = 0.1
COLLISION_DIST = 2.0 * gw.DISC_RADIUS


@dataclass
class SubScoresV1:
    nc: float
    dac: float
    ttc: float
    comfort: float
    ep: float


@dataclass
class SubScoresV2:
    nc: float
    dac: float
    ddc: float
    tlc: float
    ep: float
    ttc: float
    lk: float
    hc: float
    ec: float


def _check_unit_range(scores) -> None:
    for f in fields(scores):
        v = getattr(scores, f.name)
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"sub-score {f.name}={v} outside [0, 1]")


def pdms(s: SubScoresV1) -> float:
    _check_unit_range(s)
    return s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.comfort) / 12.0


def epdms(s: SubScoresV2) -> float:
    _check_unit_range(s)
    weighted = (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.lk + 2.0 * s.hc + 2.0 * s.ec) / 16.0
    return s.nc * s.dac * s.ddc * s.tlc * weighted


# ---------------------------------------------------------------------------
# grid-world sub-score computation


def _active_agent_futures(record: SceneRecord) -> np.ndarray:
    idx = [i for i in range(gw.MAX_AGENTS) if record.agent_mask >> i & 1]
    return record.agent_futures[idx] if idx else np.zeros((0, gw.HORIZON_STEPS, 2))


def _with_origin(traj: np.ndarray) -> np.ndarray:
    return np.vstack([[0.0, 0.0], np.asarray(traj, dtype=np.float64)])


def _agent_tracks_with_origin(futures: np.ndarray) -> np.ndarray:
    """Prepend a linearly back-extrapolated t=0 position to each future."""
    if len(futures) == 0:
        return np.zeros((0, gw.HORIZON_STEPS + 1, 2))
    p0 = futures[:, 0] - (futures[:, 1] - futures[:, 0])
    return np.concatenate([p0[:, None, :], futures], axis=1)


def _min_separation(ego_track: np.ndarray, agent_track: np.ndarray) -> float:
    """Exact minimum distance between two piecewise-linearly moving points."""
    best = np.inf
    for i in range(len(ego_track) - 1):
        p = ego_track[i] - agent_track[i]
        q = ego_track[i + 1] - agent_track[i + 1]
        d = q - p
        denom = float(d @ d)
        tau = 0.0 if denom < 1e-12 else float(np.clip(-(p @ d) / denom, 0.0, 1.0))
        best = min(best, float(np.hypot(*(p + tau * d))))
    return best


def check_collision(predicted: np.ndarray, record: SceneRecord) -> bool:
    """Swept-disc overlap of the plan against timestamped agent futures."""
    futures = _active_agent_futures(record)
    if len(futures) == 0:
        return False
    ego = _with_origin(predicted)
    for track in _agent_tracks_with_origin(futures):
        if _min_separation(ego, track) < COLLISION_DIST:
            return True
    return False


def _implied_velocities(track: np.ndarray) -> np.ndarray:
    return np.diff(track, axis=0) / gw.DT


def check_ttc(predicted: np.ndarray, record: SceneRecord,
              horizon: float = TTC_HORIZON) -> bool:
    """True iff constant-velocity extrapolation from every plan timestep
    stays collision-free for `horizon` seconds."""
    futures = _active_agent_futures(record)
    if len(futures) == 0:
        return True
    ego = _with_origin(predicted)
    ego_v = _implied_velocities(ego)
    for track in _agent_tracks_with_origin(futures):
        agent_v = _implied_velocities(track)
        for i in range(len(ego_v)):
            p = ego[i] - track[i]
            v = ego_v[i] - agent_v[i]
            # min over t in [0, horizon] of |p + v t|
            vv = float(v @ v)
            t_star = 0.0 if vv < 1e-12 else float(np.clip(-(p @ v) / vv, 0.0, horizon))
            if float(np.hypot(*(p + t_star * v))) < COLLISION_DIST:
                return False
    return True


def check_comfort(predicted: np.ndarray) -> bool:
    """Acceleration and jerk bounds from 2 Hz finite differences."""
    track = _with_origin(predicted)
    v = _implied_velocities(track)
    a = np.diff(v, axis=0) / gw.DT
    j = np.diff(a, axis=0) / gw.DT
    amax = float(np.hypot(a[:, 0], a[:, 1]).max()) if len(a) else 0.0
    jmax = float(np.hypot(j[:, 0], j[:, 1]).max()) if len(j) else 0.0
    return amax <= COMFORT_ACCEL and jmax <= COMFORT_JERK


def scene_geometry(record: SceneRecord) -> tuple[np.ndarray, list[np.ndarray]]:
    """Route and corridor polylines implied by the record's command."""
    if record.command in (gw.LEFT, gw.RIGHT):
        route = gw.junction_route(record.command)
        network = [gw.straight_route(), gw.junction_route(gw.LEFT),
                   gw.junction_route(gw.RIGHT)]
    else:
        route = gw.straight_route()
        network = [gw.straight_route()]
    return route, network


def _to_world(points_ego: np.ndarray, record: SceneRecord) -> np.ndarray:
    pos = record.ego_state[:2]
    heading = float(record.ego_state[2])
    return gw.ego_to_world(points_ego, pos, heading)


def check_drivable_area(predicted: np.ndarray, record: SceneRecord) -> bool:
    _, network = scene_geometry(record)
    d = gw.distance_to_polylines(_to_world(predicted, record), network)
    return bool((d <= gw.LANE_HALFWIDTH).all())


def ego_progress(predicted: np.ndarray, record: SceneRecord) -> float:
    """Progress along the route centerline relative to the expert's."""
    route, _ = scene_geometry(record)
    s0, _ = gw.project_to_polyline(route, record.ego_state[:2])

    def progress(traj: np.ndarray) -> float:
        end_w = _to_world(traj, record)[-1]
        s1, _ = gw.project_to_polyline(route, end_w)
        return max(0.0, s1 - s0)

    expert = progress(record.expert_traj)
    if expert < EP_MIN_EXPERT_PROGRESS:
        return 1.0
    return float(np.clip(progress(predicted) / expert, 0.0, 1.0))


def score_scenario(predicted: np.ndarray, record: SceneRecord) -> SubScoresV1:
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape != (gw.HORIZON_STEPS, 2) or not np.all(np.isfinite(predicted)):
        raise ValueError(f"malformed trajectory: shape {predicted.shape}")
    return SubScoresV1(
        nc=0.0 if check_collision(predicted, record) else 1.0,
        dac=1.0 if check_drivable_area(predicted, record) else 0.0,
        ttc=1.0 if check_ttc(predicted, record) else 0.0,
        comfort=1.0 if check_comfort(predicted) else 0.0,
        ep=ego_progress(predicted, record),
    )


# ---------------------------------------------------------------------------
# aggregates and reports


def ade(predicted: np.ndarray, expert: np.ndarray) -> float:
    """Mean Euclidean waypoint displacement."""
    predicted = np.asarray(predicted, dtype=np.float64)
    expert = np.asarray(expert, dtype=np.float64)
    if predicted.shape != expert.shape:
        raise ValueError(f"trajectory length mismatch: {predicted.shape} vs {expert.shape}")
    return float(np.hypot(*(predicted - expert).T).mean())


@dataclass
class ScenarioResult:
    scenario_id: str
    ade_m: float
    scores: SubScoresV1

    @property
    def pdms(self) -> float:
        return pdms(self.scores)


def collision_rate(results: list[ScenarioResult]) -> float:
    if not results:
        raise ValueError("no results to aggregate")
    return sum(1 for r in results if r.scores.nc == 0.0) / len(results)


def aggregate(results: list[ScenarioResult]) -> dict[str, float]:
    """Means of per-scenario metrics; composites averaged after scoring."""
    if not results:
        raise ValueError("no results to aggregate")
    out = {
        "ade_m": float(np.mean([r.ade_m for r in results])),
        "collision_rate": collision_rate(results),
        "pdms": float(np.mean([r.pdms for r in results])),
    }
    for f in fields(SubScoresV1):
        out[f.name] = float(np.mean([getattr(r.scores, f.name) for r in results]))
    return out


def write_report_csv(path: str | Path, results: list[ScenarioResult]) -> None:
    """Per-scenario rows plus a trailing aggregate row flagged AGG."""
    agg = aggregate(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "ade_m", "nc", "dac", "ttc", "comfort", "ep", "pdms"])
        for r in results:
            s = r.scores
            w.writerow([r.scenario_id, f"{r.ade_m:.6f}", s.nc, s.dac, s.ttc,
                        s.comfort, f"{s.ep:.6f}", f"{r.pdms:.6f}"])
        w.writerow(["AGG", f"{agg['ade_m']:.6f}", agg["nc"], agg["dac"], agg["ttc"],
                    agg["comfort"], f"{agg['ep']:.6f}", f"{agg['pdms']:.6f}"])
