"""Clip simulation and the bit-exact binary dataset format.

File layout (little-endian):
    magic  b"DW0D", version u32, record count u64
    fixed 3337-byte records:
        clip id u32, frame index u16, command u8, pad u8,
        ego state 4 x f32 (x, y, heading, speed),
        image 3072 bytes (32x32x3),
        expert trajectory 12 x f32 (x1, y1, ..., x6, y6, ego frame),
        agent presence bitmask u8,
        agent futures 4 agents x 6 steps x 2 x f32 (ego frame,
        zero-filled for absent agents)

Agent futures and the expert trajectory share the record's ego frame and
its 2 Hz timestamps (t+0.5 s ... t+3.0 s).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gridworld as gw

MAGIC = b"DW0D"
VERSION = 1
RECORD_SIZE = 4 + 2 + 1 + 1 + 16 + 3072 + 48 + 1 + 192
HEADER = struct.Struct("<4sIQ")

CLIP_ID_STRIDE = 100003  # clip ids from distinct seeds stay disjoint below this many clips


class DataError(ValueError):
    pass


@dataclass
class SceneRecord:
    clip_id: int
    frame_index: int
    command: int
    ego_state: np.ndarray        # (4,) x, y, heading, speed
    image: np.ndarray            # (32, 32, 3) uint8
    expert_traj: np.ndarray      # (6, 2) ego frame
    agent_mask: int              # presence bitmask, bit i = agent slot i
    agent_futures: np.ndarray    # (4, 6, 2) ego frame

    def n_agents(self) -> int:
        return bin(self.agent_mask).count("1")


def pack_record(rec: SceneRecord) -> bytes:
    parts = [
        struct.pack("<IHBB", rec.clip_id & 0xFFFFFFFF, rec.frame_index,
                    rec.command, 0),
        np.asarray(rec.ego_state, dtype="<f4").tobytes(),
        np.ascontiguousarray(rec.image, dtype=np.uint8).tobytes(),
        np.asarray(rec.expert_traj, dtype="<f4").tobytes(),
        struct.pack("<B", rec.agent_mask),
        np.asarray(rec.agent_futures, dtype="<f4").tobytes(),
    ]
    blob = b"".join(parts)
    assert len(blob) == RECORD_SIZE
    return blob


def unpack_record(blob: bytes) -> SceneRecord:
    clip_id, frame_index, command, _pad = struct.unpack_from("<IHBB", blob, 0)
    off = 8
    ego = np.frombuffer(blob, "<f4", 4, off).astype(np.float64)
    off += 16
    image = np.frombuffer(blob, np.uint8, 3072, off).reshape(32, 32, 3).copy()
    off += 3072
    traj = np.frombuffer(blob, "<f4", 12, off).astype(np.float64).reshape(6, 2)
    off += 48
    (mask,) = struct.unpack_from("<B", blob, off)
    off += 1
    futures = np.frombuffer(blob, "<f4", 48, off).astype(np.float64).reshape(4, 6, 2)
    return SceneRecord(clip_id=clip_id, frame_index=frame_index, command=command,
                       ego_state=ego, image=image, expert_traj=traj,
                       agent_mask=mask, agent_futures=futures)


def write_dataset(path: str | Path, records: list[SceneRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, len(records)))
        for rec in records:
            fh.write(pack_record(rec))


def read_dataset(path: str | Path) -> list[SceneRecord]:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size or blob[:4] != MAGIC:
        raise DataError(f"{path}: not a dataset file (bad magic)")
    magic, version, count = HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    want = HEADER.size + count * RECORD_SIZE
    if len(blob) != want:
        raise DataError(f"{path}: size {len(blob)} != expected {want}")
    return [unpack_record(blob[HEADER.size + i * RECORD_SIZE:
                               HEADER.size + (i + 1) * RECORD_SIZE])
            for i in range(count)]


def validate_dataset_file(path: str | Path) -> list[str]:
    """Format check; returns a list of problems (empty = valid)."""
    problems: list[str] = []
    try:
        records = read_dataset(path)
    except DataError as exc:
        return [str(exc)]
    for i, rec in enumerate(records):
        if rec.command > 3:
            problems.append(f"record {i}: bad command {rec.command}")
        if not np.all(np.isfinite(rec.ego_state)):
            problems.append(f"record {i}: non-finite ego state")
        if rec.expert_traj.shape != (6, 2) or not np.all(np.isfinite(rec.expert_traj)):
            problems.append(f"record {i}: bad expert trajectory")
        elif np.abs(rec.expert_traj).max() > gw.WORKSPACE_BOUND:
            problems.append(f"record {i}: trajectory outside workspace bound")
        if rec.agent_mask >> gw.MAX_AGENTS:
            problems.append(f"record {i}: presence bits beyond {gw.MAX_AGENTS} agents")
        absent = [a for a in range(gw.MAX_AGENTS) if not rec.agent_mask >> a & 1]
        if absent and np.abs(rec.agent_futures[absent]).max() > 0:
            problems.append(f"record {i}: absent agent slots not zero-filled")
    return problems


# ---------------------------------------------------------------------------
# generation


def simulate_clip(master_seed: int, clip_index: int, kind: str) -> list[SceneRecord]:
    """Simulate one 16-frame clip; the ego tracks its own expert policy."""
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, clip_index]))
    state = gw.make_scenario(kind, rng)
    state.seed = master_seed
    clip_id = (master_seed * CLIP_ID_STRIDE + clip_index) % (1 << 32)
    records = []
    for frame in range(gw.CLIP_LEN):
        traj, agent_fut, _ = gw.expert_rollout(state, state.command)
        futures = np.zeros((gw.MAX_AGENTS, gw.HORIZON_STEPS, 2))
        mask = 0
        for i in range(min(len(state.agents), gw.MAX_AGENTS)):
            futures[i] = agent_fut[i]
            mask |= 1 << i
        records.append(SceneRecord(
            clip_id=clip_id,
            frame_index=frame,
            command=state.command,
            ego_state=np.array([state.ego_pos[0], state.ego_pos[1],
                                state.ego_heading, state.ego_speed]),
            image=gw.render_frame(state),
            expert_traj=traj,
            agent_mask=mask,
            agent_futures=futures,
        ))
        action = gw.expert_control(state, state.command)
        state = gw.step_dynamics(state, action)
    return records


def _quota_kinds(n_clips: int, mix: dict[str, float]) -> list[str]:
    """Largest-remainder allocation of scenario kinds, then a fixed interleave."""
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-6:
        raise DataError(f"scenario mix fractions sum to {total}, expected 1")
    for kind in mix:
        if kind not in gw.SCENARIO_KINDS:
            raise DataError(f"unknown scenario kind in mix: {kind!r}")
    exact = {k: n_clips * f for k, f in mix.items() if f > 0}
    counts = {k: int(np.floor(v)) for k, v in exact.items()}
    short = n_clips - sum(counts.values())
    by_remainder = sorted(exact, key=lambda k: (-(exact[k] - counts[k]), k))
    for k in by_remainder[:short]:
        counts[k] += 1
    out: list[str] = []
    pools = {k: counts[k] for k in sorted(counts)}
    while len(out) < n_clips:
        for k in sorted(pools, key=lambda k: (-pools[k], k)):
            if pools[k] > 0:
                out.append(k)
                pools[k] -= 1
                break
    return out


DEFAULT_MIX = {"cruise": 0.3, "lead_follow": 0.2, "junction_turn": 0.2,
               "stop": 0.15, "crossing_agent": 0.15}


def generate_dataset(n_frames: int, seed: int, mix: dict[str, float] | None = None,
                     path: str | Path | None = None) -> list[SceneRecord]:
    """Deterministic dataset of 16-frame clips; optionally written to `path`."""
    if n_frames < 1:
        raise DataError(f"n_frames must be >= 1, got {n_frames}")
    mix = dict(mix or DEFAULT_MIX)
    n_clips = -(-n_frames // gw.CLIP_LEN)
    kinds = _quota_kinds(n_clips, mix)
    records: list[SceneRecord] = []
    for ci, kind in enumerate(kinds):
        records.extend(simulate_clip(seed, ci, kind))
    records = records[:n_frames]
    if path is not None:
        write_dataset(path, records)
    return records


def records_by_clip(records: list[SceneRecord]) -> dict[int, list[SceneRecord]]:
    clips: dict[int, list[SceneRecord]] = {}
    for rec in records:
        clips.setdefault(rec.clip_id, []).append(rec)
    for recs in clips.values():
        recs.sort(key=lambda r: r.frame_index)
    return clips
