"""Record-per-line trajectory files.

Line 1 is a header object::

    {"format": "rlmia-trajectories", "version": 1, "env": <name>, "state_dim": d_S,
     "action_dim": d_A, "t_max": T_max, "env_spec": {...}, "source_tag": <tag>,
     "decorrelated": <bool>, "count": <n>}

Every following line is one trajectory, with fields in this order::

    {"id": i, "seed": s, "T": T, "states": [T*d_S], "actions": [T*d_A],
     "rewards": [T], "next_states": [T*d_S], "terminals": [T]}

Vectors are flattened row-major (tuple by tuple). Values are float32 written
as their exact decimal expansion, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from rlmia.core import STORAGE_DTYPE, SourceTag, Trajectory, TrajectoryBatch, TrajectoryError
from rlmia.envs.base import EnvSpec

FORMAT = "rlmia-trajectories"
VERSION = 1


def _flat(rows) -> list[float]:
    return [float(v) for v in np.asarray(rows, dtype=STORAGE_DTYPE).reshape(-1)]


def save_trajectories(batch: TrajectoryBatch, spec: EnvSpec, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT, "version": VERSION, "env": spec.name, "state_dim": spec.state_dim,
        "action_dim": spec.action_dim, "t_max": spec.t_max, "env_spec": spec.to_dict(),
        "source_tag": batch.source_tag.value, "decorrelated": batch.decorrelated, "count": len(batch),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, (seed, traj) in enumerate(zip(batch.seed_record, batch.trajectories)):
            tr = traj.transitions
            rec = {
                "id": i, "seed": int(seed), "T": traj.T,
                "states": _flat([t.state for t in tr]),
                "actions": _flat([t.action for t in tr]),
                "rewards": _flat([t.reward for t in tr]),
                "next_states": _flat([t.next_state for t in tr]),
                "terminals": [int(t.terminal) for t in tr],
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def read_header(path) -> dict:
    with open(path) as fh:
        header = json.loads(fh.readline())
    if header.get("format") != FORMAT:
        raise TrajectoryError(f"{path}: not a trajectory file")
    if header.get("version") != VERSION:
        raise TrajectoryError(f"{path}: unsupported version {header.get('version')}")
    return header


def load_trajectories(path, expected_spec: EnvSpec | None = None) -> tuple[TrajectoryBatch, EnvSpec]:
    """Load a batch; rejects files whose header dims disagree with ``expected_spec`` or the records."""
    header = read_header(path)
    spec = EnvSpec.from_dict(header["env_spec"])
    if (spec.state_dim, spec.action_dim, spec.t_max) != (header["state_dim"], header["action_dim"], header["t_max"]):
        raise TrajectoryError(f"{path}: header dims disagree with the embedded env spec")
    if expected_spec is not None and (
            (spec.state_dim, spec.action_dim) != (expected_spec.state_dim, expected_spec.action_dim)
            or spec.t_max > expected_spec.t_max):
        raise TrajectoryError(f"{path}: header dims (d_S={spec.state_dim}, d_A={spec.action_dim}, "
                              f"T_max={spec.t_max}) do not match the expected environment")
    d_s, d_a = spec.state_dim, spec.action_dim
    trajs, seeds = [], []
    with open(path) as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            rec = json.loads(line)
            T = int(rec["T"])
            try:
                states = np.asarray(rec["states"], dtype=STORAGE_DTYPE).reshape(T, d_s)
                actions = np.asarray(rec["actions"], dtype=STORAGE_DTYPE).reshape(T, d_a)
                next_states = np.asarray(rec["next_states"], dtype=STORAGE_DTYPE).reshape(T, d_s)
                rewards = np.asarray(rec["rewards"], dtype=STORAGE_DTYPE).reshape(T)
                terminals = np.asarray(rec["terminals"], dtype=bool).reshape(T)
            except ValueError as exc:
                raise TrajectoryError(f"{path}:{lineno}: record does not match header dims") from exc
            traj = Trajectory.from_arrays(states, actions, rewards, next_states, terminals, seed=int(rec["seed"]))
            if not header["decorrelated"]:
                traj.validate(t_max=spec.t_max)
            trajs.append(traj)
            seeds.append(int(rec["seed"]))
    if len(trajs) != header["count"]:
        raise TrajectoryError(f"{path}: header declares {header['count']} trajectories, found {len(trajs)}")
    batch = TrajectoryBatch(tuple(trajs), SourceTag(header["source_tag"]), tuple(seeds),
                            decorrelated=bool(header["decorrelated"]))
    return batch, spec
