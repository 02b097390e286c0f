"""Data formatter: action matrices, labelled pairs, collective stacks and decorrelation.

Only trajectories and the public environment spec flow in here; nothing in
this module knows how the target policy was trained.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from rlmia.core import SourceTag, Trajectory, TrajectoryBatch

INDIVIDUAL = "individual"
COLLECTIVE = "collective"
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_RATIOS = (0.7, 0.1, 0.2)
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ActionTrajectory:
    """Actions of one trajectory as a ``d_A x T`` matrix."""

    actions: np.ndarray
    origin: SourceTag
    seed: int

    @property
    def T(self) -> int:
        return self.actions.shape[1]


@dataclass(frozen=True)
class PairedSample:
    matrix: np.ndarray  # (2 d_A, L): candidate actions on top, model output below
    label: int
    seed: int


@dataclass(frozen=True)
class CollectiveSample:
    tensor: np.ndarray  # (2 d_A, L, m)
    label: int
    seeds: tuple[int, ...]

    @property
    def m(self) -> int:
        return self.tensor.shape[-1]


def extract_actions(trajectory: Trajectory, origin: SourceTag | str = SourceTag.MEMBER,
                    seed: int | None = None) -> ActionTrajectory:
    seed = trajectory.seed if seed is None else seed
    return ActionTrajectory(trajectory.actions().T.copy(), SourceTag(origin), -1 if seed is None else int(seed))


def clip_or_pad(actions: ActionTrajectory | np.ndarray, L: int) -> np.ndarray:
    """Trim to the first ``L`` columns, or repeat the last column up to length ``L``."""
    mat = actions.actions if isinstance(actions, ActionTrajectory) else np.asarray(actions)
    if L < 1:
        raise DatasetError(f"clipping length must be positive, got {L}")
    T = mat.shape[1]
    if T < 1:
        raise DatasetError("cannot pad an empty action trajectory")
    if T >= L:
        return mat[:, :L].copy()
    tail = np.repeat(mat[:, -1:], L - T, axis=1)
    return np.concatenate([mat, tail], axis=1)


def make_pair(train_at: ActionTrajectory, output_at: ActionTrajectory, L: int, label: int) -> PairedSample:
    if train_at.seed != output_at.seed:
        raise DatasetError(f"seed mismatch: candidate {train_at.seed} vs output {output_at.seed}; "
                           "initial states differ")
    if output_at.origin is not SourceTag.MODEL_OUTPUT:
        raise DatasetError(f"second trajectory must be a model output, got {output_at.origin.value}")
    if label not in (0, 1):
        raise DatasetError("label must be 0 or 1")
    top = clip_or_pad(train_at, L)
    bottom = clip_or_pad(output_at, L)
    return PairedSample(np.concatenate([top, bottom], axis=0), int(label), train_at.seed)


def split_of_seed(seed: int, ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS, salt: str = "") -> str:
    """Deterministic train/val/test assignment from a hash of the seed."""
    digest = hashlib.sha256(f"{salt}:{int(seed)}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    edges = np.cumsum(np.asarray(ratios, dtype=np.float64) / np.sum(ratios))
    for name, edge in zip(SPLITS, edges):
        if u < edge:
            return name
    return SPLITS[len(edges) - 1]


@dataclass
class AttackDataset:
    """Stacked samples with labels, seeds and split tags.

    ``x`` is ``(N, 2 d_A, L)`` in individual mode and ``(N, 2 d_A, L, m)`` in
    collective mode; ``seeds`` is ``(N,)`` or ``(N, m)`` respectively.
    """

    mode: str
    x: np.ndarray
    y: np.ndarray
    seeds: np.ndarray
    split: np.ndarray
    action_dim: int
    L: int
    m: int = 1
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (INDIVIDUAL, COLLECTIVE):
            raise DatasetError(f"unknown mode {self.mode!r}")
        n = len(self.y)
        if not (len(self.x) == len(self.seeds) == len(self.split) == n):
            raise DatasetError("x, y, seeds and split must have equal length")
        expected = (2 * self.action_dim, self.L) + ((self.m,) if self.mode == COLLECTIVE else ())
        if self.x.shape[1:] != expected:
            raise DatasetError(f"sample shape {self.x.shape[1:]} != {expected}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, split: str) -> "AttackDataset":
        mask = self.split == split
        return AttackDataset(self.mode, self.x[mask], self.y[mask], self.seeds[mask], self.split[mask],
                             self.action_dim, self.L, self.m, dict(self.provenance))

    def samples(self):
        for i in range(len(self)):
            if self.mode == INDIVIDUAL:
                yield PairedSample(self.x[i], int(self.y[i]), int(self.seeds[i]))
            else:
                yield CollectiveSample(self.x[i], int(self.y[i]), tuple(int(s) for s in self.seeds[i]))

    def label_counts(self, split: str | None = None) -> dict[int, int]:
        y = self.y if split is None else self.y[self.split == split]
        return {0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))}

    def manifest(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "mode": self.mode,
            "action_dim": self.action_dim,
            "L": self.L,
            "m": self.m,
            "n_samples": len(self),
            "sample_shape": list(self.sample_shape),
            "dtype": str(self.x.dtype),
            "splits": {s: self.label_counts(s) for s in SPLITS},
            "provenance": self.provenance,
        }

    def manifest_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "x.npy", self.x)
        np.save(d / "y.npy", self.y)
        np.save(d / "seeds.npy", self.seeds)
        np.save(d / "split.npy", self.split.astype("U5"))
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "AttackDataset":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        if man.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported dataset manifest version {man.get('version')}")
        ds = cls(man["mode"], np.load(d / "x.npy"), np.load(d / "y.npy"), np.load(d / "seeds.npy"),
                 np.load(d / "split.npy"), int(man["action_dim"]), int(man["L"]), int(man["m"]),
                 man.get("provenance", {}))
        if list(ds.sample_shape) != man["sample_shape"] or len(ds) != man["n_samples"]:
            raise DatasetError("arrays on disk do not match the manifest")
        return ds


def build_individual_dataset(member: TrajectoryBatch, nonmember: TrajectoryBatch, outputs: TrajectoryBatch,
                             L: int, split_ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
                             split_salt: str = "", provenance: dict | None = None) -> AttackDataset:
    """Positive pairs (member, matched output) and negative pairs (nonmember, matched output)."""
    if len(member) == 0 or len(nonmember) == 0:
        raise DatasetError("both member and nonmember trajectories are required")
    if outputs.source_tag is not SourceTag.MODEL_OUTPUT:
        raise DatasetError("outputs must be tagged model_output")
    if set(member.seed_record) & set(nonmember.seed_record):
        raise DatasetError("member and nonmember seeds overlap")
    out_by_seed = outputs.by_seed()
    missing = [s for s in (*member.seed_record, *nonmember.seed_record) if s not in out_by_seed]
    if missing:
        raise DatasetError(f"no matched model output for seeds {missing[:20]}"
                           + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""))

    xs, ys, seeds = [], [], []
    for batch, label, origin in ((member, 1, SourceTag.MEMBER), (nonmember, 0, SourceTag.NONMEMBER)):
        for seed, traj in zip(batch.seed_record, batch.trajectories):
            cand = extract_actions(traj, origin, seed)
            out = extract_actions(out_by_seed[seed], SourceTag.MODEL_OUTPUT, seed)
            pair = make_pair(cand, out, L, label)
            xs.append(pair.matrix)
            ys.append(label)
            seeds.append(seed)
    split = np.array([split_of_seed(s, split_ratios, split_salt) for s in seeds])
    ds = AttackDataset(INDIVIDUAL, np.stack(xs), np.array(ys, dtype=np.int64), np.array(seeds, dtype=np.int64),
                       split, member.trajectories[0].actions().shape[1], int(L), 1,
                       dict(provenance or {}, decorrelated=bool(member.decorrelated)))
    _check_split_labels(ds)
    return ds


def _check_split_labels(ds: AttackDataset) -> None:
    for s in SPLITS:
        counts = ds.label_counts(s)
        if sum(counts.values()) and (counts[0] == 0 or counts[1] == 0):
            raise DatasetError(f"split {s!r} lacks a label: {counts}")


def build_collective_dataset(individual: AttackDataset, m: int, seed: int, passes: int = 1) -> AttackDataset:
    """Stack ``m`` same-label pairs per sample, without replacement inside a stack.

    Each pass reshuffles every (split, label) pool and cuts it into stacks of
    ``m``; leftovers are dropped.
    """
    if individual.mode != INDIVIDUAL:
        raise DatasetError("collective stacks are built from an individual dataset")
    if m < 1 or passes < 1:
        raise DatasetError("m and passes must be positive")
    rng = np.random.default_rng(seed)
    xs, ys, seeds, splits = [], [], [], []
    for s in SPLITS:
        for label in (1, 0):
            idx = np.flatnonzero((individual.split == s) & (individual.y == label))
            if idx.size == 0:
                continue
            if idx.size < m:
                raise DatasetError(f"split {s!r} has {idx.size} samples of label {label}, fewer than m={m}")
            for _ in range(passes):
                perm = rng.permutation(idx)
                for k in range(idx.size // m):
                    chunk = perm[k * m:(k + 1) * m]
                    xs.append(np.moveaxis(individual.x[chunk], 0, -1))
                    ys.append(label)
                    seeds.append(individual.seeds[chunk])
                    splits.append(s)
    prov = dict(individual.provenance, collective_seed=int(seed), passes=int(passes))
    return AttackDataset(COLLECTIVE, np.stack(xs), np.array(ys, dtype=np.int64), np.stack(seeds),
                         np.array(splits), individual.action_dim, individual.L, int(m), prov)


def decorrelate_batch(batch: TrajectoryBatch, seed: int) -> TrajectoryBatch:
    """Pool every tuple of the batch, shuffle, and re-cut sequences of the original lengths.

    The tuple multiset and the per-trajectory seeds and lengths are preserved;
    temporal order within a trajectory is not.
    """
    if len(batch) == 0:
        raise DatasetError("cannot decorrelate an empty batch")
    pool = batch.transitions()
    order = np.random.default_rng(seed).permutation(len(pool))
    out, pos = [], 0
    for traj in batch.trajectories:
        chunk = tuple(pool[i] for i in order[pos:pos + traj.T])
        pos += traj.T
        out.append(Trajectory(chunk, seed=traj.seed))
    return TrajectoryBatch(tuple(out), batch.source_tag, batch.seed_record, decorrelated=True)
