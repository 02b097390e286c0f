"""Experiment orchestration: cells, the shadow/private pipeline, sweeps and report files.

A cell is one (T_max, L, mode, correlation) setting at one seed. Cells that
share (T_max, seed) share the expensive model stage: the behaviour policy,
the four trajectory batches, both target policies and their queried outputs.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from rlmia import __version__
from rlmia.bcq import BcqConfig, BcqPolicy, LearningCurve, query_output_trajectories, train_target_policy
from rlmia.classifiers import ResNetConfig, TcnConfig, TrainSpec, train_attack
from rlmia.core import SourceTag, TrajectoryBatch
from rlmia.dataset import (COLLECTIVE, INDIVIDUAL, AttackDataset, build_collective_dataset,
                           build_individual_dataset, decorrelate_batch)
from rlmia.envs import make_env
from rlmia.metrics import (DEFAULT_THETAS, UNDEFINED, RocCurve, RocPoint, all_metrics, best_threshold, confusion,
                           is_undefined, roc_curve, write_metrics_csv)
from rlmia.oracle import DDPGConfig, collect_batch, train_behavior_policy

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "RLMIA_OUTPUT_ROOT"
CORRELATED = "correlated"
DECORRELATED = "decorrelated"
ROLES = ("shadow_member", "shadow_nonmember", "private_member", "private_nonmember")
_ROLE_SPAN = 10**6


class ConfigError(ValueError):
    pass


@dataclass
class BehaviorConfig:
    steps: int = 5000
    train_t_max: int = 50
    noise: float = 0.3
    noise_correlation: float = 0.0
    n_policies: int = 1
    # "same": nonmembers come from the members' behaviour policy; "separate": from an independently trained one
    nonmember_policy: str = "same"
    ddpg: DDPGConfig = field(default_factory=DDPGConfig)


@dataclass
class ExperimentConfig:
    env: str = "PointReach2D"
    sparse: bool = False
    t_max: list[int] = field(default_factory=lambda: [20])
    clip_lengths: list[int | None] = field(default_factory=lambda: [None])
    modes: list[str] = field(default_factory=lambda: [INDIVIDUAL])
    m: int = 10
    correlation: list[str] = field(default_factory=lambda: [CORRELATED])
    n_members: int = 200
    n_nonmembers: int = 200
    collective_passes: int = 10
    thetas: list[float] = field(default_factory=lambda: list(DEFAULT_THETAS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    bcq: BcqConfig = field(default_factory=BcqConfig)
    tcn: TcnConfig = field(default_factory=TcnConfig)
    resnet: ResNetConfig = field(default_factory=ResNetConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    output_dir: str | None = None

    def __post_init__(self):
        for name in ("t_max", "clip_lengths", "modes", "correlation", "seeds", "thetas"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be a nonempty list")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        bad = set(self.modes) - {INDIVIDUAL, COLLECTIVE}
        if bad:
            raise ConfigError(f"unknown modes {sorted(bad)}")
        bad = set(self.correlation) - {CORRELATED, DECORRELATED}
        if bad:
            raise ConfigError(f"unknown correlation levels {sorted(bad)}")
        if max(self.n_members, self.n_nonmembers) > _ROLE_SPAN or min(self.n_members, self.n_nonmembers) < 1:
            raise ConfigError(f"dataset sizes must lie in [1, {_ROLE_SPAN}]")
        if self.behavior.nonmember_policy not in ("same", "separate"):
            raise ConfigError("behavior.nonmember_policy must be 'same' or 'separate'")
        if any(L is not None and L < 1 for L in self.clip_lengths):
            raise ConfigError("clipping lengths must be positive")

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        beh = dict(d.pop("behavior", {}) or {})
        ddpg = DDPGConfig(**(beh.pop("ddpg", {}) or {}))
        sub = {
            "behavior": BehaviorConfig(ddpg=ddpg, **beh),
            "bcq": BcqConfig(**(d.pop("bcq", {}) or {})),
            "tcn": TcnConfig(**(d.pop("tcn", {}) or {})),
            "resnet": ResNetConfig(**(d.pop("resnet", {}) or {})),
            "train": TrainSpec(**(d.pop("train", {}) or {})),
        }
        return cls(**d, **sub)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resolve_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.config_hash()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


@dataclass(frozen=True)
class Setting:
    t_max: int
    L: int
    mode: str
    correlation: str

    @property
    def key(self) -> str:
        return f"T{self.t_max}_L{self.L}_{self.mode}_{self.correlation}"


def settings_of(config: ExperimentConfig) -> list[Setting]:
    out = []
    for t_max, L, mode, corr in itertools.product(config.t_max, config.clip_lengths, config.modes,
                                                  config.correlation):
        out.append(Setting(int(t_max), int(L if L is not None else t_max), mode, corr))
    return out


def role_seed_base(seed: int, role: str) -> int:
    """Reset-seed range of one data role; ranges of distinct (seed, role) never overlap."""
    return (seed * len(ROLES) + ROLES.index(role) + 1) * _ROLE_SPAN


# ---------------------------------------------------------------- model stage

@dataclass
class ModelArtifacts:
    """Everything the attack may see for one trained target model, plus its training curve."""

    member: TrajectoryBatch
    nonmember: TrajectoryBatch
    outputs: TrajectoryBatch
    curve: LearningCurve
    policy: BcqPolicy | None = None


@dataclass
class ModelStage:
    t_max: int
    seed: int
    shadow: ModelArtifacts
    private: ModelArtifacts


def behavior_policies(config: ExperimentConfig, seed: int) -> tuple[list, list]:
    """Behaviour policies for members and for nonmembers (identical under ``nonmember_policy='same'``)."""
    b = config.behavior
    env = make_env(config.env, t_max=b.train_t_max, sparse=config.sparse)
    members = [train_behavior_policy(env, b.steps, b.ddpg, seed=seed * 1000 + k) for k in range(b.n_policies)]
    if b.nonmember_policy == "same":
        return members, members
    others = [train_behavior_policy(env, b.steps, b.ddpg, seed=seed * 1000 + 500 + k)
              for k in range(b.n_policies)]
    return members, others


def _train_model(config: ExperimentConfig, env, member, nonmember, seed: int) -> ModelArtifacts:
    policy, curve = train_target_policy(member, env, config.bcq, seed=seed)
    seeds = list(member.seed_record) + list(nonmember.seed_record)
    outputs = query_output_trajectories(env, policy, seeds)
    return ModelArtifacts(member, nonmember, outputs, curve, policy)


def run_model_stage(config: ExperimentConfig, t_max: int, seed: int, policies=None) -> ModelStage:
    """Collect the four batches, train the shadow and private target policies, query outputs."""
    env = make_env(config.env, t_max=t_max, sparse=config.sparse)
    mem_pols, non_pols = policies if policies is not None else behavior_policies(config, seed)
    b = config.behavior

    def collect(role, pols, n, tag):
        return collect_batch(env, pols, n, b.noise, role_seed_base(seed, role), tag,
                             noise_correlation=b.noise_correlation)

    models = {}
    for side, offset in (("shadow", 1), ("private", 2)):
        member = collect(f"{side}_member", mem_pols, config.n_members, SourceTag.MEMBER)
        nonmember = collect(f"{side}_nonmember", non_pols, config.n_nonmembers, SourceTag.NONMEMBER)
        models[side] = _train_model(config, env, member, nonmember, seed * 10 + offset)
        logger.info("T_max=%d seed=%d: %s target policy trained", t_max, seed, side)
    return ModelStage(t_max, seed, models["shadow"], models["private"])


# ---------------------------------------------------------------- attack stage

def _candidates(art: ModelArtifacts, correlation: str, seed: int) -> tuple[TrajectoryBatch, TrajectoryBatch]:
    if correlation == CORRELATED:
        return art.member, art.nonmember
    return decorrelate_batch(art.member, seed), decorrelate_batch(art.nonmember, seed + 1)


def attack_datasets(config: ExperimentConfig, stage: ModelStage, setting: Setting,
                    seed: int) -> tuple[AttackDataset, AttackDataset]:
    """Shadow-side training data and the private-side evaluation data for one cell.

    Every private pair is tagged ``test``: the classifier never sees the
    private model's pairs during training or model selection.
    """
    sets = []
    for side, art in (("shadow", stage.shadow), ("private", stage.private)):
        mem, non = _candidates(art, setting.correlation, seed * 7919 + (0 if side == "shadow" else 2))
        ds = build_individual_dataset(mem, non, art.outputs, setting.L, split_salt=f"{side}:{seed}",
                                      provenance={"side": side, "t_max": setting.t_max, "seed": seed,
                                                  "correlation": setting.correlation})
        if side == "private":
            ds = dataclasses.replace(ds, split=np.full(len(ds), "test"))
        if setting.mode == COLLECTIVE:
            ds = build_collective_dataset(ds, config.m, seed=seed * 31 + (0 if side == "shadow" else 1),
                                          passes=config.collective_passes)
        sets.append(ds)
    return sets[0], sets[1]


@dataclass
class CellResult:
    setting: Setting
    seed: int
    rows: list[dict]
    roc: RocCurve
    shadow_test_acc: float | None
    best_theta: float


def _rows(config: ExperimentConfig, setting: Setting, seed: int, probs, labels) -> tuple[list[dict], RocCurve]:
    rows = []
    for theta in config.thetas:
        met = all_metrics(confusion(probs, labels, theta))
        rows.append({"env": config.env, "mode": setting.mode, "T_max": setting.t_max, "L": setting.L,
                     "m": config.m if setting.mode == COLLECTIVE else 1, "theta": float(theta),
                     "seed": seed, **met})
    return rows, roc_curve(probs, labels, config.thetas)


def run_attack_cell(config: ExperimentConfig, stage: ModelStage, setting: Setting, seed: int) -> CellResult:
    shadow_ds, private_ds = attack_datasets(config, stage, setting, seed)
    arch_config = config.tcn if setting.mode == INDIVIDUAL else config.resnet
    clf = train_attack(shadow_ds, arch_config, config.train, seed=seed)
    probs = clf.predict_proba(private_ds.x)
    rows, roc = _rows(config, setting, seed, probs, private_ds.y)
    shadow_test = shadow_ds.subset("test")
    shadow_acc = None
    if len(shadow_test):
        shadow_acc = float(np.mean((clf.predict_proba(shadow_test.x) >= 0.5) == shadow_test.y))
    best = best_threshold([r["theta"] for r in rows], [r["ACC"] for r in rows])
    return CellResult(setting, seed, rows, roc, shadow_acc, best)


def run_pipeline(config: ExperimentConfig, setting: Setting, seed: int,
                 stage: ModelStage | None = None) -> list[dict]:
    """Full pipeline for one cell; returns one metric row per threshold."""
    if stage is None:
        stage = run_model_stage(config, setting.t_max, seed)
    return run_attack_cell(config, stage, setting, seed).rows


# ---------------------------------------------------------------- sweep and report

@dataclass
class RunReport:
    config: dict
    cells: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    curves: dict[str, list] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.failures

    def rows(self, correlation: str | None = None) -> list[dict]:
        out = []
        for c in self.cells:
            if correlation is None or c["setting"]["correlation"] == correlation:
                out.extend(c["rows"])
        return out

    def to_json(self) -> str:
        return json.dumps(_encode(dataclasses.asdict(self)), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**_decode(json.loads(text)))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_json(Path(path).read_text())


def _encode(obj):
    if is_undefined(obj):
        return {"__undefined__": True}
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if obj == {"__undefined__": True}:
            return UNDEFINED
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def mean_stderr(values) -> tuple[float, float]:
    """Sample mean and standard error of the mean (ddof=1; 0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def cell_record(result: CellResult) -> dict:
    return {"setting": dataclasses.asdict(result.setting), "seed": result.seed, "rows": result.rows,
            "roc": [dataclasses.asdict(p) for p in result.roc.points],
            "shadow_test_acc": result.shadow_test_acc, "best_theta": result.best_theta}


def sweep(config: ExperimentConfig, out_dir=None, save_models: bool = True) -> RunReport:
    """Run every (setting, seed) cell; a failing cell is logged and skipped, the rest proceed."""
    out = Path(out_dir) if out_dir is not None else config.resolve_output_dir()
    settings = settings_of(config)
    report = RunReport(config=config.to_dict(),
                       provenance={"config_hash": config.config_hash(), "code_version": __version__})
    for seed in config.seeds:
        policies = None
        for t_max in config.t_max:
            try:
                if policies is None:
                    policies = behavior_policies(config, seed)
                stage = run_model_stage(config, t_max, seed, policies)
            except Exception as exc:  # noqa: BLE001 - per-cell isolation
                logger.exception("model stage failed for T_max=%d seed=%d", t_max, seed)
                for s in settings:
                    if s.t_max == t_max:
                        report.failures.append({"setting": dataclasses.asdict(s), "seed": seed,
                                                "error": f"{type(exc).__name__}: {exc}"})
                continue
            for side, art in (("shadow", stage.shadow), ("private", stage.private)):
                report.curves[f"T{t_max}_seed{seed}_{side}"] = [list(p) for p in art.curve.points]
                if save_models and art.policy is not None:
                    art.policy.save(out / "models" / f"T{t_max}_seed{seed}_{side}.npz")
            for s in settings:
                if s.t_max != t_max:
                    continue
                try:
                    report.cells.append(cell_record(run_attack_cell(config, stage, s, seed)))
                except Exception as exc:  # noqa: BLE001 - per-cell isolation
                    logger.exception("cell %s seed=%d failed", s.key, seed)
                    report.failures.append({"setting": dataclasses.asdict(s), "seed": seed,
                                            "error": f"{type(exc).__name__}: {exc}"})
    report.save(out / "run.json")
    write_report(report, out)
    return report


def aggregate(report: RunReport) -> list[dict]:
    """Mean and stderr of every metric per (setting, theta) over the completed seeds."""
    groups: dict[tuple, list[dict]] = {}
    for cell in report.cells:
        st = cell["setting"]
        for row in cell["rows"]:
            key = (st["t_max"], st["L"], st["mode"], st["correlation"], row["theta"])
            groups.setdefault(key, []).append(row)
    n_seeds = len(report.config["seeds"])
    out = []
    for key in sorted(groups):
        rows = groups[key]
        entry = {"T_max": key[0], "L": key[1], "mode": key[2], "correlation": key[3], "theta": key[4],
                 "n_seeds": len(rows), "partial": len(rows) < n_seeds}
        for metric in ("ACC", "PR", "RE", "F1", "MCC"):
            vals = [r[metric] for r in rows if not is_undefined(r[metric])]
            if vals:
                mean, se = mean_stderr(vals)
                entry[metric] = {"mean": mean, "stderr": se, "n": len(vals)}
            else:
                entry[metric] = None
        out.append(entry)
    return out


def write_report(report: RunReport, out_dir) -> list[Path]:
    """Write metrics/ROC/learning-curve CSVs and ``summary.json``; byte-stable for a given report.

    The metrics table has no correlation column, so each correlation level
    gets its own subdirectory holding ``metrics.csv`` and ``roc/``.
    """
    out = Path(out_dir)
    written = []
    for corr in sorted({c["setting"]["correlation"] for c in report.cells} | set(report.config["correlation"])):
        d = out / corr
        cells = sorted((c for c in report.cells if c["setting"]["correlation"] == corr),
                       key=lambda c: (c["setting"]["t_max"], c["setting"]["L"], c["setting"]["mode"], c["seed"]))
        written.append(write_metrics_csv([r for c in cells for r in c["rows"]], d / "metrics.csv"))
        for c in cells:
            st = c["setting"]
            curve = RocCurve([RocPoint(**p) for p in c["roc"]])
            written.append(curve.to_csv(d / "roc" / f"T{st['t_max']}_L{st['L']}_{st['mode']}_seed{c['seed']}.csv"))
    for name, points in sorted(report.curves.items()):
        curve = LearningCurve()
        for step, mean, se in points:
            curve.append(step, mean, se)
        written.append(curve.to_csv(out / "curves" / f"{name}.csv"))
    summary = {"provenance": report.provenance, "complete": report.complete, "failures": report.failures,
               "n_cells": len(report.cells), "aggregate": aggregate(report),
               "shadow_test_acc": {f"{_key(c)}_seed{c['seed']}": c["shadow_test_acc"] for c in report.cells},
               "best_theta": {f"{_key(c)}_seed{c['seed']}": c["best_theta"] for c in report.cells}}
    path = out / "summary.json"
    path.write_text(json.dumps(_encode(summary), indent=1, sort_keys=True) + "\n")
    written.append(path)
    return written


def _key(cell: dict) -> str:
    st = cell["setting"]
    return Setting(st["t_max"], st["L"], st["mode"], st["correlation"]).key


def mean_acc(report: RunReport, theta: float = 0.5, **match) -> float:
    """Mean ACC at ``theta`` over cells whose setting matches ``match`` (e.g. ``t_max=20``)."""
    vals = []
    for c in report.cells:
        if all(c["setting"][k] == v for k, v in match.items()):
            vals.extend(r["ACC"] for r in c["rows"] if r["theta"] == theta)
    if not vals:
        raise KeyError(f"no cells match {match}")
    return float(np.mean(vals))


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars or lists."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node: Any = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment config and apply CLI overrides."""
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides or []))

