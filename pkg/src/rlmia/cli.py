"""Command-line entry point: ``rlmia <subcommand>``.

Stage-by-stage commands exchange files on disk (trajectory files, parameter
archives, dataset directories); ``sweep`` runs the whole grid in one process.
Exit status is 0 only when every requested cell completed.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from rlmia import runner
from rlmia.bcq import BcqPolicy, query_output_trajectories, train_target_policy
from rlmia.classifiers import AttackClassifier, train_attack
from rlmia.core import SourceTag
from rlmia.dataset import COLLECTIVE, INDIVIDUAL, AttackDataset, build_collective_dataset, build_individual_dataset, decorrelate_batch
from rlmia.envs import make_env
from rlmia.metrics import all_metrics, confusion, format_value, roc_curve, write_metrics_csv
from rlmia.oracle import collect_batch, train_behavior_policy
from rlmia.trajio import load_trajectories, save_trajectories

logger = logging.getLogger("rlmia")


def _config(args) -> runner.ExperimentConfig:
    return runner.load_config(args.config, args.set)


def _out(args, cfg: runner.ExperimentConfig) -> Path:
    return Path(args.out) if args.out else cfg.resolve_output_dir()


def cmd_collect(args) -> int:
    cfg = _config(args)
    t_max = args.t_max or cfg.t_max[0]
    out = _out(args, cfg)
    env = make_env(cfg.env, t_max=t_max, sparse=cfg.sparse)
    b = cfg.behavior
    train_env = make_env(cfg.env, t_max=b.train_t_max, sparse=cfg.sparse)
    policy = train_behavior_policy(train_env, b.steps, b.ddpg, seed=args.seed * 1000)
    policy.save(out / "behavior.npz")
    for role, n, tag in ((f"{args.side}_member", cfg.n_members, SourceTag.MEMBER),
                         (f"{args.side}_nonmember", cfg.n_nonmembers, SourceTag.NONMEMBER)):
        batch = collect_batch(env, policy, n, b.noise, runner.role_seed_base(args.seed, role), tag,
                              noise_correlation=b.noise_correlation)
        path = save_trajectories(batch, env.spec, out / f"{tag.value}.jsonl")
        print(f"wrote {len(batch)} trajectories to {path}")
    return 0


def cmd_train_rl(args) -> int:
    cfg = _config(args)
    members, spec = load_trajectories(args.members)
    env = make_env(spec.name, t_max=spec.t_max, sparse=cfg.sparse)
    out = _out(args, cfg)
    policy, curve = train_target_policy(members, env, cfg.bcq, seed=args.seed)
    policy.save(out / "target_policy.npz")
    curve.to_csv(out / "learning_curve.csv")
    seeds = list(members.seed_record)
    if args.nonmembers:
        nonmembers, _ = load_trajectories(args.nonmembers, expected_spec=spec)
        seeds += list(nonmembers.seed_record)
    outputs = query_output_trajectories(env, policy, seeds)
    save_trajectories(outputs, spec, out / "outputs.jsonl")
    print(f"trained target policy on {len(members)} trajectories; queried {len(seeds)} outputs into {out}")
    return 0


def cmd_build_dataset(args) -> int:
    members, spec = load_trajectories(args.members)
    nonmembers, _ = load_trajectories(args.nonmembers, expected_spec=spec)
    outputs, _ = load_trajectories(args.outputs, expected_spec=spec)
    if args.decorrelate:
        members = decorrelate_batch(members, args.seed)
        nonmembers = decorrelate_batch(nonmembers, args.seed + 1)
    L = args.L or spec.t_max
    ds = build_individual_dataset(members, nonmembers, outputs, L, split_salt=str(args.seed),
                                  provenance={"members": str(args.members), "nonmembers": str(args.nonmembers),
                                              "outputs": str(args.outputs)})
    if args.all_test:
        ds = dataclasses.replace(ds, split=np.full(len(ds), "test"))
    if args.mode == COLLECTIVE:
        ds = build_collective_dataset(ds, args.m, seed=args.seed, passes=args.passes)
    ds.save(args.out)
    print(f"wrote {len(ds)} {ds.mode} samples of shape {ds.sample_shape} to {args.out}")
    return 0


def cmd_train_attack(args) -> int:
    cfg = _config(args)
    ds = AttackDataset.load(args.dataset)
    arch = cfg.tcn if ds.mode == INDIVIDUAL else cfg.resnet
    clf = train_attack(ds, arch, cfg.train, seed=args.seed)
    path = clf.save(args.out, dataset_hash=ds.manifest_hash())
    print(f"trained {clf.arch} classifier (best epoch {clf.metadata['best_epoch']}, "
          f"val loss {clf.metadata['best_val_loss']:.4f}) -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ds = AttackDataset.load(args.dataset)
    if args.split != "all":
        ds = ds.subset(args.split)
    clf = AttackClassifier.load(args.classifier, "tcn" if ds.mode == INDIVIDUAL else "resnet")
    probs = clf.predict_proba(ds.x)
    out = Path(args.out)
    rows = []
    for theta in cfg.thetas:
        met = all_metrics(confusion(probs, ds.y, theta))
        rows.append({"env": cfg.env, "mode": ds.mode, "T_max": ds.provenance.get("t_max", ""), "L": ds.L,
                     "m": ds.m, "theta": float(theta), "seed": args.seed, **met})
        print(f"theta={theta:.1f} " + " ".join(f"{k}={format_value(v)}" for k, v in met.items()))
    write_metrics_csv(rows, out / "metrics.csv")
    roc_curve(probs, ds.y, cfg.thetas).to_csv(out / "roc.csv")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    report = runner.sweep(cfg, out)
    print(f"{len(report.cells)} cells completed, {len(report.failures)} failed; report in {out}")
    for f in report.failures:
        print(f"FAILED {f['setting']} seed={f['seed']}: {f['error']}", file=sys.stderr)
    return 0 if report.complete else 1


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    report = runner.RunReport.load(run_dir / "run.json")
    written = runner.write_report(report, Path(args.out) if args.out else run_dir)
    print(f"wrote {len(written)} files")
    return 0 if report.complete else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlmia", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set bcq.steps=2000")
        return sp

    sp = with_config(sub.add_parser("collect", help="train a behaviour policy and collect member/nonmember batches"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--side", choices=("shadow", "private"), default="shadow")
    sp.add_argument("--t-max", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_collect)

    sp = with_config(sub.add_parser("train-rl", help="train the target policy offline and query its outputs"))
    sp.add_argument("--members", required=True)
    sp.add_argument("--nonmembers", help="also query outputs for these trajectories' seeds")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train_rl)

    sp = sub.add_parser("build-dataset", help="pair candidates with outputs into an attack dataset")
    sp.add_argument("--members", required=True)
    sp.add_argument("--nonmembers", required=True)
    sp.add_argument("--outputs", required=True)
    sp.add_argument("--L", type=int, help="clipping length (default T_max)")
    sp.add_argument("--mode", choices=(INDIVIDUAL, COLLECTIVE), default=INDIVIDUAL)
    sp.add_argument("--m", type=int, default=10)
    sp.add_argument("--passes", type=int, default=1)
    sp.add_argument("--decorrelate", action="store_true")
    sp.add_argument("--all-test", action="store_true", help="tag every sample as test (private-side data)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_dataset)

    sp = with_config(sub.add_parser("train-attack", help="train the membership classifier on a dataset"))
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_attack)

    sp = with_config(sub.add_parser("evaluate", help="score a dataset and write metrics.csv and roc.csv"))
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = with_config(sub.add_parser("sweep", help="run the full grid of settings and seeds"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="regenerate report files from a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (runner.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
