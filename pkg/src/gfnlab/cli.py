"""Command-line entry point: ``gfnlab {train,eval,check,enumerate,gradcheck}``.

Exit codes: 0 success, 1 a check failed, 2 bad input (config, missing file), 3 training diverged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dag as dag_io
from .config import ConfigError, RunConfig, load_config, make_environment, parse_config
from .envs import bitseq_state_string, dump_modes, dump_test_set
from .flows import flow_from_backward, policies_from_flow, residual_report, uniform_backward
from .metrics import diversity, emit_csv, empirical_l1, modes_found
from .persist import atomic_write_bytes, atomic_write_text, dump_flow, load_flow, unpack_checkpoint
from .training import ExplorationPolicy, Trainer, TrainingDiverged, diagnostic, gradient_check, sample_batch


def code_hash() -> str:
    """sha256 over the package sources, in sorted file order."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return "sha256:" + h.hexdigest()


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "iters", None) is not None:
        cfg.train.iterations = args.iters
    if getattr(args, "out", None) is not None:
        cfg.output.dir = args.out
    return cfg


def cmd_train(args) -> int:
    resume = None
    if args.resume:
        resume = Path(args.resume).read_bytes()
    if args.config:
        cfg = _config_from_args(args)
    elif resume is not None:
        # rerun with the configuration stored in the checkpoint
        cfg = parse_config(unpack_checkpoint(resume)[1]["config"])
        if args.iters is not None:
            cfg.train.iterations = args.iters
        if args.out is not None:
            cfg.output.dir = args.out
    else:
        raise ConfigError("train needs --config or --resume")
    out = Path(cfg.output.dir)
    trainer = Trainer(cfg)
    if resume is not None:
        trainer.restore(resume)
    try:
        state = trainer.run(out_dir=out)
    except TrainingDiverged as exc:
        atomic_write_bytes(out / "diverged.bin", exc.snapshot)
        atomic_write_text(out / "diverged.json", diagnostic(exc))
        print(f"error: {exc}; snapshot written to {out / 'diverged.bin'}", file=sys.stderr)
        return 3
    resolved = trainer.cfg
    atomic_write_text(out / "metrics.csv", emit_csv(state.records))
    atomic_write_bytes(out / "checkpoint.bin", trainer.checkpoint_bytes())
    manifest = {
        "config": resolved.to_dict(),
        "seed": resolved.train.seed,
        "code_hash": code_hash(),
        "iterations": state.iteration,
        "trajectories": state.trajectories,
        "modes_all_found_at": state.modes_all_at,
        "files": {"metrics": "metrics.csv", "checkpoint": "checkpoint.bin"},
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    last = state.records[-1]
    print(f"trained {state.iteration} iterations; last row: loss={last.mean_loss} exact_l1={last.exact_l1} "
          f"empirical_l1={last.empirical_l1} spearman={last.spearman}; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    data = Path(args.checkpoint).read_bytes()
    cfg = parse_config(unpack_checkpoint(data)[1]["config"])
    trainer = Trainer(cfg)
    trainer.restore(data)
    rec = trainer.evaluate()
    report = {k: v for k, v in vars(rec).items() if k != "wall_clock"}
    rng = np.random.default_rng(args.seed)
    spec, env = trainer.spec, trainer.env
    trajs = []
    for lo in range(0, args.samples, 256):
        trajs += sample_batch(trainer.state.model, spec, ExplorationPolicy("on_policy"), rng, min(256, args.samples - lo))
    terms = np.array([t[-1] for t in trajs], dtype=np.int64)
    report["samples"] = len(terms)
    report["sample_l1"] = empirical_l1(terms, trainer.target_rewards)
    report["sample_mean_reward"] = float(env.rewards[terms].mean())
    if "modes" in env.info:
        bc = env.info["config"]
        strings = [bitseq_state_string(bc, int(x)) for x in terms]
        report["sample_modes_found"] = modes_found(strings, env.info["modes"], bc.delta)
        reward_of = {s: float(env.rewards[x]) for s, x in zip(strings, terms)}
        top = sorted(reward_of, key=lambda s: (-reward_of[s], s))[:100]
        if len(top) >= 2:
            report["top100_diversity"] = diversity(top)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")
    return 0


def cmd_check(args) -> int:
    spec = dag_io.loads(Path(args.spec).read_text())
    problems = dag_io.validate_dag(spec)
    if problems:
        print("invalid spec:\n  " + "\n  ".join(problems), file=sys.stderr)
        return 2
    flow, policies, rewards = load_flow(Path(args.flow).read_text(), spec)
    report = residual_report(spec, flow, policies, rewards, cap=args.cap)
    ok = True
    for name, value in report.items():
        status = "ok" if value <= args.tol else "FAIL"
        ok &= value <= args.tol
        print(f"{name:12s} max |residual| {value:.3e}  {status}")
    return 0 if ok else 1


def cmd_enumerate(args) -> int:
    cfg = _config_from_args(args).resolved()
    env = make_environment(cfg)
    spec = env.spec
    counts = dag_io.count_trajectories(spec) if spec.num_states <= args.count_limit else None
    beta = cfg.objective.beta
    target = env.target(beta)
    lr = env.log_rewards(beta)[spec.terminals]
    top = lr.max()
    print(f"environment     {env.name}")
    print(f"states          {spec.num_states}")
    print(f"edges           {sum(len(c) for c in spec.children)}")
    print(f"terminals       {len(spec.terminals)}")
    if counts is not None:
        print(f"trajectories    {sum(counts.values())}")
    print(f"log sum R^beta  {float(top + np.log(np.exp(lr - top).sum()))!r}  (beta={beta})")
    order = np.argsort(-target, kind="stable")[: args.top]
    print("top terminals (state, R, target probability):")
    for i in order:
        x = spec.terminals[i]
        print(f"  {x} {float(env.rewards[x])!r} {float(target[i])!r}")
    if args.out:
        lines = ["state,reward,target"] + [f"{x},{float(env.rewards[x])!r},{float(p)!r}" for x, p in zip(spec.terminals, target)]
        atomic_write_text(args.out, "\n".join(lines) + "\n")
    if args.dump_spec:
        atomic_write_text(args.dump_spec, dag_io.dumps(spec))
    if args.dump_modes and "modes" in env.info:
        atomic_write_text(args.dump_modes, dump_modes(env.info["modes"]))
    if args.dump_test_set and "test_set" in env.info:
        atomic_write_text(args.dump_test_set, dump_test_set(env.info["test_set"]))
    if args.dump_flow:
        flow = flow_from_backward(spec, env.rewards, uniform_backward(spec))
        atomic_write_text(args.dump_flow, dump_flow(spec, flow, policies_from_flow(spec, flow), env.rewards))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config_from_args(args) if args.config else RunConfig()
    if not args.config:
        cfg.env.type = "random"
    if args.objective:
        cfg.objective.type = args.objective
    if args.model:
        cfg.model.type = args.model
    reports = gradient_check(cfg, seeds=args.seeds, batch=args.batch, step=args.step, tolerance=args.tol)
    for seed, rep in enumerate(reports):
        print(f"seed {seed}: {cfg.objective.type}/{cfg.model.type}")
        print(rep.summary())
    ok = all(r.ok for r in reports)
    print(f"{'PASS' if ok else 'FAIL'} worst relative error {max(r.worst() for r in reports):.3e}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfnlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", help="run config (.cfg)")
    t.add_argument("--seed", type=int, help="override [train] seed")
    t.add_argument("--iters", type=int, help="override [train] iterations")
    t.add_argument("--out", help="override [output] dir")
    t.add_argument("--resume", help="checkpoint.bin to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--samples", type=int, default=1000, help="trajectories to sample for sample-based metrics")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="constraint residuals of a .flow file against a .dag spec")
    c.add_argument("--spec", required=True)
    c.add_argument("--flow", required=True)
    c.add_argument("--tol", type=float, default=1e-9)
    c.add_argument("--cap", type=int, default=100_000, help="maximum trajectories to enumerate")
    c.set_defaults(func=cmd_check)

    n = sub.add_parser("enumerate", help="spec statistics and the exact target distribution")
    n.add_argument("--config", required=True)
    n.add_argument("--top", type=int, default=10)
    n.add_argument("--out", help="write state,reward,target CSV")
    n.add_argument("--dump-spec", help="write the spec as a .dag file")
    n.add_argument("--dump-flow", help="write the exact flow (F(x)=R, uniform P_B) as a .flow file")
    n.add_argument("--dump-modes", help="bit sequences: write the mode set, one string per line")
    n.add_argument("--dump-test-set", help="bit sequences: write the test set as string<TAB>reward lines")
    n.add_argument("--count-limit", type=int, default=1_000_000, help="skip trajectory counting above this size")
    n.set_defaults(func=cmd_enumerate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    g.add_argument("--config", help="run config; defaults to a random 20-state DAG")
    g.add_argument("--objective", choices=("tb", "db", "fm", "subtb"))
    g.add_argument("--model", choices=("tabular", "mlp"))
    g.add_argument("--seeds", type=int, default=5)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
