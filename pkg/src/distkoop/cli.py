"""Command-line workbench: generate data, train, evaluate, run MPC, merge reports.

Exit codes: 0 success, 2 configuration or input error, 3 training or
tracking did not converge (outputs are still written), 4 numerical failure.
"""

import argparse
import csv
import glob
import os
import sys

import numpy as np

from . import config as config_mod
from .consensus import write_round_history
from .errors import ConfigError, IntervalOutOfRange, NonFiniteState, SingularBlockSystem, SolverDegenerate
from .koopman import save_model
from .mpc import run_closed_loop, write_trace_csv
from .train import (evaluate_metrics, holdout_slice, load_any_model, read_metrics_csv, run_ddkl_pt, save_mlp,
                    train_dko_centralized, train_mlp_baseline)
from .vessel import generate_trajectory, partition_trajectory, read_trajectory_csv, write_trajectory_csv

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_NUMERIC = 0, 2, 3, 4

METHODS = ("ddkl-pt", "dko", "mlp")

# reference values for the report table; a different vessel, so not targets
REFERENCE_METRICS = {"ddkl-pt": (0.0284, 0.0041), "dko": (0.0179, 0.0016), "mlp": (0.0205, 0.0028)}


def _log(msg):
    print(msg, file=sys.stderr)


def _load_config(args):
    cfg = config_mod.load(args.config)
    return config_mod.with_overrides(cfg, **{
        "data.seed": getattr(args, "seed", None),
        "lift.init_seed": getattr(args, "init_seed", None),
        "consensus.matrix_seed": getattr(args, "init_seed", None),
        "theta.rounds": getattr(args, "rounds", None),
        "theta.baseline_steps": getattr(args, "steps", None),
        "theta.n_runs": getattr(args, "runs", None),
        "mpc.max_steps": getattr(args, "mpc_steps", None),
        "mpc.seed": getattr(args, "mpc_seed", None),
        "paths.out_dir": getattr(args, "out_dir", None),
        "paths.trajectory": getattr(args, "data", None),
    })


def _generate(cfg):
    d = cfg.data
    traj = generate_trajectory(cfg.vessel, seed=d.seed, T=d.T, dt=d.dt, sigma=d.sigma, hold=d.hold)
    traj.meta.update(cfg.meta(sigma=d.sigma, hold=d.hold))
    return traj


def _trajectory(cfg):
    """Read the configured trajectory file, or regenerate it deterministically when absent."""
    path = cfg.paths["trajectory"]
    if os.path.exists(path):
        return read_trajectory_csv(path)
    _log(f"{path} not found; regenerating from the config")
    return _generate(cfg)


def _run_cfg(cfg, run):
    from dataclasses import replace
    return replace(cfg.train, init_seed=cfg.train.init_seed + run, matrix_seed=cfg.train.matrix_seed + run)


def cmd_generate(args):
    cfg = _load_config(args)
    out = args.out or cfg.paths["trajectory"]
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    traj = _generate(cfg)
    write_trajectory_csv(out, traj)
    v = traj.states[:, 3:]
    print(f"wrote {out}: {traj.states.shape[0]} states, {traj.T} inputs, seed {cfg.data.seed}")
    print("velocity mean " + " ".join(f"{x:.4f}" for x in v.mean(axis=0))
          + " | std " + " ".join(f"{x:.4f}" for x in v.std(axis=0))
          + " | max|.| " + " ".join(f"{x:.4f}" for x in np.abs(v).max(axis=0)))
    return EXIT_OK


def _train_one(cfg, traj, method, run, out_dir):
    """Train one method for one run index; returns (models, converged)."""
    tcfg = _run_cfg(cfg, run)
    meta = cfg.meta(method=method, run=run, init_seed=tcfg.init_seed, matrix_seed=tcfg.matrix_seed)
    os.makedirs(out_dir, exist_ok=True)
    if method == "ddkl-pt":
        segs = partition_trajectory(traj, cfg.data.intervals)
        models, hist = run_ddkl_pt(tcfg, segs, cfg.graph)
        for i, m in enumerate(models, 1):
            save_model(os.path.join(out_dir, f"agent{i}.ckpt"), m, {**meta, "agent": i})
        write_round_history(os.path.join(out_dir, "round_history.csv"), hist.matrix_rows, meta, ["round"])
        with open(os.path.join(out_dir, "theta_history.csv"), "w", newline="") as fh:
            for key in sorted(meta):
                fh.write(f"# {key}={meta[key]}\n")
            w = csv.writer(fh, lineterminator="\n")
            n = hist.theta_loss.shape[1] if hist.theta_loss.size else len(models)
            w.writerow(["step", "theta_disagreement"] + [f"loss_agent{i}" for i in range(1, n + 1)])
            for k, (dis, losses) in enumerate(zip(hist.theta_disagreement, hist.theta_loss), 1):
                w.writerow([k, f"{dis:.17g}"] + [f"{x:.17g}" for x in losses])
        _log(f"ddkl-pt run {run}: {hist.rounds_run} rounds, final losses "
             + " ".join(f"{x:.3e}" for x in hist.final_losses) + f", {hist.wall_clock:.1f}s")
        return models, hist.converged
    if method == "dko":
        res = train_dko_centralized(traj, tcfg, cfg.data.train_end)
        save_model(os.path.join(out_dir, "dko.ckpt"), res.model, meta)
    else:
        res = train_mlp_baseline(traj, tcfg, cfg.data.train_end)
        save_mlp(os.path.join(out_dir, "mlp.ckpt"), res.model, meta)
    with open(os.path.join(out_dir, "loss_history.csv"), "w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        fh.write("step,loss\n")
        for k, x in enumerate(res.losses):
            fh.write(f"{k},{x:.17g}\n")
    _log(f"{method} run {run}: {len(res.losses)} steps, final loss {res.losses[-1]:.3e}")
    return [res.model], res.converged


def cmd_train(args):
    cfg = _load_config(args)
    traj = _trajectory(cfg)
    out_dir = os.path.join(cfg.paths["out_dir"], args.method)
    _, converged = _train_one(cfg, traj, args.method, args.run, out_dir)
    print(f"wrote {args.method} checkpoints to {out_dir}")
    if not converged:
        print(f"loss threshold {cfg.train.threshold:g} not reached within the iteration budget")
        return EXIT_NONCONVERGED
    return EXIT_OK


def _models_from(spec):
    """``METHOD=PATH`` where PATH is a checkpoint or a directory of ``*.ckpt`` files."""
    method, sep, path = spec.partition("=")
    if not sep:
        raise ConfigError(f"--model expects METHOD=PATH, got {spec!r}")
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.ckpt")))
        if not files:
            raise ConfigError(f"no checkpoints in {path}")
    elif os.path.exists(path):
        files = [path]
    else:
        raise ConfigError(f"model file {path} not found")
    models = [load_any_model(f) for f in files]
    return method, models if len(models) > 1 else models[0]


def cmd_eval(args):
    cfg = _load_config(args)
    if args.quick:
        cfg = config_mod.with_overrides(cfg, **{"theta.n_runs": 3})
    traj = _trajectory(cfg)
    test = holdout_slice(traj, cfg.data.train_end, cfg.data.test_end)
    by_method = {}
    if args.model:
        for spec in args.model:
            method, models = _models_from(spec)
            by_method.setdefault(method, []).append(models)
    else:
        methods = args.methods.split(",")
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for run in range(cfg.n_runs):
            for m in methods:
                out_dir = os.path.join(cfg.paths["out_dir"], "eval", m, f"run{run}")
                models, _ = _train_one(cfg, traj, m, run, out_dir)
                by_method.setdefault(m, []).append(models if len(models) > 1 else models[0])
    if args.zero_baseline:
        by_method["zero"] = [lambda V, U: np.zeros_like(V)]
    report = evaluate_metrics(by_method, test)
    out = args.out or os.path.join(cfg.paths["out_dir"], "metrics.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    report.write_csv(out, cfg.meta(n_runs=max(len(v) for v in by_method.values())))
    for method, (mean, std) in report.summary.items():
        print(f"{method:8s} {mean:.6g} ± {std:.3g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_mpc(args):
    cfg = _load_config(args)
    if args.model:
        path = args.model
    else:
        path = os.path.join(cfg.paths["out_dir"], "ddkl-pt", f"agent{args.agent}.ckpt")
    if not os.path.exists(path):
        raise ConfigError(f"model file {path} not found")
    model = load_any_model(path)
    x0 = np.array(cfg.x0)
    goal = x0.copy() if args.task == "station" else np.array(cfg.goal)
    if args.task == "station":
        goal[3:] = 0.0
    trace = run_closed_loop(cfg.vessel, model, x0, goal, cfg.mpc, cfg.mpc_steps)
    out = args.out or os.path.join(cfg.paths["out_dir"], f"mpc_{args.task}_agent{args.agent}.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    meta = cfg.meta(task=args.task, model=os.path.basename(path), mpc_seed=cfg.mpc.seed)
    write_trace_csv(out, trace, meta, include_timing=args.timing)
    print(f"wrote {out}")
    if args.task == "goal":
        arrival = trace.first_arrival()
        print(f"final position error {trace.err_pos[-1]:.4f} m, yaw error {trace.err_yaw[-1]:.4f} rad, "
              f"first arrival {arrival}")
        ok = arrival is not None
    else:
        print(f"max position error {trace.err_pos.max():.4f} m over {cfg.mpc_steps} steps")
        ok = trace.err_pos.max() <= 0.5
    print(f"mean solve time {trace.solve_ms.mean():.1f} ms")
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_report(args):
    rows = []
    hashes = set()
    for path in args.inputs:
        if not os.path.exists(path):
            raise ConfigError(f"metrics file {path} not found")
        with open(path) as fh:
            for line in fh:
                if line.startswith("# config_hash="):
                    hashes.add(line.strip().split("=", 1)[1])
        rep = read_metrics_csv(path)
        for method, (mean, std) in rep.summary.items():
            n = sum(1 for m, _, _ in rep.rows if m == method)
            rows.append((method, n, mean, std, path))
    out = args.out
    lines = ["method,n_runs,mean,std,reference_mean,reference_std,source"]
    for method, n, mean, std, src in rows:
        ref = REFERENCE_METRICS.get(method, ("", ""))
        lines.append(f"{method},{n},{mean:.17g},{std:.17g},{ref[0]},{ref[1]},{src}")
    text = "".join(f"# config_hash={h}\n" for h in sorted(hashes)) + "\n".join(lines) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    print(f"{'method':8s} {'runs':>4s} {'mean':>12s} {'std':>10s}")
    for method, n, mean, std, _ in rows:
        print(f"{method:8s} {n:4d} {mean:12.6g} {std:10.3g}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="distkoop", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML experiment config (defaults when omitted)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate the excitation trajectory")
    g.add_argument("--seed", type=int, help="data seed")
    g.add_argument("--out", help="trajectory CSV path")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one method")
    t.add_argument("method", choices=METHODS)
    t.add_argument("--data", help="trajectory CSV")
    t.add_argument("--out-dir")
    t.add_argument("--run", type=int, default=0, help="run index added to the init seeds")
    t.add_argument("--init-seed", type=int)
    t.add_argument("--rounds", type=int, help="outer rounds for ddkl-pt")
    t.add_argument("--steps", type=int, help="Adam step cap for the baselines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="one-step test metrics")
    e.add_argument("--data")
    e.add_argument("--out-dir")
    e.add_argument("--out", help="metrics CSV path")
    e.add_argument("--model", action="append", help="METHOD=PATH, one per run; PATH may be a directory")
    e.add_argument("--methods", default="ddkl-pt,dko,mlp", help="methods to train when no --model is given")
    e.add_argument("--runs", type=int, help="number of seeded runs to train")
    e.add_argument("--quick", action="store_true", help="3 runs")
    e.add_argument("--zero-baseline", action="store_true", help="add the constant-zero predictor")
    e.add_argument("--rounds", type=int)
    e.add_argument("--steps", type=int)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mpc", help="closed-loop MPC with a learned model")
    m.add_argument("--task", choices=("goal", "station"), default="goal")
    m.add_argument("--agent", type=int, default=1, help="use this agent's ddkl-pt checkpoint")
    m.add_argument("--model", help="explicit checkpoint path")
    m.add_argument("--out-dir")
    m.add_argument("--out", help="trace CSV path")
    m.add_argument("--mpc-steps", type=int)
    m.add_argument("--mpc-seed", type=int)
    m.add_argument("--timing", action="store_true", help="record per-step solve times")
    m.set_defaults(func=cmd_mpc)

    r = sub.add_parser("report", help="merge metrics CSVs into a summary table")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (IntervalOutOfRange, ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except (NonFiniteState, SingularBlockSystem, SolverDegenerate) as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
