"""Command-line entry point: ``srhc {validate,lambda,stability,solve-once,simulate}``.

Exit status is 0 on success.  Library failures exit with the ``exit_code``
of their exception class; unreadable files exit with 3 and malformed
configuration with 4.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import SRHCError, SolveFailed
from .pipeline import (StochasticRecedingHorizonController, assumption_checks, load_experiment,
                       load_problem)
from .stability import report

EXIT_IO = 3
EXIT_CONFIG = 4


def _config(args):
    cfg = load_experiment(args.config) if getattr(args, "config", None) else {"version": 1}
    if getattr(args, "model", None):
        cfg["model"] = args.model
    if not cfg.get("model"):
        raise ValueError("no model file given (use --model or --config)")
    lam = cfg.setdefault("lambda", {})
    for flag, key in (("lambda_samples", "samples"), ("lambda_seed", "seed"),
                      ("lambda_cache_dir", "cache_dir")):
        if getattr(args, flag, None) is not None:
            lam[key] = getattr(args, flag)
    if getattr(args, "epsilon", None) is not None:
        cfg.setdefault("stability", {})["epsilon"] = args.epsilon
    if getattr(args, "tol", None) is not None:
        cfg.setdefault("solver", {})["tol"] = args.tol
    if getattr(args, "soft", None):
        cfg["soft"] = args.soft
    sim = cfg.setdefault("simulation", {})
    for flag in ("t_end", "paths", "master_seed", "workers"):
        if getattr(args, flag, None) is not None:
            sim[flag] = getattr(args, flag)
    if getattr(args, "use_soft", False):
        sim["use_soft"] = True
    if getattr(args, "output_dir", None):
        cfg["output_dir"] = args.output_dir
    return cfg


def _controller(cfg, force=False):
    lam = cfg.get("lambda", {})
    soft = cfg.get("soft")
    est = StochasticRecedingHorizonController(
        epsilon=float(cfg.get("stability", {}).get("epsilon", 10.0)),
        lambda_samples=int(lam.get("samples", 100_000)),
        lambda_seed=int(lam.get("seed", 0)),
        lambda_cache_dir=lam.get("cache_dir"),
        tol=float(cfg.get("solver", {}).get("tol", 1e-8)),
        soft=soft,
        delta_u_max=cfg.get("solver", {}).get("delta_u_max"),
        allow_unstable=bool(cfg.get("simulation", {}).get("allow_unstable", False)),
    )
    return est.fit(load_problem(cfg["model"]), force_lambda=force)


def cmd_validate(args):
    problem = load_problem(_config(args)["model"])
    checks = assumption_checks(problem)
    errors = []
    for name, ok, detail, err in checks:
        print(f"{'ok  ' if ok else 'FAIL'}  {name}{'  ' + detail if detail else ''}")
        if err is not None:
            errors.append(err)
    return errors[0].exit_code if errors else 0


def cmd_lambda(args):
    est = _controller(_config(args), force=args.force)
    ls = est.lambdas_
    state = "hit" if est.lambda_cache_hit_ else "computed"
    print(f"cache {state}: {est.lambda_key_}")
    print(f"samples {ls.sample_count}, seed {ls.seed}")
    for name in ("phi", "phi_e", "w_phi", "phi_phi"):
        se = getattr(ls, f"se_{name}")
        if se is not None:
            print(f"max standard error lambda_{name:<8} {float(np.max(se)):.3e}")
    return 0


def cmd_stability(args):
    est = _controller(_config(args))
    text, ok = report(est.split_, est.stability_)
    print(text)
    print(f"configured u_max   {est.horizon_.u_max:.10g}"
          f" ({'>=' if est.horizon_.u_max >= est.stability_.u_max_star else '<'} U*_max)")
    return 0 if ok else 1


def cmd_solve_once(args):
    est = _controller(_config(args))
    xhat = np.array([float(v) for v in args.xhat.split(",")])
    prog = est.build_program(xhat)
    if args.dump:
        prog.to_json(args.dump)
    policy = est.solve(xhat)
    out = {"eta": policy.eta.tolist(), "theta": policy.theta.tolist(),
           "drift_active": prog.drift is not None,
           "certified": policy.certified(est.horizon_.u_max, est.horizon_.phi_max),
           **{k: v for k, v in policy.info.items()}}
    print(json.dumps(out, indent=2, default=float))
    return 0


def cmd_simulate(args):
    cfg = _config(args)
    est = _controller(cfg)
    s = cfg.get("simulation", {})
    sim = est.simulation_config(
        t_end=int(s.get("t_end", 200)), paths=int(s.get("paths", 200)),
        master_seed=int(s.get("master_seed", 0)), use_soft=bool(s.get("use_soft", False)),
        delta=float(s.get("delta", 1e-3)), nu_bar=int(s.get("nu_bar", 30)),
        x0=s.get("x0"), workers=int(s.get("workers", 1)))
    out = Path(cfg.get("output_dir") or "runs")
    (out / "paths").mkdir(parents=True, exist_ok=True)
    try:
        stats = est.simulate(sim)
    except SolveFailed as exc:
        if exc.record is not None:
            exc.record.to_csv(out / "paths" / f"path_{exc.path:04d}_partial.csv")
        with open(out / "summary.json", "w") as fh:
            json.dump({"failed": str(exc), "infeasible_solves": 1}, fh, indent=2)
        raise
    for rec in stats.records:
        rec.to_csv(out / "paths" / f"path_{rec.path:04d}.csv")
    stats.to_csv(out / "batch.csv")
    stats.write_summary(out / "summary.json")
    summ = stats.summary
    print(f"paths {summ['paths']}, t_end {summ['t_end']}, solves {summ['solves']}, "
          f"infeasible {summ['infeasible_solves']}, input violations {summ['input_violations']}")
    print(f"wrote {out}")
    return 0 if summ["infeasible_solves"] == 0 and summ["input_violations"] == 0 else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="srhc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, lam=True):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--model", help="model JSON (overrides the config)")
        if lam:
            p.add_argument("--lambda-samples", type=int)
            p.add_argument("--lambda-seed", type=int)
            p.add_argument("--lambda-cache-dir")
            p.add_argument("--epsilon", type=float)
            p.add_argument("--tol", type=float)
        return p

    common(sub.add_parser("validate", help="check plant assumptions and the Jordan split"),
           lam=False).set_defaults(func=cmd_validate)
    p = common(sub.add_parser("lambda", help="precompute and cache the expectation matrices"))
    p.add_argument("--force", action="store_true", help="recompute even on a cache hit")
    p.set_defaults(func=cmd_lambda)
    common(sub.add_parser("stability", help="report drift constants and U*_max")).set_defaults(
        func=cmd_stability)
    p = common(sub.add_parser("solve-once", help="solve the program at one estimate"))
    p.add_argument("--xhat", required=True, help="comma-separated estimate")
    p.add_argument("--soft", help="soft-constraint spec JSON")
    p.add_argument("--dump", help="write the assembled program as JSON")
    p.set_defaults(func=cmd_solve_once)
    p = common(sub.add_parser("simulate", help="closed-loop batch simulation"))
    p.add_argument("--t-end", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--master-seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--use-soft", action="store_true")
    p.add_argument("--soft", help="soft-constraint spec JSON")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SRHCError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
