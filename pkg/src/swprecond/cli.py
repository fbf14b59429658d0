"""Command-line entry point: ``swprecond <command> [--config F] [--seed S] [--out DIR]``.

Exit codes: 0 success, 1 configuration or input error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, VersionError

log = logging.getLogger("swprecond")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="scenario JSON (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="seed (non-negative, < 2**64)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="swprecond", description="Incremental 4D-Var with spectral preconditioners for CG.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="free run; write snapshots")
    p.add_argument("--days", type=float, help="length of an extra free run after spin-up")
    p.add_argument("--perturb", type=float, default=0.0,
                   help="add seeded white noise of this climatological fraction before the run")

    p = sub.add_parser("gen-data", parents=[common], help="generate training shards")
    p.add_argument("--n-states", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--max-shard-bytes", type=int)

    p = sub.add_parser("train", parents=[common], help="train the surrogate")
    p.add_argument("--steps", type=int)
    p.add_argument("--data", help="directory of shards to train on (default: online stream)")

    p = sub.add_parser("spectrum", parents=[common], help="eigenvalue diagnostics of A_x and L^T A_x L")
    p.add_argument("--state", choices=("background", "base"), default="background")
    p.add_argument("--iters", type=int, default=80, help="Lanczos iterations")
    p.add_argument("--r", type=int, action="append", help="exact-eigenpair ranks to report")
    p.add_argument("--checkpoint", help="also report the learned preconditioner")

    p = sub.add_parser("bench", parents=[common], help="paired preconditioner experiment")
    p.add_argument("--cycles", type=int)
    return parser


def _load(args):
    from .config import Scenario

    sc = Scenario.load(args.config) if args.config else Scenario.from_dict({})
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must lie in [0, 2**64)")
        sc = sc.with_overrides(seed=args.seed)
    return sc


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_simulate(args, sc, env):
    from . import dataset
    from .swmodel import total_mass, unpack, write_snapshot

    x = env.base
    if args.perturb:
        x = x + dataset.perturbation(env.grid, env.amplitudes(args.perturb), sc.seed, 20, 0)
    state = unpack(x, env.grid)
    if args.days:
        state = env.model.propagate(state, sc.steps_for_days(args.days))
    write_snapshot(os.path.join(args.out, "state.swst"), state, env.grid)
    write_snapshot(os.path.join(args.out, "background.swst"), unpack(env.xb, env.grid), env.grid)
    _write_json(os.path.join(args.out, "climatology.json"), {
        "clim_std": {"eta": env.clim_std[0], "u": env.clim_std[1], "v": env.clim_std[2]},
        "mass": total_mass(state, env.grid),
        "n": env.n,
    })


def cmd_gen_data(args, sc, env):
    from . import dataset

    ds = sc.section("dataset")
    n_states = args.n_states or int(ds["n_states"])
    k = args.k or int(ds["k"])
    cap = args.max_shard_bytes if args.max_shard_bytes is not None else ds["shard_max_bytes"]
    samples = dataset.generate_batch(env.sampler_config(), env.problem, n_states, k)
    paths = dataset.write_shards(samples, args.out, cap)
    _write_json(os.path.join(args.out, "manifest.json"), {
        "n": env.n, "k": k, "count": n_states, "seed": sc.seed,
        "shards": [os.path.basename(p) for p in paths],
    })


def cmd_train(args, sc, env):
    from . import dataset, surrogate as S

    sec, tr = sc.section("surrogate"), sc.section("training")
    arch = dict(sec["arch"])
    arch.setdefault("grid", [env.grid.nx, env.grid.ny])
    cfg = S.SurrogateConfig(env.n, int(sec["r"]), env.sigmoid_bound(), arch,
                            tuple(env.clim_std), sec["ortho"], float(sec["penalty"]), sc.seed)
    sur = S.Surrogate(cfg)
    k = int(sc.section("dataset")["k"])
    if args.data:
        with open(os.path.join(args.data, "manifest.json")) as fh:
            manifest = json.load(fh)
        paths = [os.path.join(args.data, p) for p in manifest["shards"]]
        pool = list(dataset.iter_shards(paths))
        samples = (pool[i % len(pool)] for i in range(10**12))
    else:
        samples = dataset.stream(env.sampler_config(), env.problem, k)
    tcfg = S.TrainConfig(lr=float(tr["lr"]), steps=args.steps or int(tr["steps"]),
                         batch_size=int(tr["batch_size"]), objective=tr["objective"], seed=sc.seed)
    result = S.train(sur, samples, tcfg)
    held = dataset.generate_batch(env.sampler_config(seed=sc.seed + int(tr["heldout_seed_offset"])),
                                  env.problem, int(tr["n_heldout"]), k)
    sur.save(os.path.join(args.out, "surrogate.surr"))
    S.write_curve_csv(os.path.join(args.out, "training_curve.csv"), result.curve)
    _write_json(os.path.join(args.out, "train_summary.json"), {
        "heldout": S.evaluate(sur, held), "steps": result.steps, "aborted": result.aborted,
        "n_params": sur.n_params, "M": cfg.M, "r": cfg.r,
    })


def cmd_spectrum(args, sc, env):
    from . import krylov, precond

    x = env.xb if args.state == "background" else env.base
    A = env.problem.gn_operator(x)
    n = env.n

    def estimate(op):
        est = krylov.lanczos_extreme_eigs(op, args.iters, seed=sc.seed)
        return {"lambda_max": est.lambda_max, "lambda_min": est.lambda_min, "kappa": est.kappa,
                "iterations": est.iterations, "partial": est.partial}

    def sandwich(L):
        return krylov.as_operator(lambda v: L.rmatvec(A.matvec(L.matvec(v))), n)

    out = {"state": args.state, "n": n, "A": estimate(A),
           "b_half": estimate(sandwich(precond.b_half_preconditioner(env.cov)))}
    ranks = args.r or [int(sc.section("surrogate")["r"])]
    pairs = precond.exact_leading_eigs(A, max(ranks))
    for r in ranks:
        p = pairs.truncate(r)
        mu = precond.MuPolicy("min").resolve(p.lam)
        out[f"exact_eigs(r={r},mu=min)"] = dict(estimate(sandwich(precond.split_L(p, mu))), mu=mu)
    if args.checkpoint:
        from .surrogate import Surrogate, build_preconditioner

        sur = Surrogate.load(sc.resolve_path(args.checkpoint))
        L, info = build_preconditioner(sur, x, precond.MuPolicy("min"))
        out["learned(mu=min)"] = dict(estimate(sandwich(L)), mu=info["mu"])
    _write_json(os.path.join(args.out, "spectrum.json"), out)
    print(json.dumps({k: v["kappa"] for k, v in out.items() if isinstance(v, dict)}, sort_keys=True))


def cmd_bench(args, sc, env):
    from . import bench

    if args.cycles:
        sc = sc.with_overrides(experiment={"cycles": args.cycles})
    cfg = bench.ExperimentConfig.from_scenario(sc)
    report = bench.run_experiment(env, cfg)
    bench.emit_report(report, args.out)
    print(json.dumps(report.summary(), indent=2, sort_keys=True))


COMMANDS = {"simulate": cmd_simulate, "gen-data": cmd_gen_data, "train": cmd_train,
            "spectrum": cmd_spectrum, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sc = _load(args)
        from .config import environment

        env = environment(sc)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args, sc, env)
    except (ConfigError, VersionError, FileNotFoundError) as exc:
        print(f"swprecond: error: {exc}", file=sys.stderr)
        return 1
    return 0


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
