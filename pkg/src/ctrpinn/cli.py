"""Command-line entry point: ``ctrpinn <command> [options]``.

Lengths are in metres and angles in radians unless a flag says otherwise.
Every command writes ``<output>.meta.json`` next to its main output with the
resolved options, seeds, robot hash and package version.

Exit status: 0 success, 2 input error, 3 solver non-convergence, 4 numerical
failure (non-finite integration or training loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import metadata as importlib_metadata
from pathlib import Path

import numpy as np

from . import bvp, data, evaluation, training
from .pinn import NORMS, LossWeights, Network, ObservationSet
from .robot import RESTRICTED, SNAP_FREE, Actuation, ActuationDomain, ConfigError, DomainError, load_robot
from .rod import THETA, UZ, H, P

log = logging.getLogger("ctrpinn")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_NUMERICAL = 4


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def package_version() -> str:
    try:
        return importlib_metadata.version("artifact")
    except importlib_metadata.PackageNotFoundError:
        return "unknown"


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_metadata(target: str | Path, args: argparse.Namespace, robot, **extra) -> Path:
    """Sidecar ``<target>.meta.json`` describing how ``target`` was produced."""
    opts = {k: _jsonable(v) for k, v in vars(args).items() if k not in ("func",)}
    meta = {"command": args.command, "options": opts, "robot": robot.to_dict(),
            "robot_hash": robot.digest(), "version": package_version(), **extra}
    path = Path(str(target) + ".meta.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, default=_jsonable))
    return path


def _domain(args) -> ActuationDomain:
    if getattr(args, "alpha_max", None) is not None:
        return ActuationDomain(alpha_max=args.alpha_max)
    return RESTRICTED if getattr(args, "restricted", False) else SNAP_FREE


def _tau(values) -> Actuation:
    tau = np.asarray(values, dtype=float)
    if tau.shape != (6,):
        raise CommandError("an actuation needs six numbers: beta1 beta2 beta3 alpha1 alpha2 alpha3")
    return Actuation.from_vector(tau)


def _load_weights(path, args, robot) -> Network:
    path = Path(path)
    if not path.exists():
        raise CommandError(f"weight file not found: {path}")
    net = Network.load(path)
    stored = net.metadata.get("robot_hash")
    if stored != robot.digest():
        msg = (f"weight file {path} was trained for robot {stored}, "
               f"but the robot file hashes to {robot.digest()}")
        if not args.allow_robot_mismatch:
            raise CommandError(msg + " (pass --allow-robot-mismatch to proceed)")
        log.warning("%s; continuing because --allow-robot-mismatch was given", msg)
    net.robot = robot
    net.metadata["robot_hash"] = robot.digest()
    return net


def _solve_opts(args) -> bvp.SolveOptions:
    return bvp.SolveOptions(tol=args.tol, max_iter=args.max_iter, step=args.step)


# ------------------------------------------------------------------ commands

def cmd_solve(args) -> int:
    robot = load_robot(args.robot)
    act = _tau(args.tau)
    domain = _domain(args)
    domain.check(act.vector)
    opts = _solve_opts(args)
    sol = bvp.solve(robot, act, opts, domain)
    bvp.export_backbone(sol, args.output, opts, extra={"robot_hash": robot.digest()})
    write_metadata(args.output, args, robot, converged=sol.converged, iterations=sol.iterations,
                   residual=sol.residual.tolist())
    print(f"{'converged' if sol.converged else 'NOT converged'} in {sol.iterations} iterations, "
          f"max residual {np.max(np.abs(sol.residual)):.3g}, tip {np.array2string(sol.tip, precision=6)}")
    return EXIT_OK if sol.converged else EXIT_CONVERGENCE


def cmd_export_shape(args) -> int:
    """Backbone of the network (``--weights``) or the solver on a uniform grid."""
    robot = load_robot(args.robot)
    act = _tau(args.tau)
    domain = _domain(args)
    domain.check(act.vector)
    s = np.linspace(0.0, robot.tube_ends(act.vector)[0], args.points)
    if args.weights:
        net = _load_weights(args.weights, args, robot)
        states = net.predict(s, act.vector)
        source = "network"
    else:
        sol = bvp.solve(robot, act, _solve_opts(args), domain)
        if not sol.converged:
            raise CommandError("solver did not converge", EXIT_CONVERGENCE)
        states = sol.interpolant()(s)
        source = "solver"
    header = "\t".join(bvp.EXPORT_COLUMNS)
    meta = {"format": "ctrpinn-backbone", "version": 1, "source": source,
            "actuation": {"beta": list(act.beta), "alpha": list(act.alpha)}}
    table = np.column_stack([s, states[:, P], states[:, H], states[:, THETA], states[:, UZ],
                             states[:, 0:2]])
    np.savetxt(args.output, table, delimiter="\t", header="meta " + json.dumps(meta) + "\n" + header,
               fmt="%.17g")
    write_metadata(args.output, args, robot, source=source)
    print(f"wrote {len(s)} points ({source}) to {args.output}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    robot = load_robot(args.robot)
    domain = _domain(args)
    rng = np.random.default_rng(args.seed)
    oset = data.generate_synthetic(args.n, rng, robot, domain, _solve_opts(args), threads=args.threads)
    data.save_observations(oset, args.output, robot, seed=args.seed, domain=domain.to_dict())
    write_metadata(args.output, args, robot, records=len(oset))
    print(f"wrote {len(oset)} records for {args.n} actuations to {args.output}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    robot = load_robot(args.robot)
    if not Path(args.input).exists():
        raise CommandError(f"dataset not found: {args.input}")
    mapping = data.ColumnMap.load(args.map)
    rng = np.random.default_rng(args.seed)
    report = Path(args.report or str(args.output) + ".report.tsv")
    domain = _domain(args) if args.alpha_max is not None or args.restricted else RESTRICTED
    try:
        res = data.ingest_experimental(args.input, mapping, robot, domain, args.sample_size, rng)
    except data.IngestError as exc:
        if exc.report:
            report.write_text("\n".join(f"{ln}\tmalformed\t{why}" for ln, why in exc.report) + "\n")
        raise
    res.write_report(report)
    oset = res.observations
    extra = {}
    if args.screen is not None:
        scr = data.outlier_screen(oset, robot, k=args.screen, domain=domain, threads=args.threads)
        oset = scr.clean
        extra = {"screen_threshold": scr.threshold, "flagged": len(scr.flagged)}
        print(f"outlier screen flagged {len(scr.flagged)} records (threshold {scr.threshold:.3g} m)")
    data.save_observations(oset, args.output, robot, seed=args.seed, input=str(args.input), **extra)
    write_metadata(args.output, args, robot, kept=len(oset), rejected=len(res.rejected),
                   malformed=len(res.malformed), **extra)
    print(f"kept {res.kept_rows} rows ({len(oset)} records), rejected {len(res.rejected)}, "
          f"malformed {len(res.malformed)}; report in {report}")
    return EXIT_OK


def _read_obs(paths, robot) -> ObservationSet | None:
    sets = []
    for p in paths or []:
        if not Path(p).exists():
            raise CommandError(f"dataset not found: {p}")
        oset, meta = data.load_observations(p)
        if meta.get("robot_hash") not in (None, robot.digest()):
            log.warning("dataset %s was produced for robot %s", p, meta.get("robot_hash"))
        sets.append(oset)
    return ObservationSet.concat(*sets) if sets else None


def cmd_train(args) -> int:
    robot = load_robot(args.robot)
    run_dir = Path(args.run_dir)
    resume = args.resume and (run_dir / "checkpoint.npz").exists()
    cfg = training.TrainConfig(
        stage=args.stage, n_colloc=args.n_colloc, n_boundary=args.n_boundary, n_obs=args.n_obs,
        seed=args.seed, alpha_max=_domain(args).alpha_max,
        hidden=tuple(args.hidden), dtype=args.dtype, max_iter=args.max_iter,
        checkpoint_every=args.checkpoint_every, obs_mode=args.obs_mode, anchor_base=args.anchor_base,
        anchor_distal=args.anchor_distal, weights=LossWeights(norm=args.loss_norm).to_dict())
    init = None
    obs = None
    if not resume:
        if args.stage == "experimental":
            if not args.weights_in:
                raise CommandError("--stage experimental requires --weights-in (a stage-1 network)")
            if not args.obs:
                raise CommandError("--stage experimental requires --obs with the measured records")
        if args.weights_in:
            init = _load_weights(args.weights_in, args, robot)
        obs = _read_obs(args.obs, robot)
        if args.stage == "experimental":
            if args.obs_mode == "augment":
                rng = np.random.default_rng(args.seed + 1)
                synth = training.synthetic_observations(robot, cfg.n_obs, rng, cfg.domain, args.threads)
                obs = ObservationSet.concat(synth, obs)
        elif obs is None and cfg.n_obs > 0:
            rng = np.random.default_rng(args.seed + 1)
            obs = training.synthetic_observations(robot, cfg.n_obs, rng, cfg.domain, args.threads)
    trainer = training.Trainer(robot, cfg, run_dir, obs=obs, init=init, resume=resume)
    try:
        reason = trainer.run(progress_every=args.progress_every)
    except training.TrainingDiverged as exc:
        raise CommandError(f"{exc}; last checkpoint kept in {run_dir}", EXIT_NUMERICAL) from None
    out = Path(args.weights_out) if args.weights_out else run_dir / "weights.npz"
    if out != run_dir / "weights.npz":
        trainer.net.save(out, stage=cfg.stage, iteration=trainer.opt.state.iteration,
                         loss=trainer.opt.state.f, train_config=trainer.cfg.to_dict())
    write_metadata(out, args, robot, stop_reason=reason, iterations=trainer.opt.state.iteration,
                   loss=trainer.opt.state.f, train_config=trainer.cfg.to_dict())
    print(f"stopped after {trainer.opt.state.iteration} iterations ({reason}); "
          f"loss {trainer.opt.state.f:.6g}; weights in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    robot = load_robot(args.robot)
    net = _load_weights(args.weights, args, robot)
    domain = net.domain if args.alpha_max is None and not args.restricted else _domain(args)
    oset = _read_obs(args.obs, robot) if args.obs else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    taus = domain.sample(args.n_acts, rng)
    rep = evaluation.backbone_error(net, robot, taus, args.grid_n, domain=domain, threads=args.threads)
    rep.write(out / "backbone_error", {"seed": args.seed, "weights": str(args.weights)})
    print(f"backbone error over {len(rep.taus)} actuations: mean {rep.mean:.4%}, max {rep.max:.4%}"
          + (f" ({len(rep.excluded)} excluded)" if rep.excluded else ""))
    for k, tau in enumerate(taus[:args.states]):
        sr = evaluation.state_recovery(net, robot, tau, domain=domain)
        sr.write(out / f"states_{k:03d}", {"seed": args.seed, "index": k})
    if oset is not None:
        if args.screen is not None:
            oset = data.outlier_screen(oset, robot, k=args.screen, domain=domain, threads=args.threads).clean
        tip = evaluation.tip_error(net, oset)
        tip.write(out / "tip_error", {"datasets": [str(p) for p in args.obs]})
        print(f"tip error over {len(oset)} records: mean {tip.normalized.mean():.4%} of s")
    write_metadata(out / "evaluate", args, robot, weights_meta=net.metadata)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    robot = load_robot(args.robot)
    net = _load_weights(args.weights, args, robot)
    domain = net.domain if args.alpha_max is None and not args.restricted else _domain(args)
    rng = np.random.default_rng(args.seed)
    bench = evaluation.runtime_bench(net, robot, args.n_acts, args.discretizations, rng,
                                     args.warmup, domain)
    bench.write(args.output, {"seed": args.seed})
    write_metadata(args.output, args, robot)
    for r in bench.reports:
        print(f"{r.method:6s} n={r.discretization:4d} median {r.median * 1e3:8.3f} ms  "
              f"IQR/median {r.relative_spread:.3f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctrpinn", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--robot", type=Path, default=None,
                        help="robot INI file (default: the bundled three-tube robot)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap for parallel solves (default: $CTRPINN_THREADS, else 1)")
    dom = common.add_mutually_exclusive_group()
    dom.add_argument("--alpha-max", type=float, default=None, help="rotation bound |alpha_i| [rad]")
    dom.add_argument("--restricted", action="store_true", help="use the |alpha| <= pi/3 domain")
    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--tol", type=float, default=1e-10, help="distal residual tolerance")
    solver.add_argument("--max-iter", type=int, default=100, help="Newton iterations")
    solver.add_argument("--step", type=float, default=None, help="RK4 step [m] (default l1/400)")
    weights = argparse.ArgumentParser(add_help=False)
    weights.add_argument("--allow-robot-mismatch", action="store_true",
                         help="accept a weight file trained for a different robot")
    tau = argparse.ArgumentParser(add_help=False)
    tau.add_argument("--tau", type=float, nargs=6, required=True,
                     metavar=("BETA1", "BETA2", "BETA3", "ALPHA1", "ALPHA2", "ALPHA3"),
                     help="translations [m] and rotations [rad]")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("solve", parents=[common, solver, tau], help="solve the rod BVP for one actuation")
    c.add_argument("-o", "--output", type=Path, default=Path("backbone.tsv"))
    c.set_defaults(func=cmd_solve)

    c = sub.add_parser("export-shape", parents=[common, solver, tau, weights],
                       help="write a backbone from the network or the solver on a uniform grid")
    c.add_argument("--weights", type=Path, default=None)
    c.add_argument("--points", type=int, default=200)
    c.add_argument("-o", "--output", type=Path, default=Path("shape.tsv"))
    c.set_defaults(func=cmd_export_shape)

    c = sub.add_parser("gen-data", parents=[common, solver], help="synthetic tip observations")
    c.add_argument("-n", type=int, default=334, help="number of actuations (three records each)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("-o", "--output", type=Path, default=Path("synthetic.tsv"))
    c.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("ingest", parents=[common], help="import a measured tip dataset")
    c.add_argument("input", type=Path)
    c.add_argument("--map", type=Path, required=True, help="column-map JSON")
    c.add_argument("--sample-size", type=int, default=None, help="seeded row subsample")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--screen", type=float, default=None, metavar="K",
                   help="drop records deviating from the solver by more than K x median")
    c.add_argument("--report", type=Path, default=None)
    c.add_argument("-o", "--output", type=Path, default=Path("experimental.tsv"))
    c.set_defaults(func=cmd_ingest)

    c = sub.add_parser("train", parents=[common, weights], help="train or fine-tune the network")
    c.add_argument("--stage", choices=("synthetic", "experimental"), default="synthetic")
    c.add_argument("--run-dir", type=Path, required=True)
    c.add_argument("--obs", type=Path, nargs="*", default=None, help="observation datasets")
    c.add_argument("--weights-in", type=Path, default=None, help="initial weights")
    c.add_argument("--weights-out", type=Path, default=None)
    c.add_argument("--obs-mode", choices=("augment", "replace"), default="augment",
                   help="stage 2: keep synthetic observations next to the measured ones, or not")
    c.add_argument("--n-colloc", type=int, default=20000)
    c.add_argument("--n-boundary", type=int, default=1000)
    c.add_argument("--n-obs", type=int, default=1000)
    c.add_argument("--hidden", type=int, nargs="+", default=[100] * 6)
    c.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    c.add_argument("--max-iter", type=int, default=20000)
    c.add_argument("--checkpoint-every", type=int, default=50)
    c.add_argument("--progress-every", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    c.add_argument("--anchor-base", action="store_true",
                   help="build the network so that p(0) = 0 holds exactly")
    c.add_argument("--anchor-distal", action="store_true",
                   help="build the network so that the free-end moment and torsions are exactly zero")
    c.add_argument("--loss-norm", choices=NORMS, default="squared",
                   help="per-group penalty: squared 2-norm (default) or plain 2-norm")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("evaluate", parents=[common, weights], help="accuracy reports for a weight file")
    c.add_argument("--weights", type=Path, required=True)
    c.add_argument("--n-acts", type=int, default=100)
    c.add_argument("--grid-n", type=int, default=50)
    c.add_argument("--states", type=int, default=3, help="state-recovery curves to export")
    c.add_argument("--obs", type=Path, nargs="*", default=None, help="datasets for tip error")
    c.add_argument("--screen", type=float, default=None, metavar="K")
    c.add_argument("--seed", type=int, default=2024)
    c.add_argument("--out-dir", type=Path, default=Path("eval"))
    c.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("benchmark", parents=[common, weights], help="runtime of network vs solver")
    c.add_argument("--weights", type=Path, required=True)
    c.add_argument("--n-acts", type=int, default=5000)
    c.add_argument("--discretizations", type=int, nargs="+", default=list(evaluation.DEFAULT_DISCRETIZATIONS))
    c.add_argument("--warmup", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("-o", "--output", type=Path, default=Path("runtime"))
    c.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DomainError, ConfigError, data.IngestError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except data.GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
