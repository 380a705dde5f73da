"""Command line: ``sparse-gcp {decompose,simulate,tune,verify}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import checks
from .distsim import DistributedSimulator
from .exceptions import ConfigError, GCPError
from .federated import FederatedConfig, run_federated
from .io import SyntheticSpec, generate_synthetic, init_model, load_frostt, load_model, save_frostt, save_model
from .losses import LossFunction, exact_loss
from .optimizer import AdamState, EpochConfig, default_sample_counts, run_gcp_adam, write_trace_csv
from .sampler import SCHEMES, SamplerConfig
from .tuner import StudyFixture, default_space, parse_space_file, run_study
from .validation import LAYOUTS, METHODS, check_run_flags

logger = logging.getLogger(__name__)


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; use e.g. 300x200x100") from None
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be positive, got {text!r}")
    return dims


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _add_input(p):
    g = p.add_argument_group("input")
    g.add_argument("--tensor", help="FROSTT coordinate file (1-based)")
    g.add_argument("--dims", type=_dims, help="mode sizes overriding max-index inference")
    g.add_argument("--synthetic", type=_dims, metavar="DIMS",
                   help="generate a synthetic tensor of these dims instead of reading one")
    g.add_argument("--synthetic-rank", type=int, default=5)
    g.add_argument("--density", type=float, default=0.01)
    g.add_argument("--boost", type=float, default=10.0)
    g.add_argument("--save-tensor", help="write the input tensor in FROSTT format")


def _add_solver(p):
    g = p.add_argument_group("model and sampling")
    g.add_argument("--rank", type=int, default=5)
    g.add_argument("--loss", choices=("gaussian", "poisson"), default="poisson")
    g.add_argument("--sampling", choices=SCHEMES, default="semi-stratified")
    g.add_argument("--fused", type=_on_off, default=False, metavar="{on,off}")
    g.add_argument("--gnzs", type=int)
    g.add_argument("--gzs", type=int)
    g.add_argument("--fnzs", type=int)
    g.add_argument("--fzs", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--init-model", help="start from this model file instead of a random one")
    g = p.add_argument_group("optimizer")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--epoch-iters", type=int, default=100)
    g.add_argument("--rate", type=float, default=1e-3)
    g.add_argument("--decay", type=float, default=0.1)
    g.add_argument("--adam-beta1", type=float, default=0.9)
    g.add_argument("--adam-beta2", type=float, default=0.999)
    g.add_argument("--adam-eps", type=float, default=1e-8)
    g.add_argument("--max-fails", type=int, default=3)
    g.add_argument("--no-timing", action="store_true",
                   help="write elapsed_s as 0 so traces are reproducible byte for byte")


def _add_parallel(p, default_workers: int):
    g = p.add_argument_group("parallel simulation")
    g.add_argument("--method", choices=METHODS, default="sync")
    g.add_argument("--workers", type=int, default=default_workers)
    g.add_argument("--scheme", choices=LAYOUTS, default="all-reduce")
    g.add_argument("--downpour-iters", type=int, default=1, help="synchronization period in epochs")
    g.add_argument("--meta-rate", type=float, help="server Adam rate (default: client rate)")


def _add_outputs(p):
    g = p.add_argument_group("outputs")
    g.add_argument("--model-out")
    g.add_argument("--trace-out")
    g.add_argument("--ledger-out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-gcp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="fit a GCP model")
    _add_input(p)
    _add_solver(p)
    _add_parallel(p, 1)
    _add_outputs(p)

    p = sub.add_parser("simulate", help="fit on a simulated processor grid and dump the ledger")
    _add_input(p)
    _add_solver(p)
    _add_parallel(p, 4)
    _add_outputs(p)

    p = sub.add_parser("tune", help="LHS hyperparameter study")
    _add_input(p)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--loss", choices=("gaussian", "poisson"), default="poisson")
    p.add_argument("--sampling", choices=SCHEMES, default="semi-stratified")
    p.add_argument("--space", help="parameter file, one 'name: lower,upper,scale' per line")
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--samples", type=int, help="first-stage LHS size (default 2 x params)")
    p.add_argument("--starts", type=int, default=1)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--epoch-iters", type=int, default=20)
    p.add_argument("--gnzs", type=int, default=200)
    p.add_argument("--fnzs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--report", help="per-trial CSV")
    p.add_argument("--summary", help="per-parameter coefficient CSV")

    p = sub.add_parser("verify", help="run kernel self-checks; optionally score a model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tensor")
    p.add_argument("--dims", type=_dims)
    p.add_argument("--model")
    p.add_argument("--loss", choices=("gaussian", "poisson"), default="poisson")
    return parser


def _load_input(args):
    if args.tensor and args.synthetic:
        raise ConfigError("give either --tensor or --synthetic, not both")
    if args.tensor:
        x = load_frostt(args.tensor, args.dims)
    elif args.synthetic:
        spec = SyntheticSpec(args.synthetic, args.synthetic_rank, loss=args.loss, seed=args.seed,
                             density=args.density, boost=args.boost)
        x, _ = generate_synthetic(spec)
    else:
        raise ConfigError("an input is required: --tensor FILE or --synthetic DIMS")
    if args.save_tensor:
        save_frostt(x, args.save_tensor)
    return x


def _check_solver_flags(args, force_grid=False):
    check_run_flags(sampling=args.sampling, fused=args.fused, method=args.method,
                    scheme=args.scheme, workers=args.workers)
    if args.ledger_out and args.method != "sync":
        raise ConfigError("--ledger-out records synchronous communication; use --method sync")
    if args.ledger_out and not (force_grid or args.workers > 1 or args.scheme != "all-reduce"):
        raise ConfigError("--ledger-out needs the distributed simulator (--workers > 1 or simulate)")
    if args.rank < 1:
        raise ConfigError("--rank must be at least 1")
    if args.downpour_iters < 1:
        raise ConfigError("--downpour-iters must be at least 1")
    if args.method == "sync" and args.meta_rate is not None:
        raise ConfigError("--meta-rate applies only to --method fedadam")
    if args.seed < 0:
        raise ConfigError("--seed must be nonnegative")


def cmd_fit(args, force_grid: bool = False) -> int:
    _check_solver_flags(args, force_grid)
    x = _load_input(args)
    loss = LossFunction(args.loss)
    gnzs, gzs, fnzs, fzs = default_sample_counts(x, args.gnzs, args.gzs, args.fnzs, args.fzs)
    cfg = SamplerConfig(args.sampling, gnzs, gzs)
    epoch_cfg = EpochConfig(args.epochs, args.epoch_iters, args.max_fails)
    if args.init_model:
        model0 = load_model(args.init_model)
        if model0.dims != x.dims or model0.rank != args.rank:
            raise ConfigError("--init-model does not match the tensor dims and --rank")
    else:
        model0 = init_model(x, args.rank, args.seed)
    adam = dict(rate=args.rate, decay=args.decay, beta1=args.adam_beta1, beta2=args.adam_beta2,
                eps=args.adam_eps, lower_bound=loss.lower_bound)
    timing = not args.no_timing
    topo = None
    if args.method == "sync":
        if force_grid or args.workers > 1 or args.scheme != "all-reduce":
            topo = DistributedSimulator(x, args.workers, scheme=args.scheme)
            logger.info("processor grid %s", topo.grid.counts)
        state = AdamState.for_model(model0, **adam)
        model, trace = run_gcp_adam(x, model0, loss, cfg, epoch_cfg, topo, state=state,
                                    seed=args.seed, fused=args.fused, fnz=fnzs, fz=fzs,
                                    timing=timing)
    else:
        fed = FederatedConfig(tau=args.downpour_iters, meta_rate=args.meta_rate)
        model, trace = run_federated(x, model0, loss, cfg, epoch_cfg, fed, method=args.method,
                                     n_workers=args.workers, client_params=adam, seed=args.seed,
                                     fused=args.fused, fnz=fnzs, fz=fzs, timing=timing)
    if args.model_out:
        save_model(model, args.model_out)
    if args.trace_out:
        write_trace_csv(trace, args.trace_out)
    if args.ledger_out:
        topo.ledger.write_csv(args.ledger_out)
    info = trace.info
    print(f"nnz={x.nnz} dims={'x'.join(map(str, x.dims))} iterations={info.iterations} "
          f"accepted={len(info.accepted)} rejected={len(info.rejected)} "
          f"est_loss={info.best_loss:.6g} exact_loss={exact_loss(x, model, loss):.6g}")
    if topo is not None:
        totals = topo.ledger.totals()
        print("ledger " + " ".join(f"{k}={v}" for k, v in totals.items()))
    return 0


def cmd_tune(args) -> int:
    x = _load_input(args)
    space = parse_space_file(args.space) if args.space else default_space()
    fixture = StudyFixture(x, args.rank, args.loss, args.epochs, args.epoch_iters,
                           args.gnzs, args.gnzs, args.fnzs, args.fnzs, args.workers, args.sampling)
    report = run_study(space, fixture, args.samples, args.starts, args.stages, seed=args.seed,
                       timing=not args.no_timing)
    if args.report:
        report.write_trials_csv(args.report)
    if args.summary:
        report.write_summary_csv(args.summary)
    print(f"trials={len(report.trials)} failures={report.failures} "
          f"global_min={report.global_min:.6g}")
    print(report.summary_table())
    return 0


def cmd_verify(args) -> int:
    results = checks.run_all(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    if args.model:
        if not args.tensor:
            raise ConfigError("--model needs --tensor")
        x = load_frostt(args.tensor, args.dims)
        model = load_model(args.model)
        if model.dims != x.dims:
            raise ConfigError(f"model dims {model.dims} differ from tensor dims {x.dims}")
        print(f"exact_loss={exact_loss(x, model, LossFunction(args.loss)):.17g}")
    return 0 if all(r.ok for r in results) else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "decompose":
            return cmd_fit(args)
        if args.command == "simulate":
            return cmd_fit(args, force_grid=True)
        if args.command == "tune":
            return cmd_tune(args)
        return cmd_verify(args)
    except GCPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numerical failure ({exc})", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
