"""sparsefactor command-line interface.

Subcommands:
    simulate   synthetic dataset with a known truth
    gibbs      collapsed Gibbs chains
    cavi       best-of-N CAVI trials
    relabel    jointly align saved chains
    evaluate   metrics of saved chains or a saved variational state
    fillin     hold out entries of a dataset for the fill-in test
    run        full pipeline from a JSON config or a preset

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd
from evaluation.evaluate import (
    fill_in_rrmse,
    make_fill_in_split,
    residual_table,
    summarize,
    truth_metrics,
)
from evaluation.simulate import simulate, simulate_snr_series
from inference.cavi import load_variational_state, run_multi_trial, save_variational_state
from inference.chain import ChainManifest, load_chain, save_chain
from inference.gibbs import run_chains
from inference.relabel import relabel_chains
from shared.errors import ConfigurationError, StageError
from shared.schemas import (
    VAGUE_GAMMA,
    CaviConfig,
    ChainConfig,
    Hyperparameters,
    SimulationSpec,
    TraceFormat,
)
from shared.seeds import stream_seed
from shared.storage import (
    load_dataset,
    read_matrix,
    read_model,
    read_state,
    write_dataset,
    write_matrix,
    write_metrics,
    write_model,
    write_state,
    write_table,
)

from cli.config import PRESETS, ExperimentConfig
from cli.pipeline import run_experiment
from cli.settings import LOG_LEVELS, RuntimeSettings, configure_logging

logger = logging.getLogger("sparsefactor.cli")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

GAMMA_FIELDS = ("a_tau", "b_tau", "a_alpha", "b_alpha")

# ValueError covers pydantic ValidationError and the toolkit's validation errors
VALIDATION_ERRORS = (ValueError, ConfigurationError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# =============================================================================
# Shared argument groups
# =============================================================================


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker count")
    common.add_argument("--log-level", choices=LOG_LEVELS, default=None)
    return common


def _add_data_args(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--data", type=Path, required=required, help="delimited Y matrix")
    parser.add_argument("--mask", type=Path, default=None, help="0/1 observation mask")


def _add_prior_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("prior")
    group.add_argument("--pi", type=float, nargs="+", help="per-factor sparsity")
    group.add_argument("--sparse", type=int, default=0, help="number of sparse factors")
    group.add_argument("--dense", type=int, default=0, help="number of dense factors")
    group.add_argument(
        "--gamma", type=float, default=VAGUE_GAMMA, help="shape and rate of every gamma prior"
    )
    for name in GAMMA_FIELDS:
        flag = "--" + name.replace("_", "-")
        group.add_argument(flag, type=float, default=None, help="overrides --gamma")


def _prior(args: argparse.Namespace) -> Hyperparameters:
    gammas = {
        name: args.gamma if getattr(args, name) is None else getattr(args, name)
        for name in GAMMA_FIELDS
    }
    if args.pi:
        return Hyperparameters(pi=args.pi, **gammas)
    if args.sparse or args.dense:
        pi = Hyperparameters.from_split(args.sparse, args.dense).pi
        return Hyperparameters(pi=pi, **gammas)
    raise ValueError("give the prior with --pi or with --sparse/--dense")


def _trace_format(args: argparse.Namespace) -> TraceFormat:
    return TraceFormat.NPZ if args.binary_traces else TraceFormat.TSV


# =============================================================================
# Subcommands
# =============================================================================


def cmd_simulate(args: argparse.Namespace) -> int:
    seed = stream_seed(args.seed, "simulate")
    if args.preset == "reference":
        spec = SimulationSpec.reference_preset(snr=args.snr, seed=seed)
    else:
        if args.g is None or args.n is None or args.pi is None:
            raise ValueError("give --g, --n and --pi, or --preset reference")
        spec = SimulationSpec(g=args.g, n=args.n, k=len(args.pi), pi=args.pi, snr=args.snr, seed=seed)

    if args.snrs:
        for snr, (data, truth) in zip(args.snrs, simulate_snr_series(spec, args.snrs)):
            _write_simulation(args.out / f"snr_{snr:g}", spec.model_copy(update={"snr": snr}), data, truth)
    else:
        data, truth = simulate(spec)
        _write_simulation(args.out, spec, data, truth)
    return EXIT_OK


def _write_simulation(out: Path, spec: SimulationSpec, data, truth) -> None:
    write_dataset(out, data)
    write_state(out / "truth", truth)
    write_model(out / "simulation.json", spec)
    logger.info(f"Wrote simulated {data.g}x{data.n} dataset to {out}")


def cmd_gibbs(args: argparse.Namespace) -> int:
    data = load_dataset(args.data, args.mask)
    hyper = _prior(args)
    config = ChainConfig(
        iterations=args.iterations,
        burn_in=args.burn_in,
        thin=args.thin,
        seed=stream_seed(args.seed, "gibbs"),
    )
    chains = run_chains(data, hyper, config, args.chains, n_jobs=args.threads)
    for c, chain in enumerate(chains):
        save_chain(args.out / f"chain_{c}", chain, (data.g, data.n, hyper.k), _trace_format(args))
    return EXIT_OK


def cmd_cavi(args: argparse.Namespace) -> int:
    data = load_dataset(args.data, args.mask)
    hyper = _prior(args)
    config = CaviConfig(
        max_sweeps=args.max_sweeps,
        abs_tol=args.abs_tol,
        rel_tol=args.rel_tol,
        elbo_every=args.elbo_every,
        seed=stream_seed(args.seed, "cavi"),
    )
    multi = run_multi_trial(
        data,
        hyper,
        config,
        args.trials,
        n_jobs=args.threads,
        early_stop_sweeps=args.early_stop_sweeps,
    )
    save_variational_state(args.out / "best_state", multi.best.state)
    table = pd.DataFrame(
        {
            "trial": range(len(multi.trials)),
            "seed": [str(t.seed) for t in multi.trials],
            "elbo": multi.elbos,
            "converged": [t.converged for t in multi.trials],
            "sweeps": [t.sweeps for t in multi.trials],
        }
    )
    write_table(args.out / "trials.tsv", table)
    for t, trial in enumerate(multi.trials):
        write_table(args.out / f"trial_{t}_elbo.tsv", pd.DataFrame({"elbo": trial.elbo_trace}))
    print(f"best trial {multi.best_index}: ELBO {multi.best.elbo:.10g}")
    return EXIT_OK


def cmd_relabel(args: argparse.Namespace) -> int:
    chains = [load_chain(d) for d in args.chains]
    result = relabel_chains(
        chains, normalize=args.normalize, max_iterations=args.max_iterations, n_jobs=args.threads
    )
    for c, (source, chain) in enumerate(zip(args.chains, result.chains)):
        save_chain(args.out / f"chain_{c}", chain, _chain_dims(source), _trace_format(args))
    write_table(args.out / "relabel_risk.tsv", pd.DataFrame({"risk": result.risk_trace}))
    print(f"relabelling {'converged' if result.converged else 'stopped'} after {result.iterations} iteration(s)")
    return EXIT_OK


def _chain_dims(directory: Path) -> tuple[int, int, int]:
    """(G, N, K) from a saved chain's manifest; empty chains carry no arrays."""
    manifest = read_model(Path(directory) / "manifest.json", ChainManifest)
    return manifest.g, manifest.n, manifest.k


def cmd_evaluate(args: argparse.Namespace) -> int:
    if bool(args.chains) == (args.cavi_state is not None):
        raise ValueError("give either --chains or --cavi-state")
    if args.chains:
        fitted = [load_chain(d) for d in args.chains]
    else:
        fitted = load_variational_state(args.cavi_state)
    summary = summarize(fitted)

    data = heldout = None
    if args.heldout is not None or args.residuals:
        if args.data is None:
            raise ValueError("--heldout and --residuals need --data (the full matrix)")
        data = load_dataset(args.data, args.mask)
    if args.heldout is not None:
        heldout = read_matrix(args.heldout)[0].astype(int)

    metrics: dict[str, float] = {}
    if args.truth is not None:
        metrics.update(truth_metrics(summary, read_state(args.truth)))
    if heldout is not None:
        metrics["fill_in_rrmse"] = fill_in_rrmse(summary, data, heldout)
    if not metrics:
        raise ValueError("nothing to evaluate against: give --truth or --heldout")

    write_metrics(args.out / "metrics.tsv", metrics)
    if args.residuals:
        write_table(args.out / "residuals.tsv", residual_table(summary, data, heldout))
    for key, value in metrics.items():
        print(f"{key}\t{value:.6g}")
    return EXIT_OK


def cmd_fillin(args: argparse.Namespace) -> int:
    data = load_dataset(args.data, args.mask)
    train, heldout = make_fill_in_split(data, args.fraction, stream_seed(args.seed, "split"))
    write_dataset(args.out, train, name="train")
    write_matrix(args.out / "heldout.tsv", heldout)
    write_metrics(
        args.out / "metrics.tsv",
        {
            "observed_count": data.n_observed,
            "heldout_count": len(heldout),
            "heldout_fraction": len(heldout) / data.n_observed,
            "train_observed_count": train.n_observed,
        },
    )
    print(f"held out {len(heldout)} of {data.n_observed} observed entries")
    return EXIT_OK


def _resolve_config(args: argparse.Namespace, settings: RuntimeSettings) -> ExperimentConfig:
    if (args.config is None) == (args.preset is None):
        raise ValueError("give exactly one of --config and --preset")
    if args.config is not None:
        config = ExperimentConfig.from_file(args.config)
    else:
        config = ExperimentConfig.preset(args.preset, data=args.data, mask=args.mask)

    # Environment defaults only fill fields the config did not set
    env = {
        name: value
        for name, value in (
            ("out", settings.out),
            ("threads", settings.threads),
            ("log_level", settings.log_level),
        )
        if name not in config.model_fields_set
    }
    flags = {
        "data": args.data,
        "mask": args.mask,
        "method": args.method,
        "chains": args.chains,
        "trials": args.trials,
        "fill_in": args.fill_in,
        "early_stop_sweeps": args.early_stop_sweeps,
        "snapshot_every": args.snapshot_every,
        "normalize": True if args.normalize else None,
        "trace_format": TraceFormat.NPZ if args.binary_traces else None,
        "seed": args.seed,
        "out": args.out,
        "threads": args.threads,
        "log_level": args.log_level,
    }
    if args.snr is not None:
        if config.simulation is None:
            raise ValueError("--snr needs a simulated data source")
        flags["simulation"] = config.simulation.model_copy(update={"snr": args.snr})
    return config.with_overrides(**{**env, **{k: v for k, v in flags.items() if v is not None}})


def cmd_run(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    config = _resolve_config(args, settings)
    configure_logging(config.log_level)
    result = run_experiment(config)
    for method, metrics in result.metrics.items():
        for key, value in metrics.items():
            shown = f"{value:.6g}" if isinstance(value, float) else value
            print(f"{method}\t{key}\t{shown}")
    print(f"artifacts in {result.out}")
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = _Parser(prog="sparsefactor", description="Sparse Bayesian factor analysis toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate a dataset with known truth")
    p.add_argument("--g", type=int, help="features (rows)")
    p.add_argument("--n", type=int, help="samples (columns)")
    p.add_argument("--pi", type=float, nargs="+", help="per-factor connectivity")
    p.add_argument("--snr", type=float, default=5.0)
    p.add_argument("--snrs", type=float, nargs="+", help="several snr levels sharing one truth")
    p.add_argument("--preset", choices=["reference"], default=None)

    p = sub.add_parser("gibbs", parents=[common], help="run collapsed Gibbs chains")
    _add_data_args(p)
    _add_prior_args(p)
    p.add_argument("--iterations", type=int, required=True)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--binary-traces", action="store_true", help="write .npz traces")

    p = sub.add_parser("cavi", parents=[common], help="run best-of-N CAVI trials")
    _add_data_args(p)
    _add_prior_args(p)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--max-sweeps", type=int, default=10_000)
    p.add_argument("--abs-tol", type=float, default=1e-10)
    p.add_argument("--rel-tol", type=float, default=1e-14)
    p.add_argument("--elbo-every", type=int, default=1)
    p.add_argument(
        "--early-stop-sweeps",
        "--early-stop",
        type=int,
        default=None,
        help="sweeps before keeping only the leader",
    )

    p = sub.add_parser("relabel", parents=[common], help="align saved chains")
    p.add_argument("--chains", type=Path, nargs="+", required=True, help="chain directories")
    p.add_argument("--normalize", action="store_true", help="align on unit-norm rows of F")
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--binary-traces", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="score saved results")
    p.add_argument("--chains", type=Path, nargs="+", help="chain directories (pooled)")
    p.add_argument("--cavi-state", type=Path, help="saved variational state directory")
    p.add_argument("--truth", type=Path, help="ground-truth directory")
    p.add_argument("--heldout", type=Path, help="held-out index file")
    p.add_argument(
        "--residuals", action="store_true", help="also write per-entry residuals.tsv"
    )
    _add_data_args(p, required=False)

    p = sub.add_parser("fillin", parents=[common], help="hold out entries for the fill-in test")
    _add_data_args(p)
    p.add_argument("--fraction", type=float, default=0.1)

    p = sub.add_parser("run", parents=[common], help="full pipeline")
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named protocol preset")
    _add_data_args(p, required=False)
    p.add_argument("--method", choices=["gibbs", "cavi", "both"])
    p.add_argument("--chains", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--fill-in", type=float)
    p.add_argument("--snr", type=float, help="replace the simulated snr")
    p.add_argument("--early-stop-sweeps", "--early-stop", type=int)
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--binary-traces", action="store_true")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "gibbs": cmd_gibbs,
    "cavi": cmd_cavi,
    "relabel": cmd_relabel,
    "evaluate": cmd_evaluate,
    "fillin": cmd_fillin,
}


def _exit_code(error: BaseException) -> int:
    if isinstance(error, StageError) and error.__cause__ is not None:
        error = error.__cause__
    return EXIT_VALIDATION if isinstance(error, VALIDATION_ERRORS) else EXIT_RUNTIME


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = RuntimeSettings.from_env()
    except ConfigurationError as e:
        print(f"sparsefactor: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    configure_logging(args.log_level or settings.log_level)

    try:
        if args.command == "run":
            return cmd_run(args, settings)
        args.seed = 0 if args.seed is None else args.seed
        args.out = args.out or settings.out
        args.threads = args.threads or settings.threads
        return COMMANDS[args.command](args)
    except Exception as e:
        code = _exit_code(e)
        kind = "validation error" if code == EXIT_VALIDATION else "runtime failure"
        logger.error(f"{args.command} failed ({kind}): {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
