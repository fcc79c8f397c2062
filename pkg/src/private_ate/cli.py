"""Command-line entry point: ``private-ate {estimate,oracle,synth,bench,bound}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .core import BudgetExceeded, ConfigError, DataError, LedgerViolation, PrivacyLevel
from .data_io import CsvSchema, SynthParams, generate_synth, load_csv, write_csv, write_sidecar
from .estimation import DEFAULT_NEIGHBORS, MatchConfig, error_bound_label, plan_limits
from .harness import SweepSpec, parse_limit_mode, results_csv, run_sweep, summary_csv, with_overrides
from .matching import build_sorted_matrices, perturb_treatment
from .pipeline import DEFAULT_RATIOS, RunConfig, run, run_oracle_psm
from .propensity import DEFAULT_LAMBDA, score, train

SEED_ENV = "PRIVATE_ATE_SEED"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_LEDGER = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--input", required=required, help="CSV file with a header row")
    p.add_argument("--schema", default="treatment=t,outcome=y", help="treatment=COL,outcome=COL[,covariates=A;B]")
    p.add_argument("--b-range", type=float, required=required, help="public bound B on the outcome range")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--neighbors", type=int, default=DEFAULT_NEIGHBORS, help="matched neighbors N")
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA, help="l2 penalty of the propensity model")
    p.add_argument("--intercept", action="store_true", help="fit an intercept in the propensity model")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="private-ate", description="Differentially private average treatment effect estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="one private ATE estimate")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--level", default="label", choices=[lv.value for lv in PrivacyLevel])
    p.add_argument("--eps", type=float, required=True, help="total privacy budget")
    p.add_argument("--coeff", type=float, default=None, help="error coefficient c (label) or h (sample)")
    p.add_argument("--fixed-k", type=int, default=None, help="use a fixed matching limit instead of the adaptive one")
    p.add_argument("--ratios", type=_floats, default=DEFAULT_RATIOS, help="sample-level phase shares r1,r2,r3")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None, help="JSON destination (default stdout)")
    p.add_argument("--oracle-mode", action="store_true", help="disable noise and caps; output is NOT private")
    p.add_argument("--unsafe", action="store_true", help="required together with --oracle-mode")

    p = sub.add_parser("oracle", help="non-private PSM estimate")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--output", default=None)

    p = sub.add_parser("synth", help="generate a synthetic dataset with a known effect")
    p.add_argument("--n", type=int, default=SynthParams.n)
    p.add_argument("--d", type=int, default=SynthParams.d)
    p.add_argument("--tau", type=float, default=SynthParams.tau)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV destination; the sidecar goes next to it as .json")

    p = sub.add_parser("bench", help="repeated-trial relative-error sweep")
    _add_data_args(p, required=False)
    p.add_argument("--spec", default=None, help="file of key=value lines")
    p.add_argument("--synth-n", type=int, default=SynthParams.n, help="Synth size when --input is absent")
    p.add_argument("--synth-d", type=int, default=SynthParams.d)
    p.add_argument("--eps-grid", type=_floats, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--levels", default=None, help="comma-separated privacy levels")
    p.add_argument("--limit-modes", default=None, help="comma-separated: adaptive, oracle, or a fixed k")
    p.add_argument("--neighbors", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--seed", type=int, default=None, help="seed of trial 0 (and of the Synth data)")
    p.add_argument("--timing", action="store_true", help="record wall time (output no longer reproducible)")
    p.add_argument("--results", required=True, help="results CSV destination")
    p.add_argument("--summary", required=True, help="summary CSV destination")

    p = sub.add_parser("bound", help="label-level error bound diagnostic")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--coeff", type=float, default=None)
    p.add_argument("--fixed-k", type=int, default=None)
    p.add_argument("--output", default=None)
    return parser


def _emit(doc: dict, output: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if output is None:
        sys.stdout.write(text)
    else:
        Path(output).write_text(text, encoding="utf-8")


def _load(args):
    return load_csv(args.input, CsvSchema.parse(args.schema), args.b_range)


def _seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def cmd_estimate(args) -> int:
    if args.oracle_mode and not args.unsafe:
        raise UsageError("--oracle-mode releases a non-private estimate; pass --unsafe to confirm")
    if len(args.ratios) != 3:
        raise UsageError("--ratios needs three values")
    dataset = _load(args)
    config = RunConfig(
        level=args.level,
        eps_total=args.eps,
        ratios=tuple(args.ratios),
        match=MatchConfig(
            neighbors=args.neighbors,
            error_coeff=args.coeff,
            fixed_k=args.fixed_k,
            capped=not args.oracle_mode,
        ),
        lam=args.lam,
        intercept=args.intercept,
        seed=_seed(args),
        oracle_mode=args.oracle_mode,
    )
    result = run(dataset, config)
    doc = {
        "config": {
            "input": str(args.input),
            "n": dataset.n,
            "d": dataset.d,
            "B": dataset.outcome_range,
            "level": config.level.value,
            "eps": config.eps_total,
            "ratios": list(config.ratios),
            "phase1_split": config.phase1_split,
            "neighbors": config.match.neighbors,
            "coeff": config.match.coeff_for(config.level),
            "limit_mode": config.match.limit_mode,
            "lambda": config.lam,
            "intercept": config.intercept,
            "seed": config.seed,
            "oracle_mode": config.oracle_mode,
        },
        "ledger": result.ledger.as_dict(),
        "plan": result.plan.as_dict(),
        "result": result.to_json_dict(),
    }
    _emit(doc, args.output)
    return EXIT_OK


def cmd_oracle(args) -> int:
    dataset = _load(args)
    tau = run_oracle_psm(dataset, args.neighbors, lam=args.lam, intercept=args.intercept)
    _emit(
        {
            "tau_oracle": tau,
            "n": dataset.n,
            "neighbors": args.neighbors,
            "lambda": args.lam,
            "intercept": args.intercept,
            "private": False,
        },
        args.output,
    )
    return EXIT_OK


def cmd_synth(args) -> int:
    synth = generate_synth(SynthParams(n=args.n, d=args.d, tau=args.tau, seed=_seed(args)))
    out = Path(args.out)
    write_csv(synth.dataset, out)
    write_sidecar(synth, out.with_suffix(".json"))
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = SweepSpec.from_text(Path(args.spec).read_text(encoding="utf-8")) if args.spec else SweepSpec()
    spec = with_overrides(
        spec,
        eps_grid=args.eps_grid,
        trials=args.trials,
        levels=tuple(args.levels.split(",")) if args.levels else None,
        limit_modes=tuple(parse_limit_mode(m) for m in args.limit_modes.split(",")) if args.limit_modes else None,
        neighbors=args.neighbors,
        lam=args.lam,
        seed_base=args.seed if args.seed is not None else (None if args.spec else _default_seed()),
        timing=True if args.timing else None,
    )
    if args.input:
        if args.b_range is None:
            raise UsageError("--b-range is required with --input")
        data = _load(args)
    else:
        data = generate_synth(SynthParams(n=args.synth_n, d=args.synth_d, seed=spec.seed_base))
    result = run_sweep(data, spec)
    Path(args.results).write_text(results_csv(result.records), encoding="utf-8")
    Path(args.summary).write_text(summary_csv(result.summary), encoding="utf-8")
    return EXIT_OK


def cmd_bound(args) -> int:
    dataset = _load(args)
    view = perturb_treatment(dataset, PrivacyLevel.LABEL, None, None)
    scores = score(train(dataset, lam=args.lam, intercept=args.intercept), dataset)
    matrices = build_sorted_matrices(scores, view)
    match = MatchConfig(neighbors=args.neighbors, error_coeff=args.coeff, fixed_k=args.fixed_k)
    plan = plan_limits(matrices, view.counts, match, PrivacyLevel.LABEL, args.eps)
    bound, R = error_bound_label(
        dataset, matrices, args.neighbors, (plan.k_treated, plan.k_control), dataset.outcome_range, args.eps
    )
    _emit({"bound": bound, "R": R, "eps": args.eps, "B": dataset.outcome_range, "plan": plan.as_dict()}, args.output)
    return EXIT_OK


COMMANDS = {
    "estimate": cmd_estimate,
    "oracle": cmd_oracle,
    "synth": cmd_synth,
    "bench": cmd_bench,
    "bound": cmd_bound,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (LedgerViolation, BudgetExceeded) as exc:
        print(f"private-ate: ledger violation: {exc}", file=sys.stderr)
        return EXIT_LEDGER
    except (DataError, OSError) as exc:
        print(f"private-ate: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"private-ate: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
