"""Command-line front end.

    biased-qkd simulate --config run.yaml --out out/
    biased-qkd optimize-bias --n 3e7 --e-bx 0.054 --e-bz 0.012 --surface
    biased-qkd keyrate --q-a 0.9 --q-b 0.9 --e-bx 0.054 --e-bz 0.012 --n 1e6
    biased-qkd cascade-bench --length 1208 --qber 0.054 --trials 200
    biased-qkd compare out/exp*/report.json --baseline 0
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.markdown import Markdown
from rich.table import Table

from biased_qkd import keyrate
from biased_qkd.cascade import cascade_benchmark
from biased_qkd.configuration import ConfigError, RunConfig, dump_config, load_config
from biased_qkd.keyrate import InfeasibleError
from biased_qkd.privacy import write_final_key
from biased_qkd.schemas import BiasConfig, CascadeConfig, KeyRateParams, SessionReport
from biased_qkd.session import (
    PartyResult,
    VerificationFailure,
    comparison_table,
    expected_secure_per_raw,
    qber_timeseries,
    rate_timeseries,
    run_party,
    run_session,
    session_id,
)
from biased_qkd.source import simulate_session, write_events
from biased_qkd.utils import config_digest, format_report_markdown, provenance_lines, write_csv, write_json, write_table
from biased_qkd.wire import ProtocolAbort, SocketTransport

logger = logging.getLogger(__name__)
console = Console(stderr=True)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_VERIFICATION = 4


class UsageError(Exception):
    """Flags that parse but do not make sense together."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Outputs:
    """Files written by one command; removed again if the command fails."""

    def __init__(self, directory: Path):
        self.dir = Path(directory)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.written.append(p)
        return p

    def add(self, p: Path) -> Path:
        self.written.append(Path(p))
        return Path(p)

    def cleanup(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _count(text: str) -> int:
    """Integer flag that also accepts 1e6-style notation."""
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if value != int(value):
        raise argparse.ArgumentTypeError(f"expected a whole number, got {text!r}")
    return int(value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biased-qkd", description="Biased-basis entanglement QKD simulator")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="Run a session and write its report, QBER series and final key")
    sim.add_argument("--config", type=Path, required=True, help="Run configuration (YAML)")
    sim.add_argument("--seed", type=int, help="Override session.source_seed")
    sim.add_argument("--rounds", type=_count, help="Override session.n_rounds")
    sim.add_argument("--out", type=Path, help="Output directory (default: output.dir)")
    sim.add_argument("--format", choices=["csv", "json"], help="Format of the QBER series")
    sim.add_argument("--transport", choices=["queue", "socket"], help="In-process transport for both parties")
    sim.add_argument("--role", choices=["alice", "bob"], help="Run only this party (two-process mode)")
    group = sim.add_mutually_exclusive_group()
    group.add_argument("--listen", type=_address, help="Wait for the peer on host:port")
    group.add_argument("--connect", type=_address, help="Connect to the peer at host:port")

    opt = sub.add_parser("optimize-bias", help="Finite-key rate against the bias")
    _keyrate_flags(opt)
    opt.add_argument("--surface", action="store_true", help="Also write the (q_A, q_B, R) grid")
    opt.add_argument("--asymmetric", action="store_true", help="Optimise q_A and q_B separately")
    opt.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
    opt.add_argument("--format", choices=["csv", "json"], default="csv")

    kr = sub.add_parser("keyrate", help="Evaluate the key-rate formula")
    _keyrate_flags(kr)
    kr.add_argument("--q-a", type=float, required=True, help="Alice's Z probability")
    kr.add_argument("--q-b", type=float, help="Bob's Z probability (default: same as Alice)")
    kr.add_argument("--asymptotic", action="store_true", help="Ignore N and the deviations")
    kr.add_argument("--format", choices=["csv", "json"], default="json", help="Printed format")

    bench = sub.add_parser("cascade-bench", help="Repeated cascade runs at fixed length and QBER")
    bench.add_argument("--config", type=Path, help="Take the cascade section from this configuration")
    bench.add_argument("--length", type=_count, default=1208, help="Key length per trial")
    bench.add_argument("--qber", type=float, default=0.054, help="Channel QBER")
    bench.add_argument("--trials", type=_count, default=200)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", type=Path, default=Path("out"))
    bench.add_argument("--format", choices=["csv", "json"], default="csv")

    cmp_ = sub.add_parser("compare", help="Compare session reports against a baseline")
    cmp_.add_argument("reports", type=Path, nargs="+", help="report.json files written by simulate")
    cmp_.add_argument("--baseline", type=int, default=0, help="Index of the baseline report")
    cmp_.add_argument("--out", type=Path, default=Path("out"))
    cmp_.add_argument("--format", choices=["csv", "json"], default="csv")
    return parser


def _keyrate_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="Take N, error rates and keyrate settings from this configuration")
    p.add_argument("--n", type=_count, help="Total coincidence count N (default 3e7)")
    p.add_argument("--e-bx", type=float, help="X bit-error rate (default 0.054)")
    p.add_argument("--e-bz", type=float, help="Z bit-error rate (default 0.012)")
    p.add_argument("--f-x", type=float, help="X error-correction inefficiency (default 1.31)")
    p.add_argument("--f-z", type=float, help="Z error-correction inefficiency (default 1.59)")
    p.add_argument("--p-eps", type=float, help="Phase-error failure probability (default 1e-6)")
    p.add_argument("--even-split", action="store_true", help="Halve P_eps instead of optimising the split")


def _keyrate_inputs(args) -> dict:
    values = {"N": 3e7, "e_bx": 0.054, "e_bz": 0.012, "f_x": 1.31, "f_z": 1.59, "P_eps": 1e-6, "split": True}
    if args.config:
        run = load_config(args.config)
        a = run.source.accidental_prob
        values.update(
            N=float(run.session.n_rounds),
            e_bx=run.source.p_bx * (1 - a) + a / 2,
            e_bz=run.source.p_bz * (1 - a) + a / 2,
            f_x=run.keyrate.f_x,
            f_z=run.keyrate.f_z,
            P_eps=run.keyrate.p_eps,
            split=run.keyrate.optimize_split,
        )
    overrides = {"N": args.n, "e_bx": args.e_bx, "e_bz": args.e_bz, "f_x": args.f_x, "f_z": args.f_z, "P_eps": args.p_eps}
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.even_split:
        values["split"] = False
    return values


def cmd_simulate(args, outputs: Outputs) -> int:
    if args.role and not (args.listen or args.connect):
        raise UsageError("--role needs --listen or --connect")
    if (args.listen or args.connect) and not args.role:
        raise UsageError("--listen/--connect need --role")
    run = load_config(args.config)
    session = run.session.model_copy(
        update={
            k: v
            for k, v in {"source_seed": args.seed, "n_rounds": args.rounds, "transport": args.transport}.items()
            if v is not None
        }
    )
    output = run.output.model_copy(update={"format": args.format} if args.format else {})
    try:
        run = RunConfig.model_validate({**run.model_dump(), "session": session.model_dump(), "output": output.model_dump()})
    except ValidationError as exc:
        raise ConfigError(f"Invalid override: {exc}") from None
    outputs.dir = args.out or Path(run.output.dir)
    digest, seeds = run.digest(), run.seeds()
    suffix = f"_{args.role}" if args.role else ""

    outputs.path(f"config{suffix}.yaml").write_text("\n".join(provenance_lines(digest, seeds)) + "\n" + dump_config(run))
    if run.output.events:
        rounds = simulate_session(
            run.source, run.alice, run.bob, run.session.n_rounds, run.session.source_seed, run.session.announce_block
        )
        write_events(outputs.path(f"events{suffix}.csv"), rounds, provenance=provenance_lines(digest, seeds))

    if args.role:
        if args.listen:
            transport = SocketTransport.listen(*args.listen, timeout=run.session.timeout)
        else:
            transport = SocketTransport.connect(*args.connect, timeout=run.session.timeout)
        try:
            result = run_party(args.role, run, transport)
        finally:
            transport.close()
        _write_party(result, run, outputs, suffix)
        report = result.report
    else:
        outcome = run_session(run)
        _write_party(outcome.bob, run, outputs, suffix)
        report = outcome.report

    console.print(Markdown(format_report_markdown(report)))
    expected = expected_secure_per_raw(run)
    console.print(f"Key-rate formula at this bias and N: {expected:.4f} secure bits per raw bit")
    return EXIT_OK


def _write_party(result: PartyResult, run: RunConfig, outputs: Outputs, suffix: str) -> None:
    digest, seeds = run.digest(), run.seeds()
    write_json(result.report.model_dump(), outputs.path(f"report{suffix}.json"), digest, seeds)
    series = qber_timeseries(result.sifted, result.flips, run.output.qber_window, run.session.n_rounds)
    outputs.add(write_table(series, outputs.dir / f"qber{suffix}", run.output.format, digest, seeds))
    rates = rate_timeseries(result.sifted, run.source.pair_rate, result.report.final_len, run.session.n_rounds)
    outputs.add(write_table(rates, outputs.dir / f"rates{suffix}", run.output.format, digest, seeds))
    write_final_key(
        outputs.path(f"final_key{suffix}.bin"),
        result.final_key,
        session_id(run),
        provenance={"config_sha256": digest, "seeds": " ".join(f"{k}={v}" for k, v in sorted(seeds.items()))},
    )
    if run.output.transcript:
        for basis, transcript in result.transcripts.items():
            name = f"transcript_{basis.name.lower()}{suffix}.csv"
            write_csv(transcript.to_frame(), outputs.path(name), digest, seeds)


def cmd_optimize_bias(args, outputs: Outputs) -> int:
    values = _keyrate_inputs(args)
    digest, seeds = config_digest({"command": "optimize-bias", **values}), {}
    outputs.dir = args.out
    split = values.pop("split")
    result = keyrate.optimize_bias(*values.values(), asymmetric=args.asymmetric, split=split)
    curve = keyrate.key_rate_curve(*values.values(), split=split)
    outputs.add(write_table(curve, outputs.dir / "keyrate_curve", args.format, digest, seeds))
    if args.surface:
        surface = keyrate.key_rate_surface(*values.values(), split=split)
        outputs.add(write_table(surface, outputs.dir / "keyrate_surface", args.format, digest, seeds))

    table = Table(title="Optimal bias")
    for col in ("q_A*", "q_B*", "R", "eps_x", "eps_z", "P_eps_x", "P_eps_z"):
        table.add_column(col, justify="right")
    table.add_row(
        f"{result.q_A_star:.4f}",
        f"{result.q_B_star:.4f}",
        f"{result.R:.4f}",
        f"{result.eps_x_star:.5f}",
        f"{result.eps_z_star:.5f}",
        f"{result.budget.P_eps_x:.3g}",
        f"{result.budget.P_eps_z:.3g}",
    )
    console.print(table)
    return EXIT_OK


def cmd_keyrate(args, outputs: Outputs) -> int:
    values = _keyrate_inputs(args)
    bias = BiasConfig(q_A=args.q_a, q_B=args.q_b if args.q_b is not None else args.q_a)
    if args.asymptotic:
        R = keyrate.key_rate(
            KeyRateParams(q_A=bias.q_A, q_B=bias.q_B, e_bx=values["e_bx"], e_bz=values["e_bz"], f_x=values["f_x"], f_z=values["f_z"])
        )
        row = {"q_A": bias.q_A, "q_B": bias.q_B, "eps_x": 0.0, "eps_z": 0.0, "R": R}
    else:
        R, budget, eps_x, eps_z = keyrate.finite_key_rate(
            bias, values["N"], values["e_bx"], values["e_bz"], values["f_x"], values["f_z"], values["P_eps"], values["split"]
        )
        row = {"q_A": bias.q_A, "q_B": bias.q_B, "eps_x": eps_x, "eps_z": eps_z, "R": R}
    if args.format == "json":
        print(json.dumps(row))
    else:
        print(",".join(row))
        print(",".join(f"{v:.10g}" for v in row.values()))
    return EXIT_OK


def cmd_cascade_bench(args, outputs: Outputs) -> int:
    config = load_config(args.config).cascade if args.config else CascadeConfig()
    outputs.dir = args.out
    params = {"command": "cascade-bench", "length": args.length, "qber": args.qber, "trials": args.trials}
    digest = config_digest({**params, "cascade": config.model_dump()})
    seeds = {"bench_seed": args.seed}
    tables = cascade_benchmark(args.length, args.qber, args.trials, config, seed=args.seed)
    for name, df in tables.items():
        outputs.add(write_table(df, outputs.dir / f"cascade_{name}", args.format, digest, seeds))
    totals = tables["totals"].iloc[0]
    console.print(
        f"{args.trials} trials of {args.length} bits at QBER {args.qber}: "
        f"{totals['revealed']:.1f} parities revealed, f = {totals['f']:.3f}"
    )
    return EXIT_OK


def _read_report(path: Path) -> SessionReport:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Cannot read report {path}: {exc}") from exc
    return SessionReport.model_validate(doc)


def cmd_compare(args, outputs: Outputs) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two reports")
    reports = [_read_report(p) for p in args.reports]
    outputs.dir = args.out
    digest = config_digest({"command": "compare", "reports": [r.model_dump() for r in reports], "baseline": args.baseline})
    df = comparison_table(reports, args.baseline)
    outputs.add(write_table(df, outputs.dir / "comparison", args.format, digest, {}))

    table = Table(title="Secure bits per raw bit")
    for col in ("session", "QBER X", "QBER Z", "raw", "sifted", "final", "per raw", "ratio"):
        table.add_column(col, justify="right")
    for _, row in df.iterrows():
        table.add_row(
            str(row["session_id"]),
            "-" if pd.isna(row["qber_x"]) else f"{100 * row['qber_x']:.2f}%",
            "-" if pd.isna(row["qber_z"]) else f"{100 * row['qber_z']:.2f}%",
            f"{row['raw_len']:,}",
            f"{row['sifted_len']:,}",
            f"{row['final_len']:,}",
            f"{row['secure_per_raw']:.4f}",
            f"{row['ratio']:.3f}",
        )
    console.print(table)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "optimize-bias": cmd_optimize_bias,
    "keyrate": cmd_keyrate,
    "cascade-bench": cmd_cascade_bench,
    "compare": cmd_compare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv(".env")
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
    )
    outputs = Outputs(Path("."))
    try:
        return COMMANDS[args.command](args, outputs)
    except UsageError as exc:
        code, message = EXIT_USAGE, str(exc)
    except ConfigError as exc:
        code, message = EXIT_CONFIG, str(exc)
    except ProtocolAbort as exc:
        code, message = EXIT_ABORT, f"Protocol aborted: {exc}"
    except VerificationFailure as exc:
        code, message = EXIT_VERIFICATION, f"Verification failed: {exc}"
    except (InfeasibleError, ValueError) as exc:
        code, message = EXIT_USAGE, str(exc)
    outputs.cleanup()
    logger.error(message)
    return code


if __name__ == "__main__":
    sys.exit(main())
