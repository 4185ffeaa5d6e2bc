"""Run the four experiments at reduced scale and compare with the observed rates.

    python -m biased_qkd.eval.reproduce --rounds 1e6 --out out/reproduce
"""

import argparse
import logging
from pathlib import Path

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from biased_qkd.eval.experiments import experiment_config, experiments
from biased_qkd.session import compare_reports, expected_secure_per_raw, run_session
from biased_qkd.utils import config_digest, write_csv

logger = logging.getLogger(__name__)


def reproduce(n_rounds: int = 1_000_000, source_seed: int = 1) -> pd.DataFrame:
    """One row per experiment: simulated, formula and observed secure_per_raw."""
    reports, rows = [], []
    for experiment in experiments:
        run = experiment_config(experiment, n_rounds=n_rounds, source_seed=source_seed)
        outcome = run_session(run)
        report = outcome.report
        logger.info(f"{experiment['name']}: {report.final_len} secure bits from {report.raw_len} raw")
        reports.append(report)
        rows.append(
            {
                "experiment": experiment["name"],
                "q_A": experiment["q_A"],
                "q_B": experiment["q_B"],
                "sift_ratio": report.sifted_len / report.raw_len if report.raw_len else float("nan"),
                "sift_ratio_observed": experiment["sift_ratio"],
                "qber_x": report.qber_x,
                "qber_z": report.qber_z,
                "secure_per_raw": report.secure_per_raw,
                "secure_per_raw_formula": expected_secure_per_raw(run),
                "secure_per_raw_observed": experiment["secure_per_raw"],
            }
        )
    df = pd.DataFrame(rows)
    df["ratio"] = compare_reports(reports, baseline=0)
    return df


def reproduce_digest(n_rounds: int, source_seed: int) -> str:
    """Digest over every run configuration and the reference table."""
    runs = [experiment_config(e, n_rounds=n_rounds, source_seed=source_seed).model_dump(mode="json") for e in experiments]
    return config_digest({"command": "reproduce", "runs": runs, "experiments": experiments})


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rounds", type=float, default=1e6)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--out", type=Path, default=Path("out/reproduce"))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", handlers=[RichHandler(show_path=False)])

    df = reproduce(int(args.rounds), args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    digest = reproduce_digest(int(args.rounds), args.seed)
    write_csv(df, args.out / "reproduce.csv", digest, {"source_seed": args.seed})

    table = Table(title=f"Secure bits per raw bit at N = {int(args.rounds):,}")
    for col in ("experiment", "simulated", "formula", "observed", "ratio"):
        table.add_column(col, justify="right")
    for _, row in df.iterrows():
        table.add_row(
            row["experiment"],
            f"{row['secure_per_raw']:.4f}",
            f"{row['secure_per_raw_formula']:.4f}",
            f"{row['secure_per_raw_observed']:.4f}",
            f"{row['ratio']:.2f}",
        )
    Console().print(table)


if __name__ == "__main__":
    main()
