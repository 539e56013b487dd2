#!/usr/bin/env python3
"""Run the full read/write benchmark grid and write CSVs under results/.

Defaults reproduce the headline experiment shape: node counts 1-20, task
counts 100-500, five repetitions per cell, secure channel. Expect a few
minutes of wall time for the full grid; trim with --reps or --tasks.
"""

import argparse
from pathlib import Path

from edgelinker.bench import RunPlan, cmd_run


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--nodes", default="1,5,10,15,20")
    parser.add_argument("--tasks", default="100,200,300,400,500")
    parser.add_argument("--channel", choices=["secure", "plain"], default="secure")
    args = parser.parse_args()

    node_counts = [int(x) for x in args.nodes.split(",")]
    task_counts = [int(x) for x in args.tasks.split(",")]
    for workload in ("read", "write"):
        plan = RunPlan(
            node_counts=node_counts,
            task_counts=task_counts,
            repetitions=args.reps,
            workload=workload,
            channel_mode=args.channel,
            seed=args.seed,
        )
        out_dir = Path(args.out) / workload
        csv_path = cmd_run(plan, out_dir)
        print(f"{workload}: wrote {csv_path}")


if __name__ == "__main__":
    main()
