#!/usr/bin/env python3
"""Run all five attack drills and print the defense verdicts."""

import argparse
import sys

from edgelinker.bench import cmd_attack
from edgelinker.sim import ATTACK_KINDS


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    failures = 0
    for kind in ATTACK_KINDS:
        report = cmd_attack(kind, seed=args.seed)
        for line in report.lines:
            print(line)
        print(f"{kind}: stats {report.stats}")
        if not report.passed:
            failures += 1
    print(f"\n{len(ATTACK_KINDS) - failures}/{len(ATTACK_KINDS)} drills passed")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
