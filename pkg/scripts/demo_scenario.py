#!/usr/bin/env python3
"""Walk the canonical access lifecycle once and narrate what happened.

Deploy, periodic heart-rate writes, grant read access to a doctor, two
reads (one granted, one after revocation), all over a simulated 4-node
fog network.
"""

import argparse

from edgelinker.sim import ScenarioConfig, run_scenario


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--nodes", type=int, default=4)
    parser.add_argument("--writes", type=int, default=10)
    parser.add_argument("--write-period-ms", type=int, default=60_000)
    parser.add_argument("--interval-ms", type=int, default=1000)
    parser.add_argument("--trace-out", default=None, help="optional JSONL trace path")
    args = parser.parse_args()

    config = ScenarioConfig(
        nodes=args.nodes,
        writes=args.writes,
        write_period_ms=args.write_period_ms,
        block_interval_ms=args.interval_ms,
    )
    trace = run_scenario(config, args.seed)

    confirms = [e for e in trace.of_kind("task_confirmed") if e.info["measured"]]
    print(f"simulated {trace.counters['end_us'] / 1e6:.1f}s across {args.nodes} fog nodes")
    print(f"writes confirmed: {len(confirms)}/{args.writes}")
    for reply in trace.of_kind("task_reply"):
        verdict = "ok" if reply.info["status"] == 0 else "denied"
        print(
            f"doctor {reply.info['label']}: {verdict}, {reply.info['count']} readings, "
            f"round trip {reply.info['rtt_us'] / 1000:.2f} ms"
        )
    heights = {n: f.height for n, f in trace.final.items()}
    tips = {f.tip_hash.hex()[:12] for f in trace.final.values()}
    print(f"final heights: {heights}")
    print(f"chain tips agree: {len(tips) == 1} ({tips.pop()})")
    if args.trace_out:
        trace.write_jsonl(args.trace_out)
        print(f"trace written to {args.trace_out}")


if __name__ == "__main__":
    main()
