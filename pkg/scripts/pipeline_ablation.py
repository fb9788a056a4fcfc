#!/usr/bin/env python3
"""Pipeline ablation on the DeiT-Tiny-sized benchmark workload.

Prints cycle counts for each pipelining mode, the speedup over the fully
sequential schedule, and the per-group (attention / MLP) ratios, cross-checked
against the event-driven simulator.
"""

import argparse

from potvit.accelsim import (
    AcceleratorConfig,
    deit_tiny_workload,
    energy,
    event_driven_oracle,
    simulate_pipelined,
    simulate_sequential,
    speedup_ratios,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--all-4bit", action="store_true", help="run matmul weights at 4 bits")
    args = ap.parse_args()

    wl = deit_tiny_workload()
    if args.all_4bit:
        wl = deit_tiny_workload({s.name: 4 for s in wl if s.kind == "matmul"})
    cfg = AcceleratorConfig()

    modes = {
        "sequential": (False, False),
        "inter-layer": (True, False),
        "intra-layer": (False, True),
        "both": (True, True),
    }
    seq_cycles = simulate_sequential(wl, cfg).total_cycles
    print(f"{'mode':<12} {'cycles':>10} {'latency_us':>11} {'speedup':>8} {'oracle':>7}")
    for name, (inter, intra) in modes.items():
        if inter or intra:
            rep = simulate_pipelined(wl, cfg, inter=inter, intra=intra)
        else:
            rep = simulate_sequential(wl, cfg)
        oracle = event_driven_oracle(wl, cfg, inter=inter, intra=intra)
        energy(wl, cfg, rep)
        tag = "exact" if oracle.total_cycles == rep.total_cycles else "DIFF!"
        print(
            f"{name:<12} {rep.total_cycles:>10} {rep.latency_us:>11.1f} "
            f"{seq_cycles / rep.total_cycles:>8.3f} {tag:>7}"
        )

    ratios = speedup_ratios(wl, cfg)
    print("\nsequential/pipelined ratio by stage group:")
    for group, value in ratios.items():
        print(f"  {group:<10} {value:.3f}")


if __name__ == "__main__":
    main()
