#!/usr/bin/env python3
"""Compare scale-rounding schemes on random tensors.

For each bit width, reports the mean L2 quantization perturbation of
nearest-power-of-two rounding vs adaptive candidate search, and how often the
adaptive choice strictly improves on nearest.
"""

import argparse

import numpy as np

from potvit.quantizer import (
    _perturbation,
    adaptive_pot_round_act,
    minmax_scale,
    nearest_pot,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tensors", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'bits':>4} {'nearest L2':>12} {'adaptive L2':>12} {'strict wins':>12}")
    for bits in (4, 8):
        near_err, adap_err, wins = 0.0, 0.0, 0
        for _ in range(args.tensors):
            x = rng.normal(size=int(rng.integers(4, 65))) * 10.0 ** rng.uniform(-3, 3)
            scale = np.abs(x).max() or 1.0
            x = x / scale  # normalize so errors are comparable across draws
            a = adaptive_pot_round_act(x, bits)
            n = nearest_pot(minmax_scale(x, bits))
            ea, en = _perturbation(x, a, bits, True), _perturbation(x, n, bits, True)
            adap_err += ea
            near_err += en
            wins += ea < en - 1e-12
        print(
            f"{bits:>4} {near_err / args.tensors:>12.5f} {adap_err / args.tensors:>12.5f} "
            f"{wins / args.tensors:>11.1%}"
        )


if __name__ == "__main__":
    main()
