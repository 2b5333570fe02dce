"""Plateau profiles on a two-parameter quadratic valley.

L(theta) = a*theta1^2 + b*theta2^2 with a << b: theta1 is the flat direction.
Noisy SGD-momentum runs until the loss drops below 1e-2 and then 2000 more
steps; the profiler sees every step. The flat coordinate keeps drifting down
the valley during the plateau window, so it collects more (and more varied)
activity than the steep one, which only jitters in place.

The effect depends on how far up the flat axis training starts: from (30, 1)
the flat coordinate wins in every seed, from (10, 1) it never does.

    python demos/valley_profile.py
"""

import argparse

import numpy as np

from ppap.verify import valley_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--starts", type=float, nargs="+", default=[30.0, 20.0, 15.0, 10.0],
                    help="initial theta1 values (theta2 starts at 1)")
    args = ap.parse_args()

    p, conv = valley_trial(0)
    print(f"seed 0 from (30, 1): converged after {conv} steps, P = {np.round(p['theta'], 3).tolist()}")
    print()
    print(f"{'start':>10}  flat wins  mean convergence step")
    for x in args.starts:
        wins, steps = 0, []
        for s in range(args.seeds):
            p, conv = valley_trial(s, init=(x, 1.0))
            wins += int(p["theta"][0] > p["theta"][1])
            steps.append(conv)
        print(f"({x:>4g}, 1)  {wins:>5}/{args.seeds}  {np.mean(steps):>10.0f}")


if __name__ == "__main__":
    main()
