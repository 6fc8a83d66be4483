"""Time-averaged energy drift of a bond interval for a sweep of hopping strengths.

Heuristic only: at fixed mu the drift should shrink roughly like g^2 as g -> 0.
"""

import argparse

import numpy as np

from bhkam.dynamics import nekhoroshev_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gs", type=float, nargs="+", default=[0.025, 0.05, 0.1, 0.2])
    ap.add_argument("--mu", type=float, default=0.5)
    ap.add_argument("--N", type=int, default=4)
    ap.add_argument("--n-max", type=int, default=8)
    ap.add_argument("--t-max", type=float, default=100.0)
    args = ap.parse_args()
    times = np.linspace(0, args.t_max, 201)
    vals = []
    for g in args.gs:
        res = nekhoroshev_experiment((0, 2), times, [args.mu], g, args.N, args.n_max)
        vals.append(res.column("drift_time_average")[-1])
        print(f"g={g:<6g} time-averaged drift {vals[-1]:.5g}")
    slope = np.polyfit(np.log(args.gs), np.log(vals), 1)[0]
    print(f"log-log slope in g: {slope:.3f}")


if __name__ == "__main__":
    main()
