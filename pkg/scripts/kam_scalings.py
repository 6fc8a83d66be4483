"""Size and range of the first-order KAM coefficients as delta shrinks (mu = delta)."""

import argparse

from bhkam.kam import measure_scalings


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--deltas", type=float, nargs="+", default=[0.1, 0.15, 0.2, 0.3])
    ap.add_argument("--gamma", type=float, default=0.75)
    args = ap.parse_args()
    out = measure_scalings(args.deltas, gamma=args.gamma)
    for row in out["rows"]:
        print(f"delta={row['delta']:<5g} {row['operator']}^({row['k']})  range {row['range']}  "
              f"max {row['max']:.4g}  rms {row['rms']:.4g}")
    for name, fit in out["fits"].items():
        print(f"{name}: slope(max) {fit['slope_max']:.3f}  slope(rms) {fit['slope_rms']:.3f}  "
              f"expected {fit['expected']:.3f}")


if __name__ == "__main__":
    main()
