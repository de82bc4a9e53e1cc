"""Distance lower bounds: minimum-norm interpolation and the two-point 1/eps0 stretch."""

import argparse

from robustgd.verify import two_point_distance, verify_min_norm_lower_bound, verify_two_point_stretch


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--eps0", type=float, default=0.1)
    p.add_argument("--s", type=int, default=5)
    p.add_argument("--d", type=int, default=30)
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()

    for seed in range(args.seeds):
        rep = verify_min_norm_lower_bound(args.eps0, 1.0, args.s, args.d, seed)
        print(f"min-norm seed {seed}: |W|_F={rep.rhs:.3f} >= {rep.lhs:.3f}  {'ok' if rep.holds else 'FAIL'}")

    grid = [0.4, 0.2, 0.1, 0.05]
    for eps0 in grid:
        dist = [two_point_distance(eps0, 1.0, 100, 10, s) for s in range(args.seeds)]
        print(f"two-point eps0={eps0}: mean distance {sum(dist) / len(dist):.3f}")
    rep = verify_two_point_stretch(grid, seeds=range(args.seeds))
    print(f"two-point stretch: {'ok' if rep.holds else 'FAIL'} {rep.details}")


if __name__ == "__main__":
    main()
