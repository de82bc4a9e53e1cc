"""Run the perfectly-clustered verifier suite over a range of seeds."""

import argparse
from dataclasses import replace

from robustgd.experiments import PRESETS, for_seed, run_suite
from robustgd.verify import suite_failed


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--rho", type=float, default=None, help="override the corruption level")
    args = p.parse_args()

    cfg = PRESETS["clustered-theorem"]
    failures = 0
    for seed in range(args.seeds):
        c = for_seed(cfg, seed)
        if args.rho is not None:
            c = replace(c, data=replace(c.data, rho=args.rho))
        reports = run_suite(c)
        failures += suite_failed(reports)
        line = " ".join(f"{r.name}={'ok' if r.holds else 'FAIL'}" for r in reports)
        print(f"seed {seed}: {line}")
    print(f"{args.seeds - failures}/{args.seeds} seeds clean")


if __name__ == "__main__":
    main()
