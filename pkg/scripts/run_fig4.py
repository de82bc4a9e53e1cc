"""Overfitting sweep on the two-cluster instance: early success, late memorization."""

import argparse
import json

from robustgd.experiments import run_fig4
from robustgd.verify import jsonable


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--json", help="write per-seed summaries here")
    args = p.parse_args()

    rows = []
    for seed in args.seeds:
        res = run_fig4(seed)
        rows.append(res.summary())
        print(f"seed {seed}: min err {res.early_error:.4f} @ {res.early_iter}, "
              f"err @ {res.late_iter} {res.late_error:.4f}, "
              f"overlap {res.overlap_early:.3f} -> {res.overlap_late:.3f}  {'ok' if res.passed else 'FAIL'}")
    passed = sum(r["passed"] for r in rows)
    print(f"{passed}/{len(rows)} seeds show the full pattern")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(jsonable(rows), fh, indent=2)


if __name__ == "__main__":
    main()
