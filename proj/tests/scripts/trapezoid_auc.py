"""Recomputes every auc_of_curve entry of an ablation directory from the runs' metrics.csv."""

import csv
import math
import sys
from pathlib import Path


def trapezoid(xs, ys):
    return sum((x1 - x0) * (y0 + y1) / 2.0 for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:]))


def main(root: Path) -> int:
    with open(root / "ablation.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        print("ablation.csv has no rows")
        return 1
    failures = 0
    for row in rows:
        run = root / f"{row['mode']}_seed{row['seed']}" / "metrics.csv"
        with open(run, newline="") as f:
            evals = [r for r in csv.DictReader(f) if r["event"] == "eval"]
        xs = [float(r["env_step"]) for r in evals]
        ys = [float(r["eval_return_mean"]) for r in evals]
        expected = trapezoid(xs, ys)
        got = float(row["auc_of_curve"])
        ok = math.isclose(got, expected, rel_tol=1e-9, abs_tol=1e-9)
        print(f"{row['mode']} seed {row['seed']}: auc {got!r} recomputed {expected!r} {'ok' if ok else 'MISMATCH'}")
        failures += not ok
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main(Path(sys.argv[1])))
