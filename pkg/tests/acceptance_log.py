"""Shared store for acceptance verdicts, printed at the end of the pytest run."""

from __future__ import annotations

TITLES = {
    1: "gradient suite",
    2: "geometry oracle",
    3: "PQ oracle equivalence",
    4: "metric identities",
    5: "moving-object masking",
    6: "loss constants",
    7: "depth metrics",
    8: "point cloud",
    9: "determinism",
    10: "suite runtime",
}

RESULTS: dict = {}


def record(criterion, ok, detail):
    """Keep the worst verdict per criterion (several tests may feed one)."""
    prev = RESULTS.get(criterion)
    if prev is None:
        RESULTS[criterion] = (bool(ok), detail)
    else:
        RESULTS[criterion] = (prev[0] and bool(ok), f"{prev[1]}; {detail}")
    return ok


def lines(elapsed=None):
    out = []
    for n, title in TITLES.items():
        if n == 10 and elapsed is not None and 10 not in RESULTS:
            record(10, elapsed < 180.0, f"{elapsed:.1f} s for this session (limit 180 s)")
        if n not in RESULTS:
            out.append(f"criterion {n:2d} {title}: NOT RUN")
            continue
        ok, detail = RESULTS[n]
        out.append(f"criterion {n:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
    return out
