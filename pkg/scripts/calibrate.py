"""Fit pipeline depth and per-transfer overhead against the two network totals.

The search is bounded to physically plausible values: a pipeline no deeper
than a few stages past the group height, and at most a handful of cycles of
setup per memory transfer.  The winning pair is what ships in the default
config; ``--check`` exits non-zero if the shipped defaults differ from it.

    python scripts/calibrate.py --workers 4
"""

from __future__ import annotations

import argparse
import itertools
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from lupulus.config import load_hw, load_network
from lupulus.flow import time_network

TARGETS_MS = {"alexnet-conv": 21.4, "vgg16-conv": 183.6}
DEPTHS = range(0, 9, 2)
OVERHEADS = (0, 1, 2, 4)


def evaluate(point):
    depth, overhead = point
    hw = replace(load_hw("default"), pipeline_depth=depth, mem_overhead_cycles=overhead)
    ms = {net: time_network(load_network(net), hw).ms for net in TARGETS_MS}
    errors = {net: ms[net] / TARGETS_MS[net] - 1 for net in TARGETS_MS}
    rms = (sum(e * e for e in errors.values()) / len(errors)) ** 0.5
    return depth, overhead, ms, errors, rms


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--check", action="store_true", help="fail if defaults differ from the fit")
    args = ap.parse_args(argv)

    points = list(itertools.product(DEPTHS, OVERHEADS))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(evaluate, points))
    else:
        rows = [evaluate(p) for p in points]

    print(f"{'depth':>5} {'ovh':>4} {'alexnet ms':>11} {'vgg16 ms':>10} {'err_a':>7} {'err_v':>7} {'rms':>7}")
    for depth, overhead, ms, err, rms in rows:
        print(f"{depth:5d} {overhead:4d} {ms['alexnet-conv']:11.3f} {ms['vgg16-conv']:10.3f} "
              f"{err['alexnet-conv']:+7.3f} {err['vgg16-conv']:+7.3f} {rms:7.4f}")
    depth, overhead, ms, err, rms = min(rows, key=lambda r: (r[4], r[0], r[1]))
    print(f"best: pipeline_depth={depth} mem_overhead_cycles={overhead} rms={rms:.4f}")

    hw = load_hw("default")
    frozen = (hw.pipeline_depth, hw.mem_overhead_cycles)
    print(f"shipped defaults: pipeline_depth={frozen[0]} mem_overhead_cycles={frozen[1]}")
    if args.check and frozen != (depth, overhead):
        print("defaults differ from the fit", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
