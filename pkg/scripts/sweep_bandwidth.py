"""Latency versus memory-interface clock, and the effect of double-buffering.

    python scripts/sweep_bandwidth.py --net alexnet-conv --out results
"""

from __future__ import annotations

import argparse
import csv
from dataclasses import replace
from pathlib import Path

from lupulus.config import load_hw, load_network
from lupulus.flow import time_network

CLOCKS_HZ = (125e6, 250e6, 500e6, 1e9, 2e9, float("inf"))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--net", default="alexnet-conv")
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args(argv)
    base = load_hw("default")
    net = load_network(args.net)
    rows = []
    for clock in CLOCKS_HZ:
        for dbuf in (True, False):
            hw = replace(base, mem_if_clock_hz=clock, double_buffer_inputs=dbuf,
                         double_buffer_spm=dbuf)
            t = time_network(net, hw).total
            rows.append({"mem_clock_hz": clock, "double_buffer": dbuf, "ms": round(t.ms, 4),
                         "pe_active_pct": round(t.pe_active_pct, 2),
                         "mem_busy_pct": round(t.mem_busy_pct, 2)})
            print(f"{clock:>10.3g} Hz  dbuf={dbuf!s:5}  {t.ms:9.3f} ms  "
                  f"pe {t.pe_active_pct:5.1f}%  mem {t.mem_busy_pct:5.1f}%")
    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / f"{args.net}_bandwidth.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
