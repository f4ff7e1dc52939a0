"""Per-layer latency breakdown for the AlexNet and VGG-16 conv stacks.

Writes ``<out>/<network>_timing.csv`` and prints each layer's share of cycles
spent fetching weights, fetching inputs, writing results and computing,
next to the PE-active and memory-busy percentages.

    python scripts/layer_breakdown.py --out results
"""

from __future__ import annotations

import argparse
from pathlib import Path

from lupulus.config import load_hw, load_network
from lupulus.flow import time_network

TARGETS_MS = {"alexnet-conv": 21.4, "vgg16-conv": 183.6}


def bar(pct: float, width: int = 30) -> str:
    n = round(pct / 100 * width)
    return "#" * n + "." * (width - n)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hw", default="default")
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args(argv)
    hw = load_hw(args.hw)
    args.out.mkdir(parents=True, exist_ok=True)
    for net, target in TARGETS_MS.items():
        report = time_network(load_network(net), hw)
        (args.out / f"{net}_timing.csv").write_text(report.to_csv())
        print(f"\n{net}: {report.ms:.2f} ms (target {target} ms, {report.ms / target - 1:+.1%})")
        print(f"{'layer':8} {'ms':>8} {'w%':>5} {'in%':>5} {'out%':>5} {'pe%':>5} {'mem%':>5}  pe-active")
        for t in report.layers:
            tot = t.cycles_total
            print(f"{t.layer:8} {t.ms:8.3f} {100 * t.cyc_fetch_w / tot:5.1f} "
                  f"{100 * t.cyc_fetch_i / tot:5.1f} {100 * t.cyc_write / tot:5.1f} "
                  f"{t.pe_active_pct:5.1f} {t.mem_busy_pct:5.1f}  {bar(t.pe_active_pct)}")


if __name__ == "__main__":
    main()
