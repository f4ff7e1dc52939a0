"""Command-line driver.

    lupulus --hw default --net alexnet-conv --mode timing --out results/
    lupulus --net vgg16-conv --mode sweep --sweep interface.clock_hz=2.5e8,5e8
    lupulus compare ours.csv baseline.csv

Exit codes: 0 ok, 1 bad configuration, 2 unmappable layer, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import (ConfigError, HwConfig, NetworkSpec, apply_overrides, bundled_names, load_hw,
                     load_network)
from .flow import functional_check, time_network, verify_layer
from .mapper import MappingError, dump_plan, map_layer
from .scheduler import build_schedule, dump_schedule, emit_fetch_program
from .timing import read_totals

MODES = ("map", "functional", "timing", "verify", "sweep")
EXIT_OK, EXIT_CONFIG, EXIT_UNMAPPABLE, EXIT_CHECK = 0, 1, 2, 3


class _Unmappable(Exception):
    def __init__(self, layer: str, err: MappingError):
        super().__init__(f"layer {layer!r} is unmappable: {err} (limited by {err.resource})")


def _parse_pairs(items: list[str], flag: str) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"{flag} expects key=value, got {item!r}", item)
        out[key.strip()] = value.strip()
    return out


def _map_checked(network: NetworkSpec, config: HwConfig):
    plans = []
    for k, layer in enumerate(network.layers):
        try:
            plans.append(map_layer(layer, config))
        except MappingError as err:
            raise _Unmappable(layer.name or f"layer{k}", err) from None
    return plans


def _emit(out_dir: Path | None, name: str, text: str) -> None:
    if out_dir is None:
        sys.stdout.write(text)
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text)


def run_map(network, config, out_dir) -> int:
    buf = io.StringIO()
    for plan in _map_checked(network, config):
        schedule = build_schedule(plan)
        buf.write(dump_plan(plan))
        buf.write(dump_schedule(schedule, limit=0))
        for prog in emit_fetch_program(schedule).values():
            buf.write(prog.dump())
        buf.write("\n")
    _emit(out_dir, f"{network.name}_map.txt", buf.getvalue())
    return EXIT_OK


def run_timing(network, config, out_dir) -> int:
    _map_checked(network, config)
    report = time_network(network, config)
    _emit(out_dir, f"{network.name}_timing.csv", report.to_csv())
    if out_dir is not None:
        print(f"{network.name}: {report.ms:.3f} ms over {len(report.layers)} layers")
    return EXIT_OK


def run_functional(network, config, out_dir, seed: int) -> int:
    _map_checked(network, config)
    rng = np.random.default_rng(seed)
    lines, ok_all = [], True
    for k, layer in enumerate(network.layers):
        name = layer.name or f"layer{k}"
        ok, x, w, b, y = functional_check(layer, config, rng)
        ok_all &= ok
        note = ""
        if layer.weight_init == "identity" and b is None and layer.in_channels == layer.out_channels:
            same = x.data.shape == y.data.shape and bool(np.array_equal(x.data, y.data))
            ok_all &= same
            note = " output==input" if same else " output!=input"
        lines.append(f"{name}: {'PASS' if ok else 'FAIL'}{note}")
        if out_dir is not None:
            tdir = out_dir / "functional"
            tdir.mkdir(parents=True, exist_ok=True)
            x.save(tdir / f"{name}_input.bin")
            w.save(tdir / f"{name}_weights.bin")
            y.save(tdir / f"{name}_output.bin")
            if b is not None:
                b.save(tdir / f"{name}_bias.bin")
    lines.append(f"verdict: {'PASS' if ok_all else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    _emit(out_dir, f"{network.name}_functional.txt", text)
    if out_dir is not None:
        sys.stdout.write(text)
    return EXIT_OK if ok_all else EXIT_CHECK


def run_verify(network, config, out_dir) -> int:
    lines, failed = [], False
    for plan in _map_checked(network, config):
        problems = verify_layer(plan, config)
        failed |= bool(problems)
        name = plan.layer.name or "layer"
        lines.append(f"{name}: {'ok' if not problems else 'FAILED'}")
        lines += [f"  {m}" for m in problems]
    lines.append(f"verdict: {'FAIL' if failed else 'PASS'}")
    text = "\n".join(lines) + "\n"
    _emit(out_dir, f"{network.name}_verify.txt", text)
    if out_dir is not None:
        sys.stdout.write(text)
    return EXIT_CHECK if failed else EXIT_OK


def _sweep_point(args):
    network, config, overrides = args
    try:
        cfg = apply_overrides(config, overrides)
        report = time_network(network, cfg)
    except MappingError as err:
        return {**overrides, "status": f"unmappable ({err.resource})"}
    t = report.total
    return {**overrides, "status": "ok", "cycles_total": t.cycles_total, "ms": f"{t.ms:.6f}",
            "pe_active_pct": f"{t.pe_active_pct:.2f}", "mem_busy_pct": f"{t.mem_busy_pct:.2f}"}


def run_sweep(network, config, out_dir, ranges: dict[str, str], workers: int) -> int:
    if not ranges:
        raise ConfigError("sweep mode needs at least one --sweep key=v1,v2,...", "sweep")
    keys = list(ranges)
    values = [[v.strip() for v in ranges[k].split(",") if v.strip()] for k in keys]
    points = [dict(zip(keys, combo)) for combo in itertools.product(*values)]
    for p in points:  # fail fast on bad keys or values
        apply_overrides(config, p)
    jobs = [(network, config, p) for p in points]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    buf = io.StringIO()
    cols = keys + ["status", "cycles_total", "ms", "pe_active_pct", "mem_busy_pct"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", restval="")
    writer.writeheader()
    writer.writerows(rows)
    _emit(out_dir, f"{network.name}_sweep.csv", buf.getvalue())
    return EXIT_OK


def compare_reports(ours, baseline) -> dict[str, float]:
    """Speedup per network: baseline milliseconds over ours."""
    mine, theirs = read_totals(ours), read_totals(baseline)
    if len(mine) == 1 and len(theirs) == 1:
        (k, a), (_, b) = next(iter(mine.items())), next(iter(theirs.items()))
        return {k: b / a}
    return {k: theirs[k] / mine[k] for k in mine if k in theirs}


def _compare_main(argv: list[str]) -> int:
    ap = argparse.ArgumentParser(prog="lupulus compare",
                                 description="Speedup of one timing report over another.")
    ap.add_argument("ours")
    ap.add_argument("baseline")
    args = ap.parse_args(argv)
    try:
        table = compare_reports(args.ours, args.baseline)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if not table:
        print("error: no network appears in both reports", file=sys.stderr)
        return EXIT_CONFIG
    print("network,speedup")
    for key in sorted(table):
        print(f"{key},{table[key]:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lupulus",
        description="Map, schedule and simulate CNN layers on the Lupulus accelerator model.",
        epilog="Use 'lupulus compare OURS.csv BASELINE.csv' for speedup tables. "
               f"Bundled hardware: {', '.join(bundled_names('hw'))}; "
               f"networks: {', '.join(bundled_names('networks'))}.")
    ap.add_argument("--hw", default="default", help="hardware YAML path or bundled name")
    ap.add_argument("--net", required=True, help="network YAML path or bundled name")
    ap.add_argument("--mode", action="append", default=[],
                    help=f"one or more of {', '.join(MODES)} (repeat or comma-separate)")
    ap.add_argument("--out", type=Path, help="output directory (stdout when omitted)")
    ap.add_argument("--seed", type=int, default=0, help="seed for random operands")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="hardware override, e.g. pipeline.depth=6 or pipeline_depth=6")
    ap.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2",
                    help="sweep values for one hardware key (cross product over keys)")
    ap.add_argument("--workers", type=int, default=1, help="parallel sweep points")
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "compare":
        return _compare_main(argv[1:])
    args = build_parser().parse_args(argv)
    modes = [m.strip() for item in (args.mode or ["timing"]) for m in item.split(",") if m.strip()]
    try:
        bad = [m for m in modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown mode {bad[0]!r}", "mode")
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1", "workers")
        config = apply_overrides(load_hw(args.hw), _parse_pairs(args.overrides, "--set"))
        network = load_network(args.net)
        sweep = _parse_pairs(args.sweep, "--sweep")
        status = EXIT_OK
        for mode in modes:
            if mode == "map":
                code = run_map(network, config, args.out)
            elif mode == "timing":
                code = run_timing(network, config, args.out)
            elif mode == "functional":
                code = run_functional(network, config, args.out, args.seed)
            elif mode == "verify":
                code = run_verify(network, config, args.out)
            else:
                code = run_sweep(network, config, args.out, sweep, args.workers)
            status = max(status, code)
        return status
    except ConfigError as err:
        key = f" [{err.key}]" if err.key else ""
        print(f"config error{key}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except _Unmappable as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_UNMAPPABLE


if __name__ == "__main__":
    sys.exit(main())
