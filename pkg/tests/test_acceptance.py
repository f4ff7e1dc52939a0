"""One test per acceptance criterion; tolerances are pinned here."""

import math
import time
from dataclasses import replace
from importlib import resources

import numpy as np
import pytest

from lupulus.cli import compare_reports
from lupulus.config import HwConfig, LayerSpec, load_hw, load_network, peak_gops, total_on_chip_memory
from lupulus.flow import replay_mismatches, time_network
from lupulus.functional import random_operands, reference_conv, simulate_functional
from lupulus.mapper import MappingError, decompose_kernel, map_layer, plan_violations
from lupulus.scheduler import build_schedule
from lupulus.timing import MemoryInterfaceModel, simulate_layer


LATENCY_TARGET_MS = {"alexnet-conv": 21.4, "vgg16-conv": 183.6}
LATENCY_TOL = 0.10
MEM_BUSY_MIN = 95.0
PE_LAYER2 = (70.0, 90.0)
PE_OTHER = (30.0, 50.0)
ORACLE_LAYERS = 500
LEGALITY_PAIRS = 1000
KERNELS = (1, 3, 5, 7, 11)


def _reference_csv(name):
    return resources.files("lupulus") / "data" / "reference" / name


def test_criterion_1_on_chip_memory_is_60160_bytes(hw):
    assert total_on_chip_memory(hw) == 60160


def test_criterion_2_peak_throughput_is_380_gops(hw):
    assert hw.core_clock_hz == 1e9
    assert peak_gops(hw) == 380


def test_criterion_3_latency_within_10_percent_with_frozen_calibration(hw, networks):
    assert (hw.pipeline_depth, hw.mem_overhead_cycles) == (HwConfig().pipeline_depth,
                                                           HwConfig().mem_overhead_cycles)
    results = {}
    for name, net in networks.items():
        t0 = time.perf_counter()
        ms = time_network(net, hw).ms
        elapsed = time.perf_counter() - t0
        results[name] = ms
        assert elapsed < 60, f"{name} took {elapsed:.1f} s"
    for name, ms in results.items():
        target = LATENCY_TARGET_MS[name]
        assert abs(ms / target - 1) <= LATENCY_TOL, f"{name}: {ms:.2f} ms vs {target} ms"


def test_criterion_4_utilization_profile(reports):
    for name, report in reports.items():
        for t in report.layers:
            assert t.mem_busy_pct >= MEM_BUSY_MIN, f"{name}/{t.layer}: {t.mem_busy_pct:.1f}%"
    alex = reports["alexnet-conv"].layers
    lo, hi = PE_LAYER2
    assert lo <= alex[1].pe_active_pct <= hi, alex[1].pe_active_pct
    lo, hi = PE_OTHER
    for k in (0, 2, 3, 4):
        assert lo <= alex[k].pe_active_pct <= hi, (alex[k].layer, alex[k].pe_active_pct)


_ORACLE_CONFIGS = (
    HwConfig(),
    HwConfig(grid_rows=6, grid_cols=6),
    HwConfig(grid_rows=12, grid_cols=12, group_rows=4, group_cols=4),
    HwConfig(grid_rows=9, grid_cols=12, accumulator_bytes=256, pe_spm_bytes=4),
    HwConfig(grid_rows=8, grid_cols=12, group_rows=2, group_cols=2, input_buffer_bytes=32,
             double_buffer_inputs=False, double_buffer_spm=False),
)


def _random_layer(rng, kernel):
    if kernel == "fc":
        return LayerSpec.fc(int(rng.integers(1, 17)), int(rng.integers(1, 17)),
                            has_bias=bool(rng.integers(2)), apply_relu=bool(rng.integers(2)))
    h = int(rng.integers(max(1, kernel - 4), 17))
    w = int(rng.integers(max(1, kernel - 4), 17))
    pad = int(rng.integers(0, 3))
    if h + 2 * pad < kernel or w + 2 * pad < kernel:
        pad = 2
        h, w = max(h, kernel - 4), max(w, kernel - 4)
    return LayerSpec("conv", int(rng.integers(1, 17)), h, w, int(rng.integers(1, 17)),
                     kernel, kernel, int(rng.integers(1, 5)), pad,
                     has_bias=bool(rng.integers(2)), apply_relu=bool(rng.integers(2)))


def test_criterion_5_functional_matches_oracle_on_500_layers():
    rng = np.random.default_rng(5)
    kinds = (*KERNELS, "fc")
    checked, mismatches, seen = 0, [], set()
    while checked < ORACLE_LAYERS:
        kind = kinds[checked % len(kinds)]
        config = _ORACLE_CONFIGS[int(rng.integers(len(_ORACLE_CONFIGS)))]
        layer = _random_layer(rng, kind)
        try:
            plan = map_layer(layer, config)
        except MappingError:
            continue
        x, w, b = random_operands(layer, rng, config)
        got = simulate_functional(build_schedule(plan), x, w, b)
        if got != reference_conv(layer, x, w, b):
            mismatches.append(layer)
        seen.add((kind, layer.stride, layer.padding))
        checked += 1
    assert not mismatches, mismatches[:3]
    assert {k for k, _, _ in seen} == set(kinds)
    assert {s for _, s, _ in seen if s} == {1, 2, 3, 4}
    assert {p for k, _, p in seen if k != "fc"} == {0, 1, 2}


def _random_config(rng):
    gr, gc = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return HwConfig(
        grid_rows=gr * int(rng.integers(1, 6)), grid_cols=gc * int(rng.integers(1, 6)),
        group_rows=gr, group_cols=gc,
        pe_spm_bytes=int(rng.choice([2, 4, 8, 32, 64])),
        input_buffer_bytes=int(rng.choice([32, 64, 128, 256])),
        accumulator_bytes=int(rng.choice([64, 256, 2048])),
        double_buffer_inputs=bool(rng.integers(2)), double_buffer_spm=bool(rng.integers(2)),
        input_bits=int(rng.choice([8, 16])), weight_bits=int(rng.choice([8, 16])))


def test_criterion_6_mapping_legality_on_1000_pairs():
    rng = np.random.default_rng(6)
    problems = []
    for n in range(LEGALITY_PAIRS):
        config = _random_config(rng)
        if rng.random() < 0.1:
            layer = LayerSpec.fc(int(rng.integers(1, 300)), int(rng.integers(1, 300)))
        else:
            kh, kw = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            layer = LayerSpec("conv", int(rng.integers(1, 40)), int(rng.integers(kh, 40)),
                              int(rng.integers(kw, 40)), int(rng.integers(1, 80)), kh, kw,
                              int(rng.integers(1, 4)), 0)
        widest = max(len(p.cols) * (p.col_group + 1) for p in
                     decompose_kernel(layer.kernel_height, min(layer.kernel_width,
                                                               config.grid_cols), config))
        should_fail = layer.kernel_width > config.grid_cols
        try:
            plan = map_layer(layer, config)
        except MappingError as err:
            if not should_fail:
                problems.append((n, "unexpectedly unmappable", str(err)))
            continue
        if should_fail:
            problems.append((n, "mapped a kernel wider than the grid"))
            continue
        assert widest <= config.grid_cols
        problems += [(n, m) for m in plan_violations(plan)]
        k = (layer.kernel_height, layer.kernel_width)
        if k == (1, 1):
            want = math.ceil(layer.out_channels / config.grid_cols)
        elif k[0] <= config.group_rows and k[1] <= config.group_cols:
            want = math.ceil(layer.out_channels / config.num_groups)
        else:
            want = None
        if want is not None and len(plan.rounds) != want:
            problems.append((n, f"{len(plan.rounds)} rounds, expected {want}"))
    assert not problems, problems[:5]


def test_criterion_7_timing_bounds_and_monotonicity(hw, networks, reports):
    half = replace(hw, mem_if_clock_hz=hw.mem_if_clock_hz / 2)
    single = replace(hw, double_buffer_inputs=False, double_buffer_spm=False)
    mem = MemoryInterfaceModel.from_config(hw)
    for name, net in networks.items():
        slow = time_network(net, half).layers
        nodb = time_network(net, single).layers
        for t, t_half, t_single in zip(reports[name].layers, slow, nodb):
            moved = t.bytes_w + t.bytes_i + t.bytes_o
            assert t.cycles_total >= math.ceil(moved / mem.bytes_per_cycle)
            assert t.cycles_total >= t.cyc_compute
            assert t_half.cycles_total >= t.cycles_total, t.layer
            assert t_single.cycles_total >= t.cycles_total, t.layer


def test_criterion_8_schedule_conservation_on_benchmark_layers(hw, networks):
    layers = [layer for net in networks.values() for layer in net.layers]
    assert len(layers) == 18
    failures = []
    for layer in layers:
        schedule = build_schedule(map_layer(layer, hw))
        got = schedule.bytes_by_kind()
        weights = (layer.out_channels * layer.in_channels * layer.kernel_height
                   * layer.kernel_width * hw.weight_bytes)
        outputs = layer.out_channels * layer.out_height * layer.out_width * hw.psum_bytes
        inputs = layer.in_channels * layer.in_height * layer.in_width * hw.input_bytes
        if got["weights"] != weights:
            failures.append(f"{layer.name}: weight bytes {got['weights']} != {weights}")
        if got["outputs"] != outputs:
            failures.append(f"{layer.name}: output bytes {got['outputs']} != {outputs}")
        if got["inputs"] < inputs:
            failures.append(f"{layer.name}: input bytes {got['inputs']} < {inputs}")
        failures += [f"{layer.name}: {m}" for m in replay_mismatches(schedule)]
    assert not failures, "\n".join(failures)


def test_criterion_9_reported_speedups():
    table = compare_reports(_reference_csv("lupulus_reported.csv"),
                            _reference_csv("eyeriss_reported.csv"))
    assert round(table["vgg16-conv"], 2) == 1.86
    assert round(table["alexnet-conv"], 2) == 0.31
