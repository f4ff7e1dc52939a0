import math
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from lupulus.config import HwConfig, LayerSpec, load_network
from lupulus.flow import schedule_network, time_network
from lupulus.mapper import MappingError, map_layer
from lupulus.scheduler import Schedule, build_schedule
from lupulus.timing import (CSV_COLUMNS, MemoryInterfaceModel, TimingReport, aggregate_network,
                            simulate_layer, simulate_timing, utilization_profile)

from conftest import small_hw


def test_default_interface_is_one_byte_per_cycle(hw):
    mem = MemoryInterfaceModel.from_config(hw)
    assert mem.bandwidth == 1e9 and mem.bytes_per_cycle == 1 and mem.single_channel
    assert mem.transfer_cycles(0) == 0 and mem.transfer_cycles(37) == 37
    slow = MemoryInterfaceModel(32, 125e6, 1e9, overhead_cycles=3)
    assert slow.transfer_cycles(5) == 13


def test_ideal_memory_leaves_only_compute(hw):
    ideal = replace(hw, mem_if_clock_hz=math.inf)
    for layer in load_network("alexnet-conv").layers:
        t = simulate_layer(build_schedule(map_layer(layer, ideal)), ideal)
        assert t.cycles_total == t.cyc_compute and t.mem_busy == 0


def test_report_arithmetic(reports, hw):
    alex = reports["alexnet-conv"]
    assert alex.total.cycles_total == sum(t.cycles_total for t in alex.layers)
    assert alex.ms == pytest.approx(alex.cycles / hw.core_clock_hz * 1e3)
    for t in alex.layers:
        assert t.mem_busy <= t.cycles_total and t.cyc_compute <= t.cycles_total


def test_aggregate_network(reports):
    layers = reports["alexnet-conv"].layers
    one = TimingReport((layers[0],))
    assert aggregate_network([one]).total == one.total
    two = aggregate_network([one, one])
    assert two.total.cycles_total == 2 * one.total.cycles_total
    assert two.total.pe_active_pct == pytest.approx(one.total.pe_active_pct)
    per_layer = aggregate_network([TimingReport((t,)) for t in layers])
    assert per_layer.cycles == reports["alexnet-conv"].cycles
    with pytest.raises(ValueError):
        aggregate_network([])


def test_zero_work_is_zero_percent():
    t = simulate_layer(Schedule(None))
    assert (t.cycles_total, t.pe_active_pct, t.mem_busy_pct) == (0, 0.0, 0.0)
    prof = utilization_profile(TimingReport((t,)))
    assert prof["layer"] == {"mem_busy_pct": 0.0, "pe_active_pct": 0.0}


def test_csv_layout(reports):
    text = reports["alexnet-conv"].to_csv()
    lines = text.splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    assert len(lines) == 1 + 5 + 1 and lines[-1].startswith("TOTAL,")


def test_simulate_timing_wraps_one_layer(hw):
    sched = build_schedule(map_layer(LayerSpec("conv", 2, 8, 8, 4, 3, 3, padding=1), hw))
    report = simulate_timing(sched, hw)
    assert len(report.layers) == 1 and report.cycles == simulate_layer(sched, hw).cycles_total


def test_single_accumulator_bank_stalls_compute(hw):
    one_bank = replace(hw, accumulator_banks=1, accumulator_bytes=1024)
    for layer in load_network("alexnet-conv").layers:
        two = simulate_layer(build_schedule(map_layer(layer, hw)), hw)
        one = simulate_layer(build_schedule(map_layer(layer, one_bank)), one_bank)
        assert one.cycles_total >= two.cycles_total
        if layer.name == "conv2":
            assert one.cycles_total > two.cycles_total


def test_early_layers_are_input_bound(reports):
    vgg = reports["vgg16-conv"].layers
    assert vgg[1].bytes_i > 5 * vgg[1].bytes_w
    ratios = [t.bytes_w / t.bytes_i for t in vgg]
    assert ratios[-1] > ratios[1]


def test_weights_dominate_late_vgg_layers(reports):
    for t in reports["vgg16-conv"].layers[-3:]:
        assert t.bytes_w > t.bytes_i, (t.layer, t.bytes_w, t.bytes_i)


@st.composite
def cases(draw):
    k = draw(st.sampled_from([1, 3, 5, 11]))
    h = draw(st.integers(k, 40))
    layer = LayerSpec("conv", draw(st.integers(1, 40)), h, draw(st.integers(k, 40)),
                      draw(st.integers(1, 60)), k, k, draw(st.integers(1, 3)),
                      draw(st.integers(0, 2)))
    config = draw(st.sampled_from([HwConfig(), small_hw(), HwConfig(accumulator_bytes=256),
                                   HwConfig(pe_spm_bytes=4, pipeline_depth=0)]))
    return layer, config


@given(cases())
def test_bounds_and_exclusive_interface(case):
    layer, config = case
    try:
        sched = build_schedule(map_layer(layer, config))
    except MappingError:
        return
    trace = []
    t = simulate_layer(sched, config, trace=trace)
    moved = sum(sched.bytes_by_kind().values())
    assert t.cycles_total >= max(moved, sched.compute_cycles)
    transfers = sorted((s, e) for kind, s, e, _ in trace if kind != "compute")
    assert all(a[1] <= b[0] for a, b in zip(transfers, transfers[1:]))
    computes = [(s, e) for kind, s, e, _ in trace if kind == "compute"]
    assert all(a[1] <= b[0] for a, b in zip(computes, computes[1:]))


@given(cases())
def test_monotone_in_bandwidth_and_buffering(case):
    layer, config = case
    try:
        sched = build_schedule(map_layer(layer, config))
    except MappingError:
        return
    base = simulate_layer(sched, config).cycles_total
    half = replace(config, mem_if_clock_hz=config.mem_if_clock_hz / 2)
    assert simulate_layer(sched, half).cycles_total >= base
    for flags in ({"double_buffer_inputs": False}, {"double_buffer_spm": False},
                  {"double_buffer_inputs": False, "double_buffer_spm": False}):
        assert simulate_layer(sched, replace(config, **flags)).cycles_total >= base


def test_network_helpers_agree(hw):
    net = load_network("identity")
    scheds = schedule_network(net, hw)
    assert time_network(net, hw).cycles == sum(simulate_layer(s, hw).cycles_total for s in scheds)
