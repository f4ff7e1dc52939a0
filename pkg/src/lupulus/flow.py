"""Glue: map, schedule, simulate and check whole networks."""

from __future__ import annotations

import math

import numpy as np

from .config import HwConfig, LayerSpec, NetworkSpec
from .functional import reference_conv_fast, random_operands, simulate_functional
from .mapper import MappingPlan, map_layer, plan_violations
from .scheduler import (FetchInputs, FetchWeights, Schedule, build_schedule, emit_fetch_program,
                        expected_bytes, replay_inputs, replay_weights, schedule_violations,
                        weight_segments)
from .timing import MemoryInterfaceModel, TimingReport, simulate_layer


def plan_network(network: NetworkSpec, config: HwConfig) -> list[MappingPlan]:
    return [map_layer(layer, config) for layer in network.layers]


def schedule_network(network: NetworkSpec, config: HwConfig) -> list[Schedule]:
    return [build_schedule(p) for p in plan_network(network, config)]


def time_network(network: NetworkSpec, config: HwConfig) -> TimingReport:
    layers = tuple(simulate_layer(s, config) for s in schedule_network(network, config))
    return TimingReport(layers, network=network.name)


def replay_mismatches(schedule: Schedule) -> list[str]:
    """Compare the fetch-unit programs' replay with the schedule's fetch phases."""
    plan = schedule.plan
    if plan is None:
        return []
    progs = emit_fetch_program(schedule)
    problems = []
    sched_w = [p for p in schedule.phases if isinstance(p, FetchWeights)]
    replay_w = list(replay_weights(progs["weights"]))
    if len(sched_w) != len(replay_w):
        problems.append(f"weight loads: schedule {len(sched_w)}, program {len(replay_w)}")
    for ph, (rnd, tile, filters, steps, nbytes, segs, load) in zip(sched_w, replay_w):
        if (ph.round, ph.tile, ph.filters, ph.steps, ph.nbytes, ph.load) != (
                rnd, tile, filters, steps, nbytes, load) or weight_segments(plan, ph) != segs:
            problems.append(f"weight load {ph.load} differs from the program replay")
            break
    sched_i = [(p.round, p.tile, p.step, p.channels, p.rows, p.cols, p.nbytes)
               for p in schedule.phases if isinstance(p, FetchInputs)]
    replay_i = list(replay_inputs(progs["inputs"]))
    if sched_i != replay_i:
        first = next((k for k, (a, b) in enumerate(zip(sched_i, replay_i)) if a != b),
                     min(len(sched_i), len(replay_i)))
        problems.append(f"input fetch {first} differs from the program replay")
    return problems


def verify_layer(plan: MappingPlan, config: HwConfig | None = None,
                 scan_limit: int = 200_000) -> list[str]:
    """Every model invariant that can be checked without operands."""
    config = config or plan.config
    problems = [f"plan: {m}" for m in plan_violations(plan)]
    schedule = build_schedule(plan)
    if len(schedule.phases) <= scan_limit:
        problems += [f"schedule: {m}" for m in schedule_violations(schedule)]
    problems += [f"fetch program: {m}" for m in replay_mismatches(schedule)]

    got, want = schedule.bytes_by_kind(), expected_bytes(plan)
    if got["weights"] != want["weights_with_refetch"]:
        problems.append(f"weight bytes {got['weights']} != {want['weights_with_refetch']}")
    if got["outputs"] != want["outputs"]:
        problems.append(f"output bytes {got['outputs']} != {want['outputs']}")
    if got["inputs"] < want["inputs_used"]:
        problems.append(f"input bytes {got['inputs']} < {want['inputs_used']}")

    trace: list = []
    t = simulate_layer(schedule, config, trace=trace)
    mem = MemoryInterfaceModel.from_config(config)
    if not mem.ideal:
        floor = math.ceil(sum(got.values()) / mem.bytes_per_cycle)
        if t.cycles_total < floor:
            problems.append(f"timing: {t.cycles_total} cycles below bandwidth bound {floor}")
    if t.cycles_total < schedule.compute_cycles:
        problems.append("timing: total below compute cycles")
    if t.mem_busy > t.cycles_total or t.cyc_compute > t.cycles_total:
        problems.append("timing: busy cycles exceed total")
    last = 0
    for kind, start, end, _ in trace:
        if kind == "compute":
            continue
        if start < last:
            problems.append("timing: overlapping memory transfers")
            break
        last = end
    return problems


def verify_network(network: NetworkSpec, config: HwConfig) -> dict[str, list[str]]:
    return {(p.layer.name or f"layer{k}"): verify_layer(p, config)
            for k, p in enumerate(plan_network(network, config))}


def functional_check(layer: LayerSpec, config: HwConfig, rng: np.random.Generator):
    """Simulate one layer on random operands and compare with the oracle.

    Returns ``(passed, inputs, weights, bias, output)``.
    """
    plan = map_layer(layer, config)
    x, w, b = random_operands(layer, rng, config)
    got = simulate_functional(build_schedule(plan), x, w, b)
    want = reference_conv_fast(layer, x, w, b, config.psum_bits)
    return got == want, x, w, b, got
