"""Phase-level latency model.

One memory interface, one transfer at a time, shared by weight loads, input
fetches and accumulator drains.  The compute engine runs the schedule's
Compute phases in order.  Buffer slots decide how far fetches may run ahead:

* input fetch ``j`` reuses the slot of compute ``j - input_slots``;
* weight load ``l`` reuses the SPM bank of load ``l - spm_banks``;
* the first compute of output tile ``k`` needs the accumulator bank drained
  by write ``k - accumulator_banks``.

When the interface is free, the request that becomes ready first wins.  Ties
go to writes, then inputs, then weights.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

from .config import HwConfig
from .scheduler import Compute, FetchInputs, FetchWeights, Schedule, WriteOut

CSV_COLUMNS = ("layer", "cycles_total", "ms", "cyc_fetch_w", "cyc_fetch_i", "cyc_write",
               "cyc_compute", "pe_active_pct", "mem_busy_pct")


@dataclass(frozen=True)
class MemoryInterfaceModel:
    width_bits: int
    clock_hz: float
    core_clock_hz: float
    overhead_cycles: int = 0
    single_channel: bool = True

    @classmethod
    def from_config(cls, config: HwConfig) -> "MemoryInterfaceModel":
        return cls(config.mem_if_width_bits, config.mem_if_clock_hz,
                   config.core_clock_hz, config.mem_overhead_cycles)

    @property
    def bandwidth(self) -> float:
        """Bytes per second."""
        return self.width_bits / 8 * self.clock_hz

    @property
    def ideal(self) -> bool:
        return math.isinf(self.clock_hz)

    @property
    def bytes_per_cycle(self) -> Fraction | float:
        if self.ideal:
            return math.inf
        return Fraction(self.width_bits, 8) * Fraction(self.clock_hz) / Fraction(self.core_clock_hz)

    def transfer_cycles(self, nbytes: int) -> int:
        if nbytes <= 0 or self.ideal:
            return 0
        return math.ceil(nbytes / self.bytes_per_cycle) + self.overhead_cycles


@dataclass(frozen=True)
class LayerTiming:
    layer: str
    cycles_total: int
    cyc_fetch_w: int
    cyc_fetch_i: int
    cyc_write: int
    cyc_compute: int
    bytes_w: int = 0
    bytes_i: int = 0
    bytes_o: int = 0
    pe_cycles: int = 0  # sum of active PEs x compute cycles
    num_pes: int = 1
    core_clock_hz: float = 1e9

    @property
    def mem_busy(self) -> int:
        return self.cyc_fetch_w + self.cyc_fetch_i + self.cyc_write

    @property
    def ms(self) -> float:
        return self.cycles_total / self.core_clock_hz * 1e3

    @property
    def pe_active_pct(self) -> float:
        return 100.0 * self.cyc_compute / self.cycles_total if self.cycles_total else 0.0

    @property
    def mem_busy_pct(self) -> float:
        return 100.0 * self.mem_busy / self.cycles_total if self.cycles_total else 0.0

    @property
    def pe_utilization_pct(self) -> float:
        """Share of PE-cycles doing a MAC, over the whole grid."""
        denom = self.num_pes * self.cycles_total
        return 100.0 * self.pe_cycles / denom if denom else 0.0


_SUMMED = ("cycles_total", "cyc_fetch_w", "cyc_fetch_i", "cyc_write", "cyc_compute",
           "bytes_w", "bytes_i", "bytes_o", "pe_cycles")


@dataclass(frozen=True)
class TimingReport:
    layers: tuple[LayerTiming, ...]
    network: str = ""
    total: LayerTiming = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", _sum_layers(self.layers, "TOTAL"))

    @property
    def ms(self) -> float:
        return self.total.ms

    @property
    def cycles(self) -> int:
        return self.total.cycles_total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in (*self.layers, self.total):
            w.writerow([row.layer, row.cycles_total, f"{row.ms:.6f}", row.cyc_fetch_w,
                        row.cyc_fetch_i, row.cyc_write, row.cyc_compute,
                        f"{row.pe_active_pct:.2f}", f"{row.mem_busy_pct:.2f}"])
        return buf.getvalue()


def _sum_layers(layers: Sequence[LayerTiming], name: str) -> LayerTiming:
    if not layers:
        return LayerTiming(name, 0, 0, 0, 0, 0)
    sums = {k: sum(getattr(x, k) for x in layers) for k in _SUMMED}
    return LayerTiming(name, num_pes=layers[0].num_pes,
                       core_clock_hz=layers[0].core_clock_hz, **sums)


def simulate_timing(schedule: Schedule, config: HwConfig | None = None) -> TimingReport:
    """Advance one layer's phases and return a single-layer report."""
    timing = simulate_layer(schedule, config)
    return TimingReport((timing,), network=timing.layer)


def simulate_layer(schedule: Schedule, config: HwConfig | None = None,
                   trace: list | None = None) -> LayerTiming:
    """Event simulation of one layer.

    If ``trace`` is a list, every memory transfer and compute is appended as
    ``(kind, start, end, phase_index)``.
    """
    plan = schedule.plan
    config = config or (plan.config if plan else HwConfig())
    name = (plan.layer.name if plan else "") or "layer"
    mem = MemoryInterfaceModel.from_config(config)
    base = dict(num_pes=config.num_pes, core_clock_hz=config.core_clock_hz)
    if plan is None or not schedule.phases:
        return LayerTiming(name, 0, 0, 0, 0, 0, **base)

    in_slots = 2 if config.double_buffer_inputs else 1
    spm_banks = 2 if config.double_buffer_spm else 1
    acc_banks = config.accumulator_banks

    # flatten the phase stream into per-resource queues
    computes: list[Compute] = []
    comp_idx: list[int] = []
    comp_input: list[int] = []  # input fetch feeding each compute
    comp_load: list[int] = []  # weight queue index
    comp_wait_write: list[int] = []  # write queue index that must finish first, or -1
    inputs: list[int] = []  # byte counts
    input_idx: list[int] = []
    weights: list[int] = []
    weight_idx: list[int] = []
    weight_last_compute: list[int] = []
    writes: list[int] = []
    write_idx: list[int] = []
    write_last_compute: list[int] = []
    load_pos: dict[int, int] = {}
    tile_first = True
    for idx, ph in enumerate(schedule.phases):
        if isinstance(ph, FetchInputs):
            inputs.append(ph.nbytes)
            input_idx.append(idx)
        elif isinstance(ph, FetchWeights):
            load_pos[ph.load] = len(weights)
            weights.append(ph.nbytes)
            weight_idx.append(idx)
            weight_last_compute.append(-1)
        elif isinstance(ph, Compute):
            j = len(computes)
            computes.append(ph)
            comp_idx.append(idx)
            comp_input.append(len(inputs) - 1)
            w = load_pos[ph.load]
            comp_load.append(w)
            weight_last_compute[w] = j
            k = len(writes)
            comp_wait_write.append(k - acc_banks if tile_first and k >= acc_banks else -1)
            tile_first = False
        else:
            writes.append(ph.nbytes)
            write_idx.append(idx)
            write_last_compute.append(len(computes) - 1)
            tile_first = True

    n_c = len(computes)
    c_end = [0] * n_c
    i_end = [0] * len(inputs)
    w_end = [0] * len(weights)
    o_end = [0] * len(writes)
    ci = ii = wi = oi = 0
    mem_free = 0
    comp_free = 0
    cyc = {"w": 0, "i": 0, "o": 0}
    pe_cycles = 0
    cyc_compute = 0

    def dep(j: int) -> int | None:
        """End time of compute ``j``, or None if it is not scheduled yet."""
        if j < 0:
            return 0
        return c_end[j] if j < ci else None

    while True:
        # compute engine: run everything whose operands are already on the way
        while ci < n_c:
            if comp_input[ci] >= ii or comp_load[ci] >= wi:
                break
            wk = comp_wait_write[ci]
            if wk >= oi:
                break
            ph = computes[ci]
            start = max(comp_free, i_end[comp_input[ci]], w_end[comp_load[ci]],
                        o_end[wk] if wk >= 0 else 0)
            comp_free = c_end[ci] = start + ph.cycles
            cyc_compute += ph.cycles
            pe_cycles += ph.cycles * ph.active_pes
            if trace is not None:
                trace.append(("compute", start, comp_free, comp_idx[ci]))
            ci += 1

        # memory interface: earliest-ready head, ties by priority
        best = None
        if oi < len(writes):
            r = dep(write_last_compute[oi])
            if r is not None:
                best = (max(mem_free, r), 0, "o")
        if ii < len(inputs):
            r = dep(ii - in_slots)
            if r is not None:
                cand = (max(mem_free, r), 1, "i")
                best = cand if best is None or cand < best else best
        if wi < len(weights):
            prev = wi - spm_banks
            r = dep(weight_last_compute[prev]) if prev >= 0 else 0
            if r is not None:
                cand = (max(mem_free, r), 2, "w")
                best = cand if best is None or cand < best else best
        if best is None:
            if ci < n_c or oi < len(writes):
                raise RuntimeError(f"timing model stalled in layer {name}")
            break
        start, _, kind = best
        if kind == "o":
            dur = mem.transfer_cycles(writes[oi])
            o_end[oi] = start + dur
            pidx = write_idx[oi]
            oi += 1
        elif kind == "i":
            dur = mem.transfer_cycles(inputs[ii])
            i_end[ii] = start + dur
            pidx = input_idx[ii]
            ii += 1
        else:
            dur = mem.transfer_cycles(weights[wi])
            w_end[wi] = start + dur
            pidx = weight_idx[wi]
            wi += 1
        cyc[kind] += dur
        mem_free = start + dur
        if trace is not None and dur:
            trace.append(({"o": "write", "i": "fetch_i", "w": "fetch_w"}[kind],
                          start, start + dur, pidx))

    total = max(mem_free, comp_free)
    return LayerTiming(name, total, cyc["w"], cyc["i"], cyc["o"], cyc_compute,
                       bytes_w=sum(weights), bytes_i=sum(inputs), bytes_o=sum(writes),
                       pe_cycles=pe_cycles, **base)


def aggregate_network(reports: Iterable[TimingReport | LayerTiming],
                      network: str = "") -> TimingReport:
    layers: list[LayerTiming] = []
    for r in reports:
        layers.extend(r.layers if isinstance(r, TimingReport) else (r,))
    if not layers:
        raise ValueError("aggregate_network needs at least one report")
    return TimingReport(tuple(layers), network=network)


def utilization_profile(report: TimingReport) -> dict[str, dict[str, float]]:
    return {x.layer: {"mem_busy_pct": x.mem_busy_pct, "pe_active_pct": x.pe_active_pct}
            for x in report.layers}


def simulate_network(schedules: Sequence[Schedule], config: HwConfig | None = None,
                     network: str = "") -> TimingReport:
    if not schedules:
        return TimingReport((), network=network)
    return TimingReport(tuple(simulate_layer(s, config) for s in schedules), network=network)


def read_totals(path) -> dict[str, float]:
    """Map network (or file stem) to total milliseconds from a report CSV.

    Accepts the report layout (``layer, ..., ms``, keyed by file stem without a
    ``_timing`` suffix) and the reference layout (``network, layer, ms``).
    """
    from pathlib import Path

    path = Path(path)
    totals: dict[str, float] = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            if (row.get("layer") or "").strip().upper() != "TOTAL":
                continue
            key = (row.get("network") or path.stem.removesuffix("_timing")).strip()
            totals[key] = float(row["ms"])
    if not totals:
        raise ValueError(f"{path}: no TOTAL row")
    return totals


def with_ideal_memory(config: HwConfig) -> HwConfig:
    return replace(config, mem_if_clock_hz=math.inf)
