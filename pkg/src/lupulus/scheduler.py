"""Expansion of a mapping plan into the ordered phase stream.

Loop order, outermost first::

    round (filter batch)
      [weights for the whole round, when they fit one SPM bank]
      output tile
        SPM load (a run of steps)       -> FetchWeights, when several loads
          step (channel x kernel-row block)
            sub-sweep (output rows whose input rows fit the buffers)
                                        -> FetchInputs, Compute
        -> WriteOut

Inputs are fetched again for every round and every tile.  When a round needs
more than one SPM load, the loads repeat for every output tile.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Union

from .config import HwConfig, LayerSpec
from .mapper import MappingPlan, OutputTile, Step


@dataclass(frozen=True, slots=True)
class FetchWeights:
    round: int
    tile: int  # -1 when the load stays resident for the whole round
    filters: range
    steps: range
    nbytes: int
    load: int  # running load counter across the layer


@dataclass(frozen=True, slots=True)
class FetchInputs:
    round: int
    tile: int
    step: int
    channels: range
    rows: tuple[int, ...]
    cols: range
    nbytes: int


@dataclass(frozen=True, slots=True)
class Compute:
    round: int
    tile: int
    step: int
    out_rows: range
    out_cols: range
    cycles: int
    active_pes: int
    load: int


@dataclass(frozen=True, slots=True)
class WriteOut:
    round: int
    tile: int
    filters: range
    out_rows: range
    out_cols: range
    nbytes: int
    groups: tuple[tuple[int, int], ...]


Phase = Union[FetchWeights, FetchInputs, Compute, WriteOut]


@dataclass(frozen=True)
class Schedule:
    plan: MappingPlan | None
    phases: tuple[Phase, ...] = ()
    loops: dict = field(default_factory=dict)

    @property
    def layer(self) -> LayerSpec | None:
        return self.plan.layer if self.plan else None

    def bytes_by_kind(self) -> dict[str, int]:
        totals = {"weights": 0, "inputs": 0, "outputs": 0}
        for ph in self.phases:
            if isinstance(ph, FetchWeights):
                totals["weights"] += ph.nbytes
            elif isinstance(ph, FetchInputs):
                totals["inputs"] += ph.nbytes
            elif isinstance(ph, WriteOut):
                totals["outputs"] += ph.nbytes
        return totals

    @property
    def compute_cycles(self) -> int:
        return sum(ph.cycles for ph in self.phases if isinstance(ph, Compute))


def step_rows(layer: LayerSpec, out_row: int, step: Step) -> list[int]:
    """Input rows one output row needs during ``step``, clipped to the map."""
    base = out_row * layer.stride - layer.padding
    return [base + u for u in step.kernel_rows if 0 <= base + u < layer.in_height]


def tile_cols(layer: LayerSpec, tile: OutputTile) -> range:
    lo = tile.cols.start * layer.stride - layer.padding
    hi = (tile.cols.stop - 1) * layer.stride + layer.kernel_width - layer.padding
    return range(max(0, lo), min(layer.in_width, hi))


def _row_capacity(plan: MappingPlan, n_cols: int) -> int:
    """Input rows that fit the buffers at once for one step."""
    config = plan.config
    seg = n_cols * config.input_bytes
    if seg == 0:
        return 1 << 30
    per_buffer = config.input_buffer_bytes // seg
    # column mapping: one channel per buffer; group mapping: rows spread over all buffers
    return per_buffer if plan.strategy == "column" else per_buffer * config.grid_rows


@lru_cache(maxsize=4096)
def _subsweeps(layer: LayerSpec, tile: OutputTile, step: Step, cap: int
               ) -> tuple[tuple[range, tuple[int, ...]], ...]:
    """Split a tile's output rows so each group's new input rows fit ``cap``."""
    seen: set[int] = set()
    out, cur_rows, cur_new = [], [], []
    for i in tile.rows:
        need = [y for y in step_rows(layer, i, step) if y not in seen]
        if cur_rows and len(cur_new) + len(need) > cap:
            out.append((range(cur_rows[0], cur_rows[-1] + 1), tuple(sorted(cur_new))))
            cur_rows, cur_new = [], []
        cur_rows.append(i)
        cur_new.extend(need)
        seen.update(need)
    out.append((range(cur_rows[0], cur_rows[-1] + 1), tuple(sorted(cur_new))))
    return tuple(out)


def _result_groups(plan: MappingPlan, rnd) -> tuple[tuple[int, int], ...]:
    if rnd.chains:
        return tuple(sorted({ch.groups[-1] for ch in rnd.chains}))
    return tuple(sorted({c.group for c in rnd.chunks}))


def build_schedule(plan: MappingPlan, config: HwConfig | None = None) -> Schedule:
    config = config or plan.config
    layer = plan.layer
    wb, ib, ob = config.weight_bytes, config.input_bytes, config.psum_bytes
    loads = plan.loads
    resident = len(loads) == 1
    step_w = [len(s.channels) * len(s.kernel_rows) * layer.kernel_width * wb for s in plan.steps]
    if plan.strategy == "column":
        pes_per_filter = [len(s.channels) for s in plan.steps]
    else:
        pes_per_filter = [len(s.kernel_rows) * layer.kernel_width for s in plan.steps]

    phases: list[Phase] = []
    load_id = 0
    for rnd in plan.rounds:
        nf = len(rnd.filters)
        filters = range(rnd.filters[0], rnd.filters[-1] + 1)
        groups = _result_groups(plan, rnd)
        if resident:
            phases.append(FetchWeights(rnd.index, -1, filters, loads[0],
                                       nf * sum(step_w), load_id))
        for t, tile in enumerate(plan.tiles):
            cols = tile_cols(layer, tile)
            cap = _row_capacity(plan, len(cols))
            for ld in loads:
                if not resident:
                    load_id += 1
                    phases.append(FetchWeights(rnd.index, t, filters, ld,
                                               nf * sum(step_w[s] for s in ld), load_id))
                for s in ld:
                    step = plan.steps[s]
                    nch = len(step.channels)
                    for out_rows, rows in _subsweeps(layer, tile, step, cap):
                        phases.append(FetchInputs(rnd.index, t, s, step.channels, rows, cols,
                                                  nch * len(rows) * len(cols) * ib))
                        cycles = (len(out_rows) * len(tile.cols) * layer.stride
                                  + config.pipeline_depth)
                        phases.append(Compute(rnd.index, t, s, out_rows, tile.cols, cycles,
                                              nf * pes_per_filter[s], load_id))
            phases.append(WriteOut(rnd.index, t, filters, tile.rows, tile.cols,
                                   nf * tile.pixels * ob, groups))
        if resident:
            load_id += 1
    loops = {"rounds": len(plan.rounds), "tiles": len(plan.tiles), "loads": len(loads),
             "steps": len(plan.steps), "weights_resident": resident}
    return Schedule(plan, tuple(phases), loops)


def build_schedules(plans) -> list[Schedule]:
    return [build_schedule(p) for p in plans]


def expected_bytes(plan: MappingPlan) -> dict[str, int]:
    """Closed-form traffic: weights and outputs exact, inputs as lower bounds."""
    layer, config = plan.layer, plan.config
    s, p = layer.stride, layer.padding
    # input pixels some output actually reads
    rows = {i * s + u - p for i in range(layer.out_height) for u in range(layer.kernel_height)
            if 0 <= i * s + u - p < layer.in_height}
    cols = {j * s + v - p for j in range(layer.out_width) for v in range(layer.kernel_width)
            if 0 <= j * s + v - p < layer.in_width}
    weights = (layer.out_channels * layer.in_channels * layer.kernel_height
               * layer.kernel_width * config.weight_bytes)
    return {
        "weights": weights,
        "weights_with_refetch": weights * plan.weight_refetch,
        "outputs": layer.out_channels * layer.out_height * layer.out_width * config.psum_bytes,
        "inputs_min": layer.in_channels * layer.in_height * layer.in_width * config.input_bytes,
        "inputs_used": layer.in_channels * len(rows) * len(cols) * config.input_bytes,
    }


def schedule_violations(schedule: Schedule) -> list[str]:
    """Data-before-use scan plus per-tile completeness of the output writes."""
    plan = schedule.plan
    if plan is None:
        return []
    layer = plan.layer
    problems: list[str] = []
    weights: set[tuple[int, int, int]] = set()  # (round, tile or -1, step)
    inputs: dict[tuple[int, int, int], set[tuple[int, int]]] = {}
    done: dict[tuple[int, int], set[int]] = {}
    for idx, ph in enumerate(schedule.phases):
        if isinstance(ph, FetchWeights):
            for s in ph.steps:
                weights.add((ph.round, ph.tile, s))
        elif isinstance(ph, FetchInputs):
            buf = inputs.setdefault((ph.round, ph.tile, ph.step), set())
            for c in ph.channels:
                for y in ph.rows:
                    buf.add((c, y))
            want = tile_cols(layer, plan.tiles[ph.tile])
            if ph.cols != want:
                problems.append(f"phase {idx}: fetched cols {ph.cols} != needed {want}")
        elif isinstance(ph, Compute):
            if ((ph.round, -1, ph.step) not in weights
                    and (ph.round, ph.tile, ph.step) not in weights):
                problems.append(f"phase {idx}: compute before weights of step {ph.step}")
            step = plan.steps[ph.step]
            buf = inputs.get((ph.round, ph.tile, ph.step), set())
            for i in ph.out_rows:
                for y in step_rows(layer, i, step):
                    for c in step.channels:
                        if (c, y) not in buf:
                            problems.append(f"phase {idx}: input ({c},{y}) not resident")
                            break
            done.setdefault((ph.round, ph.tile), set()).add(ph.step)
        elif isinstance(ph, WriteOut):
            if done.get((ph.round, ph.tile), set()) != set(range(len(plan.steps))):
                problems.append(f"phase {idx}: write of round {ph.round} tile {ph.tile}"
                                " before all steps computed")
        if len(problems) > 20:
            break
    return problems


# --------------------------------------------------------------------------- #
#   Fetch-unit programs
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class FetchProgram:
    """Affine loop nest for one fetch unit, outermost loop first."""
    unit: str
    loops: tuple[tuple[str, int], ...]
    params: dict

    def dump(self) -> str:
        lines = [f"fetch unit {self.unit}"]
        for depth, (name, bound) in enumerate(self.loops):
            lines.append("  " * (depth + 1) + f"for {name} in 0..{bound}")
        for key in sorted(self.params):
            lines.append(f"  param {key} = {self.params[key]}")
        return "\n".join(lines) + "\n"


def emit_fetch_program(schedule: Schedule) -> dict[str, FetchProgram]:
    plan = schedule.plan
    if plan is None:
        return {}
    layer, config = plan.layer, plan.config
    tiles = plan.tiles
    tile_rows = len(tiles[0].rows)
    tile_colw = len(tiles[0].cols)
    n_tr = -(-layer.out_height // tile_rows)
    n_tc = -(-layer.out_width // tile_colw)
    filters_per_round = len(plan.rounds[0].filters)
    if plan.strategy == "column":
        chans_per_step, row_block, row_passes = config.grid_rows, 1, 1
    else:
        row_passes = -(-layer.kernel_height // config.group_rows)
        chans_per_step, row_block = 1, config.group_rows
    geometry = {
        "strategy": plan.strategy,
        "c_in": layer.in_channels, "c_out": layer.out_channels,
        "h_in": layer.in_height, "w_in": layer.in_width,
        "h_out": layer.out_height, "w_out": layer.out_width,
        "k_h": layer.kernel_height, "k_w": layer.kernel_width,
        "stride": layer.stride, "pad": layer.padding,
        "tile_rows": tile_rows, "tile_cols": tile_colw,
        "filters_per_round": filters_per_round,
        "chans_per_step": chans_per_step, "row_block": row_block, "row_passes": row_passes,
        "spm_slots": plan.spm_slots,
    }
    n_rounds, n_steps = len(plan.rounds), len(plan.steps)
    n_loads = -(-n_steps // plan.spm_slots)
    resident = n_loads == 1
    w_loops = [("round", n_rounds)]
    if not resident:
        w_loops += [("tile", n_tr * n_tc), ("load", n_loads)]
    w_loops += [("filter", filters_per_round), ("step", min(plan.spm_slots, n_steps))]
    weights = FetchProgram("weights", tuple(w_loops), dict(
        geometry, base=0, elem_bytes=config.weight_bytes, resident=resident))
    i_loops = (("round", n_rounds), ("tile_row", n_tr), ("tile_col", n_tc),
               ("step", n_steps), ("out_row", tile_rows), ("kernel_row", row_block))
    inputs = FetchProgram("inputs", i_loops, dict(
        geometry, base=0, elem_bytes=config.input_bytes,
        buffer_bytes=config.input_buffer_bytes, buffers=config.grid_rows))
    return {"weights": weights, "inputs": inputs}


def replay_weights(prog: FetchProgram) -> Iterator[tuple]:
    """Yield ``(round, tile, filters, steps, nbytes, segments)`` per weight load.

    ``segments`` lists ``(address, length)`` runs in external memory for the
    filter-major ``[c_out][c_in][k_h][k_w]`` layout.
    """
    p = prog.params
    bounds = dict(prog.loops)
    eb, kh, kw, c_in = p["elem_bytes"], p["k_h"], p["k_w"], p["c_in"]
    n_steps = -(-c_in // p["chans_per_step"]) * p["row_passes"]
    n_loads = bounds.get("load", 1)
    n_tiles = bounds.get("tile", 1)
    slots = p["spm_slots"]

    def step_span(s):
        if p["strategy"] == "column":
            c0 = s * p["chans_per_step"]
            return range(c0, min(c_in, c0 + p["chans_per_step"])), range(0, 1)
        c, b = divmod(s, p["row_passes"])
        return range(c, c + 1), range(b * p["row_block"], min(kh, (b + 1) * p["row_block"]))

    load_id = 0
    for r in range(bounds["round"]):
        f0 = r * p["filters_per_round"]
        filters = range(f0, min(p["c_out"], f0 + p["filters_per_round"]))
        for t in range(n_tiles):
            for ld in range(n_loads):
                steps = range(ld * slots, min(n_steps, (ld + 1) * slots))
                segs = []
                for f in filters:
                    for s in steps:
                        chans, krows = step_span(s)
                        for c in chans:
                            addr = p["base"] + ((f * c_in + c) * kh + krows.start) * kw * eb
                            segs.append((addr, len(krows) * kw * eb))
                if not p["resident"]:
                    load_id += 1
                yield (r, t if not p["resident"] else -1, filters, steps,
                       sum(n for _, n in segs), tuple(segs), load_id)
            if p["resident"]:
                load_id += 1


def replay_inputs(prog: FetchProgram) -> Iterator[tuple]:
    """Yield ``(round, tile, step, channels, rows, cols, nbytes)`` per input fetch."""
    p = prog.params
    bounds = dict(prog.loops)
    s, pad, kh, kw = p["stride"], p["pad"], p["k_h"], p["k_w"]
    h_in, w_in, h_out, w_out = p["h_in"], p["w_in"], p["h_out"], p["w_out"]
    eb, c_in = p["elem_bytes"], p["c_in"]
    column = p["strategy"] == "column"
    for r in range(bounds["round"]):
        for tr in range(bounds["tile_row"]):
            for tc in range(bounds["tile_col"]):
                t = tr * bounds["tile_col"] + tc
                o_r0 = tr * p["tile_rows"]
                o_r1 = min(h_out, o_r0 + p["tile_rows"])
                o_c0 = tc * p["tile_cols"]
                o_c1 = min(w_out, o_c0 + p["tile_cols"])
                x0 = max(0, o_c0 * s - pad)
                x1 = min(w_in, (o_c1 - 1) * s + kw - pad)
                ncols = max(0, x1 - x0)
                seg = ncols * eb
                per_buf = p["buffer_bytes"] // seg if seg else 1 << 30
                cap = per_buf if column else per_buf * p["buffers"]
                for st in range(bounds["step"]):
                    if column:
                        c0 = st * p["chans_per_step"]
                        chans = range(c0, min(c_in, c0 + p["chans_per_step"]))
                        u0, u1 = 0, 1
                    else:
                        c, b = divmod(st, p["row_passes"])
                        chans = range(c, c + 1)
                        u0, u1 = b * p["row_block"], min(kh, (b + 1) * p["row_block"])
                    last = -1
                    batch: list[int] = []
                    started = False
                    for i in range(o_r0, o_r1):
                        new = []
                        for u in range(u0, u1):
                            y = i * s + u - pad
                            if 0 <= y < h_in and y > last:
                                new.append(y)
                        if started and len(batch) + len(new) > cap:
                            yield (r, t, st, chans, tuple(batch), range(x0, x1),
                                   len(chans) * len(batch) * ncols * eb)
                            batch = []
                        started = True
                        batch.extend(new)
                        if new:
                            last = new[-1]
                    yield (r, t, st, chans, tuple(batch), range(x0, x1),
                           len(chans) * len(batch) * ncols * eb)


def weight_segments(plan: MappingPlan, ph: FetchWeights) -> tuple[tuple[int, int], ...]:
    """External-memory runs of a weight load, computed from the plan."""
    layer, eb = plan.layer, plan.config.weight_bytes
    kh, kw, c_in = layer.kernel_height, layer.kernel_width, layer.in_channels
    segs = []
    for f in ph.filters:
        for s in ph.steps:
            step = plan.steps[s]
            for c in step.channels:
                addr = ((f * c_in + c) * kh + step.kernel_rows.start) * kw * eb
                segs.append((addr, len(step.kernel_rows) * kw * eb))
    return tuple(segs)


def dump_schedule(schedule: Schedule, limit: int | None = None) -> str:
    plan = schedule.plan
    if plan is None:
        return "empty schedule\n"
    totals = schedule.bytes_by_kind()
    lines = [f"schedule {plan.layer.name or '-'} phases={len(schedule.phases)} "
             + " ".join(f"{k}={v}" for k, v in schedule.loops.items()),
             "bytes " + " ".join(f"{k}={v}" for k, v in totals.items())
             + f" compute_cycles={schedule.compute_cycles}"]
    for ph in schedule.phases[:limit]:
        if isinstance(ph, FetchWeights):
            lines.append(f"W  r{ph.round} t{ph.tile} load{ph.load} filters "
                         f"{ph.filters.start}:{ph.filters.stop} steps {ph.steps.start}:"
                         f"{ph.steps.stop} {ph.nbytes}B")
        elif isinstance(ph, FetchInputs):
            rows = f"{ph.rows[0]}..{ph.rows[-1]}({len(ph.rows)})" if ph.rows else "-"
            lines.append(f"I  r{ph.round} t{ph.tile} s{ph.step} ch {ph.channels.start}:"
                         f"{ph.channels.stop} rows {rows} cols {ph.cols.start}:"
                         f"{ph.cols.stop} {ph.nbytes}B")
        elif isinstance(ph, Compute):
            lines.append(f"C  r{ph.round} t{ph.tile} s{ph.step} out {ph.out_rows.start}:"
                         f"{ph.out_rows.stop} x {ph.out_cols.start}:{ph.out_cols.stop} "
                         f"{ph.cycles}cyc {ph.active_pes}pe")
        else:
            lines.append(f"O  r{ph.round} t{ph.tile} filters {ph.filters.start}:"
                         f"{ph.filters.stop} {ph.nbytes}B")
    if limit is not None and len(schedule.phases) > limit:
        lines.append(f"... {len(schedule.phases) - limit} more phases")
    return "\n".join(lines) + "\n"
