"""Placement of conv / FC layers onto the PE grid.

Two strategies:

* ``group``: a kernel that fits a PE group occupies one group, one filter per
  group per round.  Wider kernels are cut into column chunks of at most
  ``group_cols`` and spread over horizontally adjacent groups whose
  accumulators are chained.  Kernel row-blocks taller than a group are folded
  in time (``row_pass``) onto the same PEs and accumulate in the same store.
* ``column``: 1x1 convolutions and FC layers.  Each filter takes one full grid
  column; input channels go bottom-to-top along it and partial sums are
  forwarded upwards through the group accumulators.

Output pixels are tiled so one tile's partial sums fit a single accumulator
bank.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .config import HwConfig, LayerSpec, validate, validate_layer


class MappingError(ValueError):
    """Layer cannot be placed; ``resource`` names the limiting parameter."""

    def __init__(self, message: str, resource: str):
        super().__init__(message)
        self.resource = resource


@dataclass(frozen=True, slots=True)
class KernelPiece:
    rows: range
    cols: range
    col_group: int  # horizontal group offset from the filter's first group
    row_pass: int


@dataclass(frozen=True, slots=True)
class KernelChunk:
    filter_index: int
    channels: range
    rows: range
    cols: range
    group: tuple[int, int]
    pe_rows: range
    pe_cols: range
    row_pass: int = 0

    @property
    def area(self) -> int:
        return len(self.rows) * len(self.cols)


@dataclass(frozen=True)
class MergeChain:
    """Groups whose accumulators are chained; the last one holds the result."""
    groups: tuple[tuple[int, int], ...]
    direction: str  # "horizontal" or "up"


@dataclass(frozen=True)
class Round:
    index: int
    filters: tuple[int, ...]
    chunks: tuple[KernelChunk, ...]
    chains: tuple[MergeChain, ...]


@dataclass(frozen=True, slots=True)
class Step:
    """One compute step: a channel set against a block of kernel rows."""
    channels: range
    kernel_rows: range


@dataclass(frozen=True, slots=True)
class OutputTile:
    rows: range
    cols: range

    @property
    def pixels(self) -> int:
        return len(self.rows) * len(self.cols)


@dataclass(frozen=True)
class MeshLink:
    buffer: int
    mode: str  # "one-to-one" or "one-to-many"
    pe_rows: tuple[int, ...]


@dataclass(frozen=True)
class MappingPlan:
    layer: LayerSpec
    config: HwConfig
    strategy: str
    rounds: tuple[Round, ...]
    tiles: tuple[OutputTile, ...]
    steps: tuple[Step, ...]
    spm_slots: int
    mesh: tuple[MeshLink, ...]
    group_span: int  # groups each filter's partial sums are pooled over
    filters_per_group: int

    @property
    def loads(self) -> list[range]:
        """Step index ranges that share one SPM bank fill."""
        n = len(self.steps)
        return [range(i, min(n, i + self.spm_slots)) for i in range(0, n, self.spm_slots)]

    @property
    def pe_weight_bytes(self) -> int:
        """Worst-case weight bytes held by one PE in one SPM bank."""
        return min(self.spm_slots, len(self.steps)) * self.config.weight_bytes

    def psum_demand(self, tile: OutputTile) -> int:
        """Accumulator bytes one group needs for ``tile``."""
        px = math.ceil(self.filters_per_group * tile.pixels / self.group_span)
        return px * self.config.psum_bytes

    @property
    def max_filters_per_round(self) -> int:
        return max(len(r.filters) for r in self.rounds)

    @property
    def weight_refetch(self) -> int:
        """How many times each weight crosses the memory interface."""
        return len(self.tiles) if len(self.loads) > 1 else 1


def decompose_kernel(h_f: int, w_f: int, config: HwConfig) -> list[KernelPiece]:
    if w_f > config.grid_cols:
        raise MappingError(
            f"kernel width {w_f} exceeds grid width {config.grid_cols}", "grid_cols")
    gr, gc = config.group_rows, config.group_cols
    pieces = []
    for p, r0 in enumerate(range(0, h_f, gr)):
        for j, c0 in enumerate(range(0, w_f, gc)):
            pieces.append(KernelPiece(range(r0, min(h_f, r0 + gr)),
                                      range(c0, min(w_f, c0 + gc)), j, p))
    return pieces


def _spm_slots(config: HwConfig) -> int:
    slots = config.pe_spm_bytes // config.weight_bytes
    if slots < 1:
        raise MappingError("PE scratch-pad cannot hold a single weight", "pe_spm_bytes")
    return slots


def _tiles(layer: LayerSpec, config: HwConfig, px_per_tile: int) -> tuple[OutputTile, ...]:
    if px_per_tile < 1:
        raise MappingError("accumulator bank cannot hold one output tile", "accumulator_bytes")
    buf_cols = config.input_buffer_bytes // config.input_bytes
    if layer.kernel_width > buf_cols:
        raise MappingError(
            f"input buffer too small for a {layer.kernel_width}-wide kernel row",
            "input_buffer_bytes")
    s = layer.stride
    tc = min(layer.out_width, (buf_cols - layer.kernel_width) // s + 1, px_per_tile)
    tr = min(layer.out_height, px_per_tile // tc)
    return tuple(
        OutputTile(range(r, min(layer.out_height, r + tr)), range(c, min(layer.out_width, c + tc)))
        for r in range(0, layer.out_height, tr)
        for c in range(0, layer.out_width, tc))


def _bank_psums(config: HwConfig) -> int:
    return config.accumulator_bytes // config.accumulator_banks // config.psum_bytes


def map_conv_layer(layer: LayerSpec, config: HwConfig) -> MappingPlan:
    validate(config)
    validate_layer(layer)
    if layer.kind == "fc" or (layer.kernel_height, layer.kernel_width) == (1, 1):
        return map_pointwise_or_fc(layer, config)

    pieces = decompose_kernel(layer.kernel_height, layer.kernel_width, config)
    span = max(p.col_group for p in pieces) + 1
    n_passes = max(p.row_pass for p in pieces) + 1
    slots = _spm_slots(config)
    ngr, ngc = config.group_grid
    gr, gc = config.group_rows, config.group_cols
    # filter slots in row-major group order
    anchors = [(i, j * span) for i in range(ngr) for j in range(ngc // span)]

    rounds = []
    for r, first in enumerate(range(0, layer.out_channels, len(anchors))):
        filters = tuple(range(first, min(layer.out_channels, first + len(anchors))))
        chunks, chains = [], []
        for f, (grow, gcol) in zip(filters, anchors):
            for p in pieces:
                g = (grow, gcol + p.col_group)
                chunks.append(KernelChunk(
                    f, range(layer.in_channels), p.rows, p.cols, g,
                    range(g[0] * gr, g[0] * gr + len(p.rows)),
                    range(g[1] * gc, g[1] * gc + len(p.cols)), p.row_pass))
            if span > 1:
                chains.append(MergeChain(tuple((grow, gcol + j) for j in range(span)),
                                         "horizontal"))
        rounds.append(Round(r, filters, tuple(chunks), tuple(chains)))

    steps = tuple(
        Step(range(c, c + 1), range(b * gr, min(layer.kernel_height, (b + 1) * gr)))
        for c in range(layer.in_channels) for b in range(n_passes))
    mesh = tuple(MeshLink(b, "one-to-many",
                          tuple(x for x in range(config.grid_rows) if x % gr == b % gr))
                 for b in range(config.grid_rows))
    tiles = _tiles(layer, config, _bank_psums(config) * span)
    return MappingPlan(layer, config, "group", tuple(rounds), tiles, steps, slots, mesh,
                       group_span=span, filters_per_group=1)


def map_pointwise_or_fc(layer: LayerSpec, config: HwConfig) -> MappingPlan:
    validate(config)
    validate_layer(layer)
    if (layer.kernel_height, layer.kernel_width) != (1, 1):
        raise ValueError("column mapping needs a 1x1 kernel or an FC layer")
    slots = _spm_slots(config)
    ngr, _ = config.group_grid
    R, gr, gc = config.grid_rows, config.group_rows, config.group_cols
    c_in = layer.in_channels

    chain_len = min(c_in, ngr)
    top = ngr - chain_len  # highest group row holding a channel
    rounds = []
    for r, first in enumerate(range(0, layer.out_channels, config.grid_cols)):
        filters = tuple(range(first, min(layer.out_channels, first + config.grid_cols)))
        chunks, chains = [], []
        for col, f in enumerate(filters):
            # channel c uses lane c % R in pass c // R; lanes alternate between
            # groups from the bottom up so shallow layers still span the column
            for lane in range(min(c_in, R)):
                pe_row = column_lane_row(lane, config)
                chunks.append(KernelChunk(
                    f, range(lane, c_in, R), range(1), range(1), (pe_row // gr, col // gc),
                    range(pe_row, pe_row + 1), range(col, col + 1)))
            chains.append(MergeChain(tuple((g, col // gc) for g in range(ngr - 1, top - 1, -1)),
                                     "up"))
        rounds.append(Round(r, filters, tuple(chunks), tuple(chains)))

    steps = tuple(Step(range(c, min(c_in, c + R)), range(1)) for c in range(0, c_in, R))
    mesh = tuple(MeshLink(b, "one-to-one", (b,)) for b in range(R))
    # final sums of the gc filters in a group column are pooled over the chain
    tiles = _tiles(layer, config, _bank_psums(config) * chain_len // gc)
    return MappingPlan(layer, config, "column", tuple(rounds), tiles, steps, slots, mesh,
                       group_span=chain_len, filters_per_group=gc)


def column_lane_row(lane: int, config: HwConfig) -> int:
    """PE row that holds channel lane ``lane`` in the column mapping."""
    ngr = config.grid_rows // config.group_rows
    group_from_bottom, slot = lane % ngr, lane // ngr
    return (ngr - 1 - group_from_bottom) * config.group_rows + config.group_rows - 1 - slot


map_layer = map_conv_layer


@dataclass(frozen=True)
class ReuseMetrics:
    input_reuse: int
    conv_reuse: int
    psum_share_degree: int


def reuse_metrics(layer: LayerSpec, plan: MappingPlan) -> ReuseMetrics:
    k = layer.kernel_height * layer.kernel_width
    if plan.strategy == "column":
        share = min(layer.in_channels, plan.config.grid_rows)
    else:
        share = min(layer.kernel_height, plan.config.group_rows) * layer.kernel_width
    return ReuseMetrics(k * plan.max_filters_per_round, layer.out_height * layer.out_width, share)


def plan_violations(plan: MappingPlan) -> list[str]:
    """Every broken placement invariant, as readable messages."""
    layer, config = plan.layer, plan.config
    problems = []

    placed = sum(c.area * len(c.channels) for r in plan.rounds for c in r.chunks)
    expected = layer.out_channels * layer.in_channels * layer.kernel_height * layer.kernel_width
    if placed != expected:
        problems.append(f"{placed} weights placed, layer has {expected}")

    seen_filters = Counter(f for r in plan.rounds for f in r.filters)
    if sorted(seen_filters) != list(range(layer.out_channels)) or max(seen_filters.values()) > 1:
        problems.append("filters not scheduled exactly once")

    for rnd in plan.rounds:
        cover: dict[tuple[int, int], set] = {}
        pe_slots = Counter()
        for c in rnd.chunks:
            if len(c.cols) > config.group_cols or len(c.rows) > config.group_rows:
                problems.append(f"round {rnd.index}: chunk larger than a group")
            if not (0 <= c.pe_rows.start and c.pe_rows.stop <= config.grid_rows
                    and 0 <= c.pe_cols.start and c.pe_cols.stop <= config.grid_cols):
                problems.append(f"round {rnd.index}: chunk outside the grid")
            g0r, g0c = c.group[0] * config.group_rows, c.group[1] * config.group_cols
            if not (g0r <= c.pe_rows.start and c.pe_rows.stop <= g0r + config.group_rows
                    and g0c <= c.pe_cols.start and c.pe_cols.stop <= g0c + config.group_cols):
                problems.append(f"round {rnd.index}: chunk leaves its group")
            for pr in c.pe_rows:
                for pc in c.pe_cols:
                    pe_slots[(pr, pc, c.row_pass)] += 1
            cells = cover.setdefault((c.filter_index, c.channels.start, c.channels.step), set())
            for u in c.rows:
                for v in c.cols:
                    if (u, v) in cells:
                        problems.append(f"filter {c.filter_index}: kernel cell ({u},{v}) twice")
                    cells.add((u, v))
        if pe_slots and max(pe_slots.values()) > 1:
            problems.append(f"round {rnd.index}: a PE slot holds two chunks")
        for chain in rnd.chains:
            g = chain.groups
            if chain.direction == "horizontal":
                ok = all(a[0] == b[0] and b[1] == a[1] + 1 for a, b in zip(g, g[1:]))
            else:
                ok = all(a[1] == b[1] and b[0] == a[0] - 1 for a, b in zip(g, g[1:]))
            if not ok:
                problems.append(f"round {rnd.index}: non-contiguous {chain.direction} chain")

    if plan.pe_weight_bytes > config.pe_spm_bytes:
        problems.append(f"PE weight footprint {plan.pe_weight_bytes} B > {config.pe_spm_bytes} B")
    bank = config.accumulator_bytes // config.accumulator_banks
    for tile in plan.tiles:
        if plan.psum_demand(tile) > bank:
            problems.append(f"tile {tile} needs {plan.psum_demand(tile)} B of accumulator")
            break
    covered = sum(t.pixels for t in plan.tiles)
    if covered != layer.out_height * layer.out_width:
        problems.append("output tiles do not cover the feature map")
    return problems


def dump_plan(plan: MappingPlan) -> str:
    """Round -> group -> chunk table."""
    layer = plan.layer
    lines = [
        f"layer {layer.name or '-'} {layer.kind} c_in={layer.in_channels} c_out={layer.out_channels}"
        f" kernel={layer.kernel_height}x{layer.kernel_width} stride={layer.stride}"
        f" pad={layer.padding}",
        f"strategy={plan.strategy} rounds={len(plan.rounds)} tiles={len(plan.tiles)}"
        f" steps={len(plan.steps)} spm_loads={len(plan.loads)}"
        f" pe_weight_bytes={plan.pe_weight_bytes}",
    ]
    for rnd in plan.rounds:
        lines.append(f"round {rnd.index}: filters {rnd.filters[0]}..{rnd.filters[-1]}")
        for c in sorted(rnd.chunks, key=lambda c: (c.group, c.row_pass, c.pe_rows.start)):
            ch = c.channels
            lines.append(
                f"  group {c.group[0]},{c.group[1]}  filter {c.filter_index:<4d}"
                f" k_rows {c.rows.start}:{c.rows.stop} k_cols {c.cols.start}:{c.cols.stop}"
                f" pass {c.row_pass} pe {c.pe_rows.start}:{c.pe_rows.stop},"
                f"{c.pe_cols.start}:{c.pe_cols.stop} channels {ch.start}:{ch.stop}:{ch.step}")
        for chain in rnd.chains:
            lines.append(f"  chain {chain.direction}: "
                         + " -> ".join(f"{a},{b}" for a, b in chain.groups))
    return "\n".join(lines) + "\n"
