"""Bit-exact execution of a schedule over quantized integer tensors.

Partial sums are 16-bit saturating registers.  Each accumulator keeps a wide
shadow sum and exposes its saturated value, so the stored word never leaves
the signed 16-bit range and the final result equals a single saturation of
the exact sum.  ``reference_conv`` applies the same rule, which makes the
two routes comparable element for element.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import HwConfig, LayerSpec
from .mapper import MappingPlan
from .scheduler import Compute, FetchInputs, FetchWeights, Schedule, WriteOut, tile_cols

_MAGIC = b"LUPT"


class FunctionalError(RuntimeError):
    """The schedule and the operands disagree, or a buffer was misused."""


def signed_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class Tensor:
    data: np.ndarray  # int64 backing store
    bits: int

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.int64)
        lo, hi = signed_range(self.bits)
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise ValueError(f"values outside the signed {self.bits}-bit range")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Tensor) and self.bits == other.bits
                and self.shape == other.shape and bool(np.array_equal(self.data, other.data)))

    def to_bytes(self) -> bytes:
        width = self.bits // 8
        header = _MAGIC + struct.pack("<BB", self.bits, self.data.ndim)
        header += struct.pack(f"<{self.data.ndim}I", *self.shape)
        dtype = {1: "<i1", 2: "<i2", 4: "<i4", 8: "<i8"}[width]
        return header + self.data.astype(dtype).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Tensor":
        if blob[:4] != _MAGIC:
            raise ValueError("not a tensor file")
        bits, ndim = struct.unpack_from("<BB", blob, 4)
        shape = struct.unpack_from(f"<{ndim}I", blob, 6)
        dtype = {8: "<i1", 16: "<i2", 32: "<i4", 64: "<i8"}[bits]
        body = np.frombuffer(blob, dtype=dtype, offset=6 + 4 * ndim)
        if body.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError("tensor payload does not match its shape")
        return cls(body.reshape(shape).astype(np.int64), bits)

    def to_text(self) -> str:
        return json.dumps({"bits": self.bits, "shape": list(self.shape),
                           "data": self.data.tolist()})

    @classmethod
    def from_text(cls, text: str) -> "Tensor":
        obj = json.loads(text)
        data = np.array(obj["data"], dtype=np.int64).reshape(obj["shape"])
        return cls(data, int(obj["bits"]))

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(self.to_text())
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Tensor":
        path = Path(path)
        if path.suffix == ".json":
            return cls.from_text(path.read_text())
        return cls.from_bytes(path.read_bytes())


def quantize(values, bits: int) -> Tensor:
    """Round half away from zero, then clamp to the signed range."""
    if bits not in (8, 16):
        raise ValueError(f"unsupported width {bits}")
    x = np.asarray(values, dtype=np.float64)
    rounded = np.sign(x) * np.floor(np.abs(x) + 0.5)
    lo, hi = signed_range(bits)
    return Tensor(np.clip(rounded, lo, hi).astype(np.int64), bits)


def saturate(values: np.ndarray, bits: int) -> np.ndarray:
    lo, hi = signed_range(bits)
    return np.clip(values, lo, hi)


def _as_operands(layer: LayerSpec, inputs: Tensor, weights: Tensor, bias: Tensor | None):
    x = inputs.data
    w = weights.data
    if layer.kind == "fc":
        x = x.reshape(layer.in_channels, 1, 1) if x.size == layer.in_channels else x
        w = w.reshape(layer.out_channels, layer.in_channels, 1, 1) if w.ndim == 2 else w
    want_x = (layer.in_channels, layer.in_height, layer.in_width)
    want_w = (layer.out_channels, layer.in_channels, layer.kernel_height, layer.kernel_width)
    if x.shape != want_x:
        raise ValueError(f"input shape {x.shape} does not match layer {want_x}")
    if w.shape != want_w:
        raise ValueError(f"weight shape {w.shape} does not match layer {want_w}")
    b = np.zeros(layer.out_channels, dtype=np.int64)
    if bias is not None:
        if bias.data.shape != (layer.out_channels,):
            raise ValueError(f"bias shape {bias.data.shape} does not match {layer.out_channels}")
        b = bias.data
    return x, w, b


def _finish(layer: LayerSpec, acc: np.ndarray, psum_bits: int) -> Tensor:
    out = saturate(acc, psum_bits)
    if layer.apply_relu:
        out = np.maximum(out, 0)
    if layer.kind == "fc":
        out = out.reshape(layer.out_channels)
    return Tensor(out, psum_bits)


def reference_conv(layer: LayerSpec, inputs: Tensor, weights: Tensor,
                   bias: Tensor | None = None, psum_bits: int = 16) -> Tensor:
    """Direct cross-correlation, one output element at a time."""
    x, w, b = _as_operands(layer, inputs, weights, bias)
    s, p = layer.stride, layer.padding
    h_in, w_in = layer.in_height, layer.in_width
    out = np.zeros((layer.out_channels, layer.out_height, layer.out_width), dtype=np.int64)
    xs = x.tolist()
    ws = w.tolist()
    for f in range(layer.out_channels):
        for i in range(layer.out_height):
            for j in range(layer.out_width):
                total = int(b[f])
                for c in range(layer.in_channels):
                    for u in range(layer.kernel_height):
                        y = i * s + u - p
                        if not 0 <= y < h_in:
                            continue
                        row = xs[c][y]
                        wrow = ws[f][c][u]
                        for v in range(layer.kernel_width):
                            xx = j * s + v - p
                            if 0 <= xx < w_in:
                                total += wrow[v] * row[xx]
                out[f, i, j] = total
    return _finish(layer, out, psum_bits)


def reference_conv_fast(layer: LayerSpec, inputs: Tensor, weights: Tensor,
                        bias: Tensor | None = None, psum_bits: int = 16) -> Tensor:
    """Vectorized cross-correlation over a zero-padded copy of the input."""
    x, w, b = _as_operands(layer, inputs, weights, bias)
    s, p = layer.stride, layer.padding
    padded = np.pad(x, ((0, 0), (p, p), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (layer.kernel_height, layer.kernel_width), axis=(1, 2))
    windows = windows[:, ::s, ::s][:, :layer.out_height, :layer.out_width]
    out = np.einsum("chwuv,fcuv->fhw", windows, w, optimize=True) + b[:, None, None]
    return _finish(layer, out, psum_bits)


def random_operands(layer: LayerSpec, rng: np.random.Generator, config: HwConfig | None = None
                    ) -> tuple[Tensor, Tensor, Tensor | None]:
    """Full-range int8 inputs and weights; small psum-width bias if the layer has one."""
    config = config or HwConfig()
    lo, hi = signed_range(config.input_bits)
    x = rng.integers(lo, hi + 1, size=(layer.in_channels, layer.in_height, layer.in_width))
    wshape = (layer.out_channels, layer.in_channels, layer.kernel_height, layer.kernel_width)
    if layer.weight_init == "identity":
        w = identity_weights(layer)
    else:
        wl, wh = signed_range(config.weight_bits)
        w = rng.integers(wl, wh + 1, size=wshape)
    bias = None
    if layer.has_bias:
        bl, bh = signed_range(config.psum_bits)
        bias = Tensor(rng.integers(bl // 8, bh // 8 + 1, size=layer.out_channels),
                      config.psum_bits)
    return Tensor(x, config.input_bits), Tensor(w, config.weight_bits), bias


def identity_weights(layer: LayerSpec) -> np.ndarray:
    w = np.zeros((layer.out_channels, layer.in_channels, layer.kernel_height,
                  layer.kernel_width), dtype=np.int64)
    cu, cv = layer.kernel_height // 2, layer.kernel_width // 2
    for f in range(min(layer.out_channels, layer.in_channels)):
        w[f, f, cu, cv] = 1
    return w


class _Accumulator:
    """Wide shadow sums for one output tile across a round's filters."""

    def __init__(self, bias: np.ndarray, tile_shape: tuple[int, int], psum_bits: int):
        self.shadow = np.repeat(bias[:, None, None], tile_shape[0] * tile_shape[1],
                                axis=1).reshape(len(bias), *tile_shape).astype(np.int64)
        self.bits = psum_bits

    def add(self, filter_slot: int, rows: slice, part: np.ndarray) -> None:
        self.shadow[filter_slot, rows] += part

    @property
    def stored(self) -> np.ndarray:
        return saturate(self.shadow, self.bits)


def simulate_functional(schedule: Schedule, inputs: Tensor, weights: Tensor,
                        bias: Tensor | None = None) -> Tensor:
    """Run the phase stream: fill SPMs and buffers, MAC in the PEs, merge and drain."""
    plan = schedule.plan
    if plan is None:
        raise FunctionalError("empty schedule")
    layer, config = plan.layer, plan.config
    x, w, b = _as_operands(layer, inputs, weights, bias)
    if inputs.bits > config.input_bits or weights.bits > config.weight_bits:
        raise FunctionalError("operands wider than the configured datapath")
    spm_banks = 2 if config.double_buffer_spm else 1
    bank_bytes = config.accumulator_bytes // config.accumulator_banks

    out = np.zeros((layer.out_channels, layer.out_height, layer.out_width), dtype=np.int64)
    spm: list[dict] = [dict() for _ in range(spm_banks)]
    load_bank: dict[int, int] = {}
    buffer: dict[tuple[int, int], tuple[range, np.ndarray]] = {}
    buffer_key = None
    accs: dict[tuple[int, int], _Accumulator] = {}
    pieces = _PieceTable(plan)

    for ph in schedule.phases:
        if isinstance(ph, FetchWeights):
            if len(ph.steps) > plan.spm_slots:
                raise FunctionalError(f"load {ph.load} holds {len(ph.steps)} steps, "
                                      f"SPM has {plan.spm_slots} slots")
            bank = ph.load % spm_banks
            spm[bank] = {}
            load_bank[ph.load] = bank
            for f in ph.filters:
                for si in ph.steps:
                    st = plan.steps[si]
                    spm[bank][(f, si)] = w[f, st.channels.start:st.channels.stop,
                                           st.kernel_rows.start:st.kernel_rows.stop, :]
        elif isinstance(ph, FetchInputs):
            key = (ph.round, ph.tile, ph.step)
            if key != buffer_key:
                buffer, buffer_key = {}, key
            for c in ph.channels:
                for y in ph.rows:
                    buffer[(c, y)] = (ph.cols, x[c, y, ph.cols.start:ph.cols.stop])
        elif isinstance(ph, Compute):
            rnd = plan.rounds[ph.round]
            tile = plan.tiles[ph.tile]
            acc = accs.get((ph.round, ph.tile))
            if acc is None:
                demand = plan.psum_demand(tile)
                if demand > bank_bytes:
                    raise FunctionalError(f"tile needs {demand} B of accumulator, bank has "
                                          f"{bank_bytes} B")
                acc = accs[(ph.round, ph.tile)] = _Accumulator(
                    b[list(rnd.filters)], (len(tile.rows), len(tile.cols)), config.psum_bits)
            bank = load_bank.get(ph.load)
            if bank is None or (rnd.filters[0], ph.step) not in spm[bank]:
                raise FunctionalError(f"compute of step {ph.step} before its weights")
            step = plan.steps[ph.step]
            window = _window(layer, buffer, step, ph, tile_cols(layer, tile))
            rows = slice(ph.out_rows.start - tile.rows.start, ph.out_rows.stop - tile.rows.start)
            n_i, n_j = len(ph.out_rows), len(ph.out_cols)
            for slot, f in enumerate(rnd.filters):
                wts = spm[bank][(f, ph.step)]
                # one partial per group, then merged along the chain
                chain_sum = np.zeros((n_i, n_j), dtype=np.int64)
                for lane_chs, u_rng, v_rng in pieces.get(rnd, ph.step, f):
                    part = np.zeros((n_i, n_j), dtype=np.int64)
                    for cl in lane_chs:
                        for u in u_rng:
                            uu = u - step.kernel_rows.start
                            for v in v_rng:
                                wv = int(wts[cl, uu, v])
                                if wv:
                                    part += wv * window[cl, uu, v]
                    chain_sum += part
                acc.add(slot, rows, chain_sum)
        elif isinstance(ph, WriteOut):
            acc = accs.pop((ph.round, ph.tile), None)
            if acc is None:
                raise FunctionalError(f"write of round {ph.round} tile {ph.tile} with no data")
            f0, f1 = ph.filters.start, ph.filters.stop
            out[f0:f1, ph.out_rows.start:ph.out_rows.stop,
                ph.out_cols.start:ph.out_cols.stop] = acc.stored
    if accs:
        raise FunctionalError("accumulators left undrained")
    return _finish(layer, out, config.psum_bits)


class _PieceTable:
    """Per (round, step, filter): one ``(channels, kernel rows, kernel cols)`` entry per group.

    Chunks sharing a group are summed by the group's row accumulation before
    the inter-group merge.  Built lazily, since FC rounds hold many chunks.
    """

    def __init__(self, plan: MappingPlan):
        self.plan = plan
        self.by_filter: dict[int, dict[int, list]] = {}
        self.cache: dict[tuple[int, int, int], list] = {}

    def get(self, rnd, si: int, f: int) -> list:
        key = (rnd.index, si, f)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        chunks = self.by_filter.get(rnd.index)
        if chunks is None:
            chunks = self.by_filter[rnd.index] = {}
            for ch in rnd.chunks:
                chunks.setdefault(ch.filter_index, []).append(ch)
        st = self.plan.steps[si]
        if self.plan.strategy == "column":
            by_group: dict = {}
            for ch in chunks[f]:
                local = [c - st.channels.start for c in ch.channels if c in st.channels]
                if local:
                    by_group.setdefault(ch.group, []).extend(local)
            # bottom group first, forwarding upwards
            entry = [(tuple(by_group[g]), range(1), range(1))
                     for g in sorted(by_group, reverse=True)]
        else:
            block = st.kernel_rows.start // self.plan.config.group_rows
            entry = [((0,), ch.rows, ch.cols) for ch in chunks[f] if ch.row_pass == block]
        self.cache[key] = entry
        return entry


def _window(layer: LayerSpec, buffer: dict, step, ph: Compute, cols: range) -> np.ndarray:
    """Per (channel, kernel row, kernel col): the inputs each output pixel sees.

    Shape (channels, kernel rows, kernel width, out rows, out cols); padding
    reads as zero and any in-image row missing from the buffer is an error.
    """
    s, p, kw = layer.stride, layer.padding, layer.kernel_width
    n_i, n_j = len(ph.out_rows), len(ph.out_cols)
    chans, krows = step.channels, step.kernel_rows
    win = np.zeros((len(chans), len(krows), kw, n_i, n_j), dtype=np.int64)
    xs = np.arange(n_j) * s + ph.out_cols.start * s - p
    for ci, c in enumerate(chans):
        for ui, u in enumerate(krows):
            for ii, i in enumerate(ph.out_rows):
                y = i * s + u - p
                if not 0 <= y < layer.in_height:
                    continue
                entry = buffer.get((c, y))
                if entry is None:
                    raise FunctionalError(f"input row ({c},{y}) not in the buffer")
                bcols, data = entry
                if bcols != cols:
                    raise FunctionalError("buffered columns do not match the tile")
                for v in range(kw):
                    xx = xs + v
                    ok = (xx >= 0) & (xx < layer.in_width)
                    if ok.any():
                        win[ci, ui, v, ii, ok] = data[xx[ok] - bcols.start]
    return win
