"""Hardware and workload parameters, plus closed-form accounting.

Config files are YAML with nested sections; unknown keys are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid hardware or network description.

    ``key`` names the offending field when there is one.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class HwConfig:
    grid_rows: int = 15
    grid_cols: int = 12
    group_rows: int = 3
    group_cols: int = 3
    pe_spm_bytes: int = 32
    input_buffer_bytes: int = 256
    accumulator_bytes: int = 2048
    double_buffer_inputs: bool = True
    double_buffer_spm: bool = True
    core_clock_hz: float = 1e9
    mem_if_width_bits: int = 32
    mem_if_clock_hz: float = 250e6
    input_bits: int = 8
    weight_bits: int = 8
    psum_bits: int = 16
    # calibrated against the AlexNet / VGG-16 totals, see scripts/calibrate.py
    pipeline_depth: int = 8
    mem_overhead_cycles: int = 0
    # the accumulator store is split into banks: one collects the current
    # output tile while the others wait to be drained
    accumulator_banks: int = 2

    @property
    def num_pes(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def group_grid(self) -> tuple[int, int]:
        return self.grid_rows // self.group_rows, self.grid_cols // self.group_cols

    @property
    def num_groups(self) -> int:
        gr, gc = self.group_grid
        return gr * gc

    @property
    def input_bytes(self) -> int:
        return self.input_bits // 8

    @property
    def weight_bytes(self) -> int:
        return self.weight_bits // 8

    @property
    def psum_bytes(self) -> int:
        return self.psum_bits // 8

    @property
    def mem_bandwidth(self) -> float:
        """External memory bandwidth in bytes/s."""
        return self.mem_if_width_bits / 8 * self.mem_if_clock_hz


_POSITIVE_INTS = (
    "grid_rows", "grid_cols", "group_rows", "group_cols",
    "pe_spm_bytes", "input_buffer_bytes", "accumulator_bytes",
    "mem_if_width_bits", "input_bits", "weight_bits", "psum_bits",
    "accumulator_banks",
)


def validate(config: HwConfig) -> HwConfig:
    """Return ``config`` unchanged if every invariant holds, else raise ConfigError."""
    for name in _POSITIVE_INTS:
        value = getattr(config, name)
        if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}", name)
    for name in ("core_clock_hz", "mem_if_clock_hz"):
        value = getattr(config, name)
        if not isinstance(value, (int, float)) or not value > 0:
            raise ConfigError(f"{name} must be positive, got {value!r}", name)
    for name in ("pipeline_depth", "mem_overhead_cycles"):
        value = getattr(config, name)
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ConfigError(f"{name} must be a non-negative integer, got {value!r}", name)
    for name in ("double_buffer_inputs", "double_buffer_spm"):
        if not isinstance(getattr(config, name), bool):
            raise ConfigError(f"{name} must be a boolean", name)
    if config.grid_rows % config.group_rows:
        raise ConfigError(
            f"grid_rows {config.grid_rows} not divisible by group_rows {config.group_rows}",
            "group_rows",
        )
    if config.grid_cols % config.group_cols:
        raise ConfigError(
            f"grid_cols {config.grid_cols} not divisible by group_cols {config.group_cols}",
            "group_cols",
        )
    for name in ("input_bits", "weight_bits", "psum_bits"):
        if getattr(config, name) % 8:
            raise ConfigError(f"{name} must be a multiple of 8", name)
    return config


def total_on_chip_memory(config: HwConfig) -> int:
    """Bytes of SPM, input buffer and accumulator storage."""
    spm = config.num_pes * config.pe_spm_bytes * (2 if config.double_buffer_spm else 1)
    inbuf = config.grid_rows * config.input_buffer_bytes * (2 if config.double_buffer_inputs else 1)
    return spm + inbuf + config.num_groups * config.accumulator_bytes


def peak_ops_per_cycle(config: HwConfig) -> int:
    # multiply + add per PE, one add per group accumulator
    return 2 * config.num_pes + config.num_groups


def peak_gops(config: HwConfig) -> float:
    return peak_ops_per_cycle(config) * config.core_clock_hz / 1e9


# --------------------------------------------------------------------------- #
#   Workload description
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    in_height: int
    in_width: int
    out_channels: int
    kernel_height: int = 1
    kernel_width: int = 1
    stride: int = 1
    padding: int = 0
    has_bias: bool = False
    apply_relu: bool = False
    name: str = ""
    # operand pattern used by functional runs only: "random" or "identity"
    weight_init: str = "random"

    @property
    def out_height(self) -> int:
        return (self.in_height + 2 * self.padding - self.kernel_height) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.in_width + 2 * self.padding - self.kernel_width) // self.stride + 1

    @property
    def macs(self) -> int:
        return (self.out_channels * self.in_channels * self.kernel_height * self.kernel_width
                * self.out_height * self.out_width)

    @classmethod
    def fc(cls, rows: int, cols: int, **kw) -> "LayerSpec":
        """Fully-connected layer with an ``rows x cols`` weight matrix."""
        return cls("fc", cols, 1, 1, rows, 1, 1, **kw)


def validate_layer(layer: LayerSpec) -> LayerSpec:
    where = f"layer {layer.name!r}: " if layer.name else ""
    if layer.kind not in ("conv", "fc"):
        raise ConfigError(f"{where}kind must be 'conv' or 'fc', got {layer.kind!r}", "kind")
    for name in ("in_channels", "in_height", "in_width", "out_channels",
                 "kernel_height", "kernel_width", "stride"):
        value = getattr(layer, name)
        if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
            raise ConfigError(f"{where}{name} must be a positive integer, got {value!r}", name)
    if isinstance(layer.padding, bool) or not isinstance(layer.padding, int) or layer.padding < 0:
        raise ConfigError(f"{where}padding must be a non-negative integer", "padding")
    if layer.kind == "fc" and (layer.kernel_height, layer.kernel_width, layer.in_height,
                               layer.in_width, layer.stride, layer.padding) != (1, 1, 1, 1, 1, 0):
        raise ConfigError(f"{where}fc layers are 1x1 over a 1x1 input", "kind")
    if layer.out_height < 1 or layer.out_width < 1:
        raise ConfigError(f"{where}kernel larger than padded input", "kernel_height")
    if layer.weight_init not in ("random", "identity"):
        raise ConfigError(f"{where}weight_init must be 'random' or 'identity'", "weight_init")
    if layer.weight_init == "identity" and (
            layer.in_channels != layer.out_channels or layer.kernel_height % 2 == 0
            or layer.kernel_width % 2 == 0):
        raise ConfigError(f"{where}identity weights need c_in == c_out and an odd kernel",
                          "weight_init")
    return layer


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def check_chain(self) -> None:
        """Raise unless each layer consumes the previous layer's output shape."""
        for prev, cur in zip(self.layers, self.layers[1:]):
            shape = (prev.out_channels, prev.out_height, prev.out_width)
            if cur.kind == "fc":
                ok = cur.in_channels == math.prod(shape)
            else:
                ok = (cur.in_channels, cur.in_height, cur.in_width) == shape
            if not ok:
                raise ConfigError(
                    f"layer {cur.name!r} input does not match {prev.name!r} output {shape}")


# --------------------------------------------------------------------------- #
#   File formats
# --------------------------------------------------------------------------- #

# section -> {file key: HwConfig field}
HW_SECTIONS: dict[str, dict[str, str]] = {
    "grid": {"rows": "grid_rows", "cols": "grid_cols"},
    "group": {"rows": "group_rows", "cols": "group_cols"},
    "memory": {
        "pe_spm_bytes": "pe_spm_bytes",
        "input_buffer_bytes": "input_buffer_bytes",
        "accumulator_bytes": "accumulator_bytes",
        "accumulator_banks": "accumulator_banks",
        "double_buffer_inputs": "double_buffer_inputs",
        "double_buffer_spm": "double_buffer_spm",
    },
    "clocks": {"core_hz": "core_clock_hz"},
    "interface": {
        "width_bits": "mem_if_width_bits",
        "clock_hz": "mem_if_clock_hz",
        "overhead_cycles": "mem_overhead_cycles",
    },
    "precision": {"input_bits": "input_bits", "weight_bits": "weight_bits",
                  "psum_bits": "psum_bits"},
    "pipeline": {"depth": "pipeline_depth"},
}

_HW_FIELDS = {f.name: f for f in fields(HwConfig)}
_LAYER_FIELDS = {f.name for f in fields(LayerSpec)}


def _coerce(name: str, value: Any) -> Any:
    kind = _HW_FIELDS[name].type
    if kind == "bool":
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}", name)
        return value
    if kind == "float":
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {value!r}", name) from None
    if kind == "int":
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                raise ConfigError(f"{name}: expected an integer, got {value!r}", name) from None
        if isinstance(value, float) and value.is_integer():
            return int(value)
    return value


def hw_from_dict(data: dict[str, Any]) -> HwConfig:
    kwargs = {}
    for section, body in (data or {}).items():
        if section not in HW_SECTIONS:
            raise ConfigError(f"unknown section {section!r}", section)
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping", section)
        for key, value in body.items():
            if key not in HW_SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
            name = HW_SECTIONS[section][key]
            kwargs[name] = _coerce(name, value)
    return validate(HwConfig(**kwargs))


def hw_to_dict(config: HwConfig) -> dict[str, dict[str, Any]]:
    return {section: {key: getattr(config, name) for key, name in keys.items()}
            for section, keys in HW_SECTIONS.items()}


def apply_overrides(config: HwConfig, overrides: dict[str, str]) -> HwConfig:
    """Apply ``field=value`` or ``section.key=value`` overrides."""
    changes = {}
    for key, value in overrides.items():
        if "." in key:
            section, sub = key.split(".", 1)
            name = HW_SECTIONS.get(section, {}).get(sub)
        else:
            name = key if key in _HW_FIELDS else None
        if name is None:
            raise ConfigError(f"unknown override key {key!r}", key)
        changes[name] = _coerce(name, value)
    return validate(replace(config, **changes))


def layer_from_dict(data: dict[str, Any]) -> LayerSpec:
    unknown = set(data) - _LAYER_FIELDS - {"kernel", "fc_rows", "fc_cols"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown layer key {key!r}", key)
    data = dict(data)
    if "kernel" in data:
        k = data.pop("kernel")
        data["kernel_height"], data["kernel_width"] = (k, k) if isinstance(k, int) else k
    if isinstance(data.get("padding"), (list, tuple)):
        pads = set(data["padding"])
        if len(pads) != 1:
            raise ConfigError("asymmetric padding is not supported", "padding")
        data["padding"] = pads.pop()
    if data.get("kind") == "fc":
        rows, cols = data.pop("fc_rows", None), data.pop("fc_cols", None)
        if rows is not None:
            data["out_channels"] = rows
        if cols is not None:
            data["in_channels"] = cols
        data.setdefault("in_height", 1)
        data.setdefault("in_width", 1)
    try:
        layer = LayerSpec(**data)
    except TypeError as exc:
        raise ConfigError(f"incomplete layer description: {exc}") from None
    return validate_layer(layer)


def network_from_dict(data: dict[str, Any]) -> NetworkSpec:
    unknown = set(data) - {"name", "layers", "chained"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown network key {key!r}", key)
    layers = tuple(layer_from_dict(entry) for entry in data.get("layers") or [])
    net = NetworkSpec(str(data.get("name", "")), layers)
    if data.get("chained", False):
        net.check_chain()
    return net


def _read_yaml(path: Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML ({exc})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _bundled(kind: str, name: str) -> Path | None:
    candidate = resources.files("lupulus") / "data" / kind / f"{name}.yaml"
    return Path(str(candidate)) if candidate.is_file() else None


def bundled_names(kind: str) -> list[str]:
    root = resources.files("lupulus") / "data" / kind
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_hw(ref: str | Path) -> HwConfig:
    """Load a hardware config from a path or a bundled name (``default``)."""
    path = Path(ref)
    if not path.is_file():
        path = _bundled("hw", str(ref)) or path
    return hw_from_dict(_read_yaml(path))


def load_network(ref: str | Path) -> NetworkSpec:
    """Load a network from a path or a bundled name (``alexnet-conv``, ``vgg16-conv``...)."""
    path = Path(ref)
    if not path.is_file():
        path = _bundled("networks", str(ref)) or path
    return network_from_dict(_read_yaml(path))


def dump_hw(config: HwConfig) -> str:
    return yaml.safe_dump(hw_to_dict(config), sort_keys=False)
