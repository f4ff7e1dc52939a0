"""Performance model and functional simulator for the Lupulus CNN accelerator."""

from .config import (ConfigError, HwConfig, LayerSpec, NetworkSpec, load_hw, load_network,
                     peak_gops, peak_ops_per_cycle, total_on_chip_memory, validate)
from .functional import Tensor, reference_conv, simulate_functional
from .mapper import MappingError, MappingPlan, map_conv_layer, map_layer, map_pointwise_or_fc
from .scheduler import Schedule, build_schedule, emit_fetch_program
from .timing import (MemoryInterfaceModel, TimingReport, aggregate_network, simulate_timing,
                     utilization_profile)

__all__ = [
    "ConfigError", "HwConfig", "LayerSpec", "NetworkSpec", "load_hw", "load_network",
    "peak_gops", "peak_ops_per_cycle", "total_on_chip_memory", "validate",
    "MappingError", "MappingPlan", "map_conv_layer", "map_layer", "map_pointwise_or_fc",
    "Schedule", "build_schedule", "emit_fetch_program",
    "Tensor", "reference_conv", "simulate_functional",
    "MemoryInterfaceModel", "TimingReport", "aggregate_network", "simulate_timing",
    "utilization_profile",
]
