"""Simulator of a compression-capable SSD under a log-structured host file layer."""

from .device import DataDesc, Device, DeviceConfig, IoCommand, Mode, Origin
from .harness import ExperimentConfig, RunReport, compare, compute_waf, replay, run
from .hostfs import CompressionRoute, HostFs, HostFsConfig
from .osa import Decision, OsaInputs, OsaParams, arbitrate
from .scheduler import PolicyConfig, Scheme, route_compression, route_decompression
from .thermal import ThermalParams, calibrate
from .workload import ProfileSpec, SyntheticSpec, generate, load_profile

__version__ = "0.1.0"
