"""Spiking encoder-decoder for BEV LiDAR detection, with a synaptic-energy profiler."""

from .bev import BevConfig, BevFrame, PointCloud, build_frame, load_pointcloud, project_point
from .core import ConfigError, DimensionError, RngStream, SpikeTrain, concat_channels
from .energy import EnergyConstants, EnergyReport, build_report, energy_ratio
from .network import NetworkGraph, SpikingUNet, build_canonical, mac_count
from .neuron import LIF, lif_step, surrogate_grad

__version__ = "0.1.0"

__all__ = [
    "BevConfig", "BevFrame", "PointCloud", "build_frame", "load_pointcloud", "project_point",
    "ConfigError", "DimensionError", "RngStream", "SpikeTrain", "concat_channels",
    "EnergyConstants", "EnergyReport", "build_report", "energy_ratio",
    "NetworkGraph", "SpikingUNet", "build_canonical", "mac_count",
    "LIF", "lif_step", "surrogate_grad",
]
