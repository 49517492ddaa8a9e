"""radiotwin: desk-scale wireless environment twin construction.

Two-stage workflow: sparse position-labeled CSI becomes a dense
probabilistic channel map (distance trends + Matern-ARD Gaussian-process
residuals over geometric features), which then supervises calibration of a
neural surface EM-property field inside a differentiable ray-traced channel
computation.
"""

from .calibration import EmFieldCalibrator, TrainConfig
from .channel import AntennaPattern, OfdmConfig
from .channel_map import BayesianChannelMap, BcmConfig
from .em_field import EmFieldNet, FourierEncoder, MaterialTable, init_net
from .geometry import SceneGeometry, load_scene, load_scene_file
from .tracing import TraceConfig, trace_paths

__all__ = [
    "AntennaPattern",
    "BayesianChannelMap",
    "BcmConfig",
    "EmFieldCalibrator",
    "EmFieldNet",
    "FourierEncoder",
    "MaterialTable",
    "OfdmConfig",
    "SceneGeometry",
    "TraceConfig",
    "TrainConfig",
    "init_net",
    "load_scene",
    "load_scene_file",
    "trace_paths",
]

__version__ = "0.1.0"
