"""Laser bit-set fault simulation for int8 MLPs stored in Flash."""

from .bsca import BscaConfig, bsca_line, bsca_search, replay_on_simulator
from .extract import extract_msbs, random_probes
from .faultsim import TriggerSet, dual_spot_sweep, fault_mask, sweep
from .flash import FlashImage, Geometry, SpotConfig, bit_line, layout
from .nn import FloatModel, TrainConfig, train
from .quant import QuantizedModel, q_accuracy, q_forward, quantize

__version__ = "0.1.0"
