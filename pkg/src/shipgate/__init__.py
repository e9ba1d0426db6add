"""Two-stage ship detection toolkit: event-driven quantized gate, cascade energy model, evaluation."""

__version__ = "0.1.0"

from .energy import StageCost, cascade_energy, stage_energy
from .estimators import GateClassifier, ImageDownsampler, RLEBoxExtractor
from .event_engine import forward_dense, forward_events, to_events
from .gate import classify_metrics, flagged_fraction, sweep_thresholds
from .netdef import ModelGraph, build_akidanet05, load_model, save_model, synth_weights
from .qtensor import QuantTensor, dequantize, quantize, requantize

__all__ = [
    "GateClassifier", "ImageDownsampler", "ModelGraph", "QuantTensor", "RLEBoxExtractor",
    "StageCost", "build_akidanet05", "cascade_energy", "classify_metrics", "dequantize",
    "flagged_fraction", "forward_dense", "forward_events", "load_model", "quantize",
    "requantize", "save_model", "stage_energy", "sweep_thresholds", "synth_weights", "to_events",
]
