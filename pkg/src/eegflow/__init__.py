"""Volume-preserving invertible networks for multichannel time series."""
from .layers import ArchitectureConfig, FlowModel, build_architecture, flow_forward, flow_inverse
from .modelio import load_model, save_model
from .prior import ClassConditionalGaussian
from .signals import SignalDataset, SynthConfig, load_dataset, save_dataset, synth_generate
from .training import TrainConfig, classify, train, train_max_likelihood, train_ot
from .transport import OTConfig, exact_ot, sinkhorn

__all__ = [
    "ArchitectureConfig", "ClassConditionalGaussian", "FlowModel", "OTConfig", "SignalDataset",
    "SynthConfig", "TrainConfig", "build_architecture", "classify", "exact_ot", "flow_forward",
    "flow_inverse", "load_dataset", "load_model", "save_dataset", "save_model", "sinkhorn",
    "synth_generate", "train", "train_max_likelihood", "train_ot",
]
