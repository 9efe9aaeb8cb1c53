"""Dual-pathway dilated 3D CNN segmentation with Monte-Carlo dropout uncertainty."""
from .bayes import InferenceConfig, UncertaintyOutput, mc_segment, segment, uncertainty_summary
from .config import RunConfig
from .io import Checkpoint, LabelMap, Volume, load_checkpoint, read_volume, save_checkpoint, write_volume
from .metrics import MetricReport, assd, dice, extract_surface, report
from .network import Network, NetworkSpec, PathwaySpec, receptive_field, thin_spec
from .phantom import PhantomSpec, generate, phantom_set
from .sampler import AugmentParams, BalancedSampler, PatchBatch, augment, reassemble, sample_balanced, tile_for_inference
from .train import Dataset, ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AugmentParams", "BalancedSampler", "Checkpoint", "Dataset", "InferenceConfig", "LabelMap",
    "MetricReport", "Network", "NetworkSpec", "PatchBatch", "PathwaySpec", "PhantomSpec", "RunConfig",
    "UncertaintyOutput", "Volume", "ablate", "assd", "augment", "dice", "evaluate", "extract_surface",
    "generate", "load_checkpoint", "mc_segment", "phantom_set", "read_volume", "reassemble",
    "receptive_field", "report", "sample_balanced", "save_checkpoint", "segment", "thin_spec",
    "tile_for_inference", "train", "uncertainty_summary", "write_volume",
]
