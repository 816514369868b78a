"""Fast multi-organ 3-D segmentation from hierarchical sparse descriptors."""

from .model import ModelConfig, ResidualTransformer, load_checkpoint, save_checkpoint
from .phantom import PhantomConfig, generate_phantom
from .sampler import (
    DescriptorLayout,
    OffsetTable,
    build_offset_table,
    default_layout,
    sample_descriptor,
)
from .trainer import TrainConfig, train
from .inference import dice_whole_volume, segment_volume
from .volume import LabelVolume, Volume, normalize_intensity

__all__ = [
    "DescriptorLayout",
    "LabelVolume",
    "ModelConfig",
    "OffsetTable",
    "PhantomConfig",
    "ResidualTransformer",
    "TrainConfig",
    "Volume",
    "build_offset_table",
    "default_layout",
    "dice_whole_volume",
    "generate_phantom",
    "load_checkpoint",
    "normalize_intensity",
    "sample_descriptor",
    "save_checkpoint",
    "segment_volume",
    "train",
]
