"""The query-conditioned dense temporal detector."""
from .checkpoint import ArchitectureMismatch, CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint
from .decode import decode_dense, decode_step
from .network import (
    BiFPNLayer,
    ConvNeXtBlock,
    DenseOutput,
    FusionNode,
    ModelConfig,
    QueryTransform,
    UniMD,
    build_model,
    default_reg_ranges,
    pyramid_lengths,
)
