"""Local-to-Global window-attention vision transformer on a small numpy autodiff core."""
from . import analysis, attention, block, model, nn, tensor, train
from .analysis import SymbolicCost, attention_cost, complexity, count_flops, count_params, linearity_check, overhead_ratio
from .attention import build_shift_mask, global_attention_reference, w_msa
from .block import LGBlockParams, lg_block_forward, swin_block_forward
from .errors import (
    AxisError,
    BroadcastError,
    ConfigError,
    ContractError,
    DivergenceError,
    LGError,
    NonFiniteError,
    PartitionError,
    ShapeError,
    TapeError,
)
from .model import ModelConfig, ablation, forward, init_params, load_checkpoint, preset, save_checkpoint
from .tensor import Tape, Tensor, precision
from .train import SyntheticDataset, TrainConfig, grad_check

__version__ = "0.1.0"
