"""Dynamic-capacity mixture-of-experts on a toy multi-channel decoder."""

from .moe_layer import ExpertPool, aux_load_balance_loss, select_top_k, select_top_p
from .model import Batch, MoEConfig, ModelConfig, TransformerModel
from .numcore import NumericError, Rng, Tensor, grad_check

__version__ = "0.1.0"
