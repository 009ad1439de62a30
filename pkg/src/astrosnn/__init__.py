"""Astrocyte-modulated spiking units with recurrent, parallel and chunked execution."""

from .amsu import (AlifState, AmSuParams, AmSuState, alif_step, decay_mask, forward_chunked,
                   forward_parallel, forward_recurrent, lif_step, rope_apply, step_recurrent)
from .errors import (AstroError, CheckpointError, ConfigError, ContractError, DataError, NumericError,
                     ParameterError, ShapeError, TapeStateError)
from .model import (Model, ModelConfig, build_model, decode, encode, forward_lm, load_checkpoint,
                    save_checkpoint, step_lm, tau_schedule)
from .tensor import GradientTape, Tensor, backward
from .train import OptimConfig, adam_step, clip_gradients, eval_bpc_ppl, lr_at, train_lm

__version__ = "0.1.0"
