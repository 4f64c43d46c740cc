from ervae.nn.checkpoint import arrays_digest, load_checkpoint, save_checkpoint
from ervae.nn.mlp import MlpParams, init_mlp, mlp_forward, mlp_forward_numpy, xavier_uniform_init
from ervae.nn.optim import AdamState, adam_step, zero_grad
from ervae.nn.tensor import Tensor, as_tensor, atan2, concat, custom_op, linear, matmul, no_grad

__all__ = [
    "AdamState",
    "MlpParams",
    "Tensor",
    "adam_step",
    "arrays_digest",
    "as_tensor",
    "atan2",
    "concat",
    "custom_op",
    "init_mlp",
    "linear",
    "load_checkpoint",
    "matmul",
    "mlp_forward",
    "mlp_forward_numpy",
    "no_grad",
    "save_checkpoint",
    "xavier_uniform_init",
    "zero_grad",
]
