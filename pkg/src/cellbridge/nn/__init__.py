from . import autodiff
from .autodiff import Tensor, backward, zero_grad, grads_of
from .layers import Dense, MLP, GatHead, dense_forward, gat_layer_forward, time_embedding
from .optim import Adam, AdamState, adam_step, init_adam
from .checkpoint import save_checkpoint, load_checkpoint, restore_parameters
from .gradcheck import grad_check

__all__ = [
    "autodiff",
    "Tensor",
    "backward",
    "zero_grad",
    "grads_of",
    "Dense",
    "MLP",
    "GatHead",
    "dense_forward",
    "gat_layer_forward",
    "time_embedding",
    "Adam",
    "AdamState",
    "adam_step",
    "init_adam",
    "save_checkpoint",
    "load_checkpoint",
    "restore_parameters",
    "grad_check",
]
