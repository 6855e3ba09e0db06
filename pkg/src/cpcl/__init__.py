"""Cyclic prototype consistency learning for semi-supervised volumetric segmentation."""
from .errors import CPCLError
from .proto import PrototypeSet, hard_mask, masked_average_pool, proto_predict
from .segnet import ModelState, SegNet, UNetConfig, init_weights, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, detach, no_grad
from .trainer import TrainConfig, rampup_weight, run_training, train_step

__version__ = "0.1.0"
