from .autograd import (Tensor, add, as_tensor, avgpool2, concat_channels, conv2d, dot,
                       instance_norm, maxpool2, relu, scale, sum_all, upsample_nearest)
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossConfig, l1_loss, mse_loss, pmfn_loss
from .msun import MSUNConfig, init_params, layer_shapes, msun_forward, param_count
from .optim import AdamState, adam_step, epoch_end
from .train import TrainConfig, TrainResult, predict, train
