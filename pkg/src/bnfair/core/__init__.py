from .rng import RngStream, splitmix64
from .tensor import (NonFiniteError, ShapeError, Tape, Tensor, add, backward,
                     matmul, mean, mul, relu, sub, tsum)
from .optim import LrSchedule, OptimizerState, lr_at, sgd_step
from .gradcheck import check_gradients, relative_error
