"""Layer-parallel training of residual networks viewed as discretized ODEs."""
from .costate import AffinePredictor, InfoSet, epsilon_diagnostic, fit, observe, predict
from .data import BatchStream, Dataset, gen_ellipse, gen_swissroll, load_mnist_idx, write_idx
from .dynamics import Controls, ModelSpec, init_controls, zero_controls
from .errors import (ContractError, IDXFormatError, NumericError, PairingError, ProtocolError,
                     RankDeficientError, TimeParError)
from .multilevel import CoarseConfig, coarsen_spec, global_predict, prolong_controls
from .parallel import ParallelTrainer, make_plan, parallel_train
from .trajectory import (LearningRate, assemble_gradient, backward_solve, evaluate, forward_solve,
                         objective, serial_train, sgd_update)

__version__ = "0.1.0"
