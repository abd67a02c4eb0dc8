"""RelNet: entity memory plus pairwise relational memory for bAbI question answering."""
from .autodiff import Tape, Tensor, grad_check
from .babi import Example, TaskData, Vocabulary, load_task, parse_task_file
from .model import HyperParams, forward, init_params
from .train import TrainConfig, evaluate, train_task

__version__ = "0.1.0"
