"""Multidimensional interactive attention (joint channel x spatial gating) on a small numpy autograd."""
from .autograd import Graph, Node, grad_check
from .backbones import build_flow_cnn, build_mini_cnn, build_mini_segnet, model_forward
from .errors import MiaError
from .mia_attention import AttentionMaps, MiaBlock, forward, param_count
from .train import TrainConfig, train_loop

__version__ = "0.1.0"
