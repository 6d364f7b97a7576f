"""Robustness verification toolkit for PointNet-style point-cloud classifiers."""
from .data import PointCloud, build_dataset, generate_shape
from .perturbation import PerturbationSpec, hybrid_p
from .pointnet import ModelConfig, ModelParams, forward, init, load, predict, save
from .reach import IntervalTensor, Verdict, certify, input_ball, propagate
from .tensor import GradTape, Tensor
from .training import TrainConfig, evaluate, train
from .verifier import SweepReport, export_adversarial_set, tipping_point, verify

__version__ = "0.1.0"
