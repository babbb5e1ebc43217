"""Self-purifying conditional flow matching on synthetic 2-D data."""

from ._kernels import BACKEND
from .data import Dataset, GeneratorParams, corrupt_labels, gen_spiral, gen_two_circles, polar_to_euclidean
from .flow import GateRecord, GateRecords, TrainingConfig, spfm_gate, train_run, train_step
from .net import ModelParameters, NetInput, forward, init_params, loss_and_grad, optimizer_step
from .sampler import SamplerConfig, guided_velocity, sample, sample_batch

__version__ = "0.1.0"
