"""Preconditioned stochastic gradient Langevin dynamics for Bayesian feedforward networks."""
from .kernels import BACKEND as KERNEL_BACKEND
from .params import BlockLayout, ParamVector, axpy, block_view, load_checkpoint, save_checkpoint
from .net import Architecture, Network, PredictiveOutput
from .priors import GaussianPrior, NormalInverseGammaPrior, make_prior
from .precond import make_preconditioner
from .sgld import Chain, ConstantHalving, Polynomial, SamplerConfig, run_chain, sgld_step
from .evaluate import EnsembleAccumulator, EnsembleModel, MetricsReport, ensemble_predict, evaluate

__version__ = "0.1.0"
