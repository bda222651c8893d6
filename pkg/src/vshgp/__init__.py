"""Scalable heteroscedastic Gaussian process regression with variational sparse approximations."""

from .core import VshgpModel, elbo, elbo_grads, init_model, predict, predict_latent, train_vshgp
from .data import Dataset, Normalizer, gen_sinc2d, gen_toy1d, load_csv, split
from .distributed import DvshgpConfig, DvshgpModel, init_dvshgp, predict_dvshgp, train_dvshgp
from .io import load_model, save_model
from .kernels import KernelParams
from .linalg import NumericalError
from .metrics import msll, smse
from .predictive import log_predictive_density, predict_y
from .stochastic import SvshgpConfig, SvshgpModel, train_svshgp

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DvshgpConfig", "DvshgpModel", "KernelParams", "Normalizer", "NumericalError",
    "SvshgpConfig", "SvshgpModel", "VshgpModel", "elbo", "elbo_grads", "gen_sinc2d", "gen_toy1d",
    "init_dvshgp", "init_model", "load_csv", "load_model", "log_predictive_density", "msll",
    "predict", "predict_dvshgp", "predict_latent", "predict_y", "save_model", "smse", "split",
    "train_dvshgp", "train_svshgp", "train_vshgp",
]
