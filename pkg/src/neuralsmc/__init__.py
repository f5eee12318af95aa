"""Particle filtering with trainable neural proposal distributions.

Library layout:

* :mod:`neuralsmc.prng`: deterministic counter-based random streams
* :mod:`neuralsmc.params` / :mod:`neuralsmc.nnet`: flat parameters, manual
  reverse-mode layers (dense, LSTM, mixture-density head), Adam
* :mod:`neuralsmc.models`: state-space models and dataset handling
* :mod:`neuralsmc.proposals`: prior / feed-forward / recurrent proposals
* :mod:`neuralsmc.smc`: the SIS/SIR engine
* :mod:`neuralsmc.adapt`: inclusive-KL proposal adaptation and model learning
* :mod:`neuralsmc.pmmh`: particle marginal Metropolis-Hastings
* :mod:`neuralsmc.metrics`: RMSE/ESS/LML summaries and the Kalman oracle
* :mod:`neuralsmc.cli`: experiment runner (``neuralsmc`` console command)
"""

from .adapt import AdaptConfig, run_adaptation
from .metrics import kalman_filter, rmse, summarize
from .models import BenchmarkNssm, Dataset, LinearGaussianSsm, simulate
from .params import Adam, ParamVector
from .pmmh import PmmhConfig, run_pmmh
from .prng import RngStream, stream_for
from .proposals import ProposalVariant, make_proposal
from .smc import SmcConfig, ess, run_bootstrap, run_smc

__all__ = [
    "AdaptConfig",
    "Adam",
    "BenchmarkNssm",
    "Dataset",
    "LinearGaussianSsm",
    "ParamVector",
    "PmmhConfig",
    "ProposalVariant",
    "RngStream",
    "SmcConfig",
    "ess",
    "kalman_filter",
    "make_proposal",
    "rmse",
    "run_adaptation",
    "run_bootstrap",
    "run_pmmh",
    "run_smc",
    "simulate",
    "stream_for",
    "summarize",
]

__version__ = "0.1.0"
