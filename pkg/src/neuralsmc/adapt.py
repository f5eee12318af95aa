"""Proposal adaptation (and optional model learning) from SMC runs.

The objective driving adaptation is the inclusive KL divergence from the
posterior to the proposal.  Its ascent direction is estimated from a
filtering pass using the per-timestep weighted particles:

    d_phi   = sum_t sum_n w[t,n] * d log q(z_t^n | ancestral history) / d phi

with the filtering weights treated as constants (no gradient flows through
the weights or through resampling).  The analogous weighted sum over the
model's joint transition/observation log-density gives an approximate
maximum-likelihood gradient for the model parameters.

``run_adaptation`` wraps this in a stochastic-gradient loop: per iteration a
minibatch of sequences (freshly simulated, or drawn from a dataset) is
filtered, gradients are accumulated, normalized by total sequence length,
norm-clipped, and applied with Adam (ascent).  Online mode instead updates
the proposal after every timestep using that step's truncated gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import Dataset, StateSpaceModel, simulate
from .params import Adam
from .prng import RngStream, stream_for
from .proposals import ProposalModel
from .smc import SmcConfig, SmcResult, run_smc

__all__ = [
    "AdaptConfig",
    "accumulate_phi_grad",
    "accumulate_theta_grad",
    "run_adaptation",
    "write_diagnostics_csv",
]

GRAD_CLIP = 10.0  # global norm clip; keeps LSTM updates stable
THETA_FLOOR = 1e-6  # model noise stds stay positive under learning


@dataclass
class AdaptConfig:
    iterations: int
    n_particles: int = 100
    minibatch_size: int = 1
    mode: str = "batch"  # or "online"
    train_source: str = "generative"  # or "dataset"
    seq_len: int = 1000  # generative-mode sequence length
    learn_theta: bool = False
    lr: float = 1e-2  # adaptation needs a hotter rate than the Adam default
    theta_lr: float = 1e-2
    resample_scheme: str = "multinomial"
    ess_threshold: float | None = None
    seed: int = 42

    def __post_init__(self):
        if self.minibatch_size < 1 or self.n_particles < 1:
            raise ValueError("minibatch_size and n_particles must be >= 1")
        if self.mode not in ("batch", "online"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.train_source not in ("generative", "dataset"):
            raise ValueError(f"unknown train_source {self.train_source!r}")

    def smc_config(self) -> SmcConfig:
        return SmcConfig(
            n_particles=self.n_particles,
            resample_scheme=self.resample_scheme,
            ess_threshold=self.ess_threshold,
        )


def accumulate_phi_grad(result: SmcResult, proposal: ProposalModel) -> None:
    """Add the weighted score-function gradient of one run into phi.grad."""
    proposal.backward(result.norm_w, result.ancestors)


def accumulate_theta_grad(
    result: SmcResult, model: StateSpaceModel, x: np.ndarray
) -> None:
    """Add the weighted model-gradient of one run into model.theta.grad."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    total = np.zeros(model.theta.size)
    for t in range(result.n_steps):
        z = result.states[t]
        w = result.norm_w[t]
        if t == 0:
            g = model.grad_theta_log_init(z)
        else:
            z_prev = result.states[t - 1]
            if result.ancestors[t] is not None:
                z_prev = z_prev[result.ancestors[t]]
            g = model.grad_theta_log_trans(z, z_prev, t + 1)
        g = g + model.grad_theta_log_obs(x[t], z, t + 1)
        total += w @ g
    model.theta.grad += total


@dataclass
class IterationDiagnostics:
    iteration: int
    mean_ess: float
    lml: float
    grad_norm_phi: float
    grad_norm_theta: float = 0.0
    lml_approximate: bool = False  # online updates make the LML estimate stale


def write_diagnostics_csv(path, diagnostics) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "mean_ess", "lml", "grad_norm_phi", "grad_norm_theta"])
        for d in diagnostics:
            w.writerow(
                [d.iteration, repr(d.mean_ess), repr(d.lml),
                 repr(d.grad_norm_phi), repr(d.grad_norm_theta)]
            )


def _minibatch(cfg: AdaptConfig, model, data: Dataset | None, iteration: int):
    if cfg.train_source == "generative":
        for j in range(cfg.minibatch_size):
            rng = stream_for(cfg.seed, "adapt", "sim", iteration, j)
            _, x = simulate(model, cfg.seq_len, rng)
            yield x
    else:
        if data is None or len(data) == 0:
            raise ValueError("train_source='dataset' requires a non-empty dataset")
        for j in range(cfg.minibatch_size):
            x, _ = data[(iteration * cfg.minibatch_size + j) % len(data)]
            yield x


def run_adaptation(
    cfg: AdaptConfig,
    model: StateSpaceModel,
    proposal: ProposalModel,
    data: Dataset | None = None,
    optimizer: Adam | None = None,
) -> list[IterationDiagnostics]:
    """Adapt the proposal (and optionally the model) in place.

    Passing an existing ``optimizer`` keeps Adam moments across calls, which
    the PMMH re-adaptation path relies on.
    """
    opt = optimizer or Adam(proposal.phi, lr=cfg.lr)
    theta_opt = Adam(model.theta, lr=cfg.theta_lr) if cfg.learn_theta else None
    smc_cfg = cfg.smc_config()
    diagnostics = []

    for it in range(cfg.iterations):
        ess_values, lml_values = [], []
        total_len = 0
        grad_norm_phi = 0.0
        for j, x in enumerate(_minibatch(cfg, model, data, it)):
            rng = stream_for(cfg.seed, "adapt", "smc", it, j)
            if cfg.mode == "online":
                hook = _OnlineHook(proposal, opt)
                result = run_smc(model, proposal, x, smc_cfg, rng, step_hook=hook)
                grad_norm_phi = hook.last_norm
            else:
                result = run_smc(model, proposal, x, smc_cfg, rng)
                accumulate_phi_grad(result, proposal)
            if cfg.learn_theta:
                accumulate_theta_grad(result, model, x)
            ess_values.append(result.mean_ess())
            lml_values.append(result.log_marginal_likelihood())
            total_len += result.n_steps

        if cfg.mode == "batch":
            if proposal.phi.size:
                proposal.phi.grad /= total_len
                grad_norm_phi = proposal.phi.clip_grad_norm(GRAD_CLIP)
                proposal.phi.grad *= -1.0  # ascent via a minimizing optimizer
                opt.step()
        grad_norm_theta = 0.0
        if cfg.learn_theta:
            model.theta.grad /= total_len
            grad_norm_theta = model.theta.clip_grad_norm(GRAD_CLIP)
            model.theta.grad *= -1.0
            theta_opt.step()
            np.maximum(model.theta.values, THETA_FLOOR, out=model.theta.values)

        diagnostics.append(
            IterationDiagnostics(
                iteration=it,
                mean_ess=float(np.mean(ess_values)),
                lml=float(np.mean(lml_values)),
                grad_norm_phi=grad_norm_phi,
                grad_norm_theta=grad_norm_theta,
                lml_approximate=cfg.mode == "online",
            )
        )
    return diagnostics


class _OnlineHook:
    """Per-timestep proposal update used by online mode."""

    def __init__(self, proposal: ProposalModel, opt: Adam):
        self.proposal = proposal
        self.opt = opt
        self.last_norm = 0.0

    def __call__(self, t: int, result: SmcResult) -> None:
        if not self.proposal.phi.size:
            return
        self.proposal.backward_step(t - 1, result.norm_w[t - 1])
        self.last_norm = self.proposal.phi.clip_grad_norm(GRAD_CLIP)
        self.proposal.phi.grad *= -1.0
        self.opt.step()
