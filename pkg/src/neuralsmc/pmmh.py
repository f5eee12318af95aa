"""Particle Marginal Metropolis-Hastings over model noise parameters.

A Gaussian random walk proposes new parameters; an SMC pass under the
proposed parameters supplies an unbiased marginal-likelihood estimate that
enters the accept/reject ratio (pseudo-marginal MCMC).  The same machinery
runs with the exact Kalman likelihood substituted for SMC, which turns the
chain into plain MH and serves as the validation oracle.

Priors are inverse-gamma on the noise *variances*; since the walk moves the
stds, the log-prior includes the variance-to-std Jacobian.  Proposals with
any non-positive component are rejected outright (zero prior mass).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .adapt import AdaptConfig, run_adaptation
from .metrics import kalman_filter
from .models import Dataset
from .params import Adam
from .prng import stream_for
from .proposals import PriorProposal, ProposalModel
from .smc import DegenerateWeightsError, SmcConfig, run_smc

log = logging.getLogger(__name__)

__all__ = ["PmmhConfig", "PmmhChainState", "pmmh_step", "run_pmmh", "save_trace_csv"]


@dataclass
class PmmhConfig:
    iterations: int = 500
    n_particles: int = 100
    rw_scale: tuple = (0.15, 0.08)
    prior_a: float = 0.01  # inverse-gamma shape, on variances
    prior_b: float = 0.01  # inverse-gamma rate
    theta_init: tuple = (10.0, 10.0)
    readapt_every: int = 0  # 0 = never retrain the proposal as theta moves
    readapt_iters: int = 1
    readapt_particles: int | None = None  # defaults to n_particles
    seed: int = 42

    def __post_init__(self):
        if any(s < 0 for s in self.rw_scale):
            raise ValueError("rw_scale entries must be >= 0")
        if self.prior_a <= 0 or self.prior_b <= 0:
            raise ValueError("inverse-gamma prior parameters must be positive")


def log_prior_stds(theta: np.ndarray, a: float, b: float) -> float:
    """Inverse-gamma(a, b) on each variance theta_i^2, expressed over stds."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        return -np.inf
    var = theta**2
    lp = a * np.log(b) - gammaln(a) - (a + 1) * np.log(var) - b / var
    return float(np.sum(lp + np.log(2 * theta)))  # + Jacobian d(var)/d(std)


@dataclass
class PmmhChainState:
    theta: np.ndarray
    log_prior: float
    lml_hat: float
    accept_count: int = 0
    trace: list = field(default_factory=list)  # (theta, lml_hat, accepted)


def pmmh_step(state: PmmhChainState, cfg: PmmhConfig, lml_fn, rng) -> PmmhChainState:
    """One MH step; ``lml_fn(theta, rng)`` returns the (estimated) LML."""
    d = state.theta.shape[0]
    scale = np.asarray(cfg.rw_scale, dtype=float)
    if np.all(scale == 0):
        # degenerate walk: stay put and retain the current estimate
        state.trace.append((state.theta.copy(), state.lml_hat, True))
        state.accept_count += 1
        return state
    theta_star = state.theta + scale * rng.split("walk").normals(d)
    accepted = False
    if np.all(theta_star > 0):
        try:
            lml_star = lml_fn(theta_star, rng.split("lml"))
        except DegenerateWeightsError as e:
            log.warning("degenerate SMC weights at t=%d for theta*=%s; rejecting",
                        e.t, theta_star)
            lml_star = None
        if lml_star is not None:
            lp_star = log_prior_stds(theta_star, cfg.prior_a, cfg.prior_b)
            log_ratio = lml_star + lp_star - state.lml_hat - state.log_prior
            if np.log(rng.split("accept").uniform01()) < log_ratio:
                state.theta = theta_star
                state.log_prior = lp_star
                state.lml_hat = lml_star
                accepted = True
    if accepted:
        state.accept_count += 1
    state.trace.append((state.theta.copy(), state.lml_hat, accepted))
    return state


def run_pmmh(
    cfg: PmmhConfig,
    model_factory,
    x: np.ndarray,
    proposal: ProposalModel | None = None,
    exact: bool = False,
) -> tuple[PmmhChainState, dict]:
    """Run the chain on one observation sequence.

    ``model_factory(theta)`` builds the model for a parameter vector.  With
    ``exact=True`` the Kalman filter replaces SMC (linear-Gaussian models
    only).  A trainable ``proposal`` is re-adapted at the current parameters
    every ``readapt_every`` iterations.
    """
    prop = proposal if proposal is not None else PriorProposal()
    smc_cfg = SmcConfig(n_particles=cfg.n_particles)
    opt = Adam(prop.phi, lr=1e-2) if prop.phi.size else None

    def lml_fn(theta, rng):
        model = model_factory(theta)
        if exact:
            return kalman_filter(model, x).log_marginal_likelihood
        return run_smc(model, prop, x, smc_cfg, rng).log_marginal_likelihood()

    theta0 = np.asarray(cfg.theta_init, dtype=float)
    rng0 = stream_for(cfg.seed, "pmmh", "init")
    state = PmmhChainState(
        theta=theta0,
        log_prior=log_prior_stds(theta0, cfg.prior_a, cfg.prior_b),
        lml_hat=lml_fn(theta0, rng0),
    )
    data = Dataset()
    data.add(x)
    for i in range(cfg.iterations):
        if cfg.readapt_every > 0 and opt is not None and i % cfg.readapt_every == 0:
            adapt_cfg = AdaptConfig(
                iterations=cfg.readapt_iters,
                n_particles=cfg.readapt_particles or cfg.n_particles,
                train_source="dataset",
                seed=stream_for(cfg.seed, "pmmh", "readapt", i).stream_id,
            )
            run_adaptation(adapt_cfg, model_factory(state.theta), prop, data,
                           optimizer=opt)
        state = pmmh_step(state, cfg, lml_fn, stream_for(cfg.seed, "pmmh", "step", i))

    thetas = np.array([t for t, _, _ in state.trace])
    half = thetas[len(thetas) // 2 :]
    summary = {"acceptance_rate": state.accept_count / max(len(state.trace), 1)}
    for j in range(thetas.shape[1]):
        for q in (0.05, 0.5, 0.95):
            summary[f"theta{j}_q{int(q * 100):02d}"] = float(np.quantile(half[:, j], q))
    return state, summary


def save_trace_csv(path, state: PmmhChainState,
                   param_names=("sigma_v", "sigma_w")) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", *param_names, "lml_hat", "accepted"])
        for i, (theta, lml, acc) in enumerate(state.trace):
            w.writerow([i, *[repr(float(v)) for v in theta], repr(float(lml)),
                        int(acc)])
