"""Sequential importance sampling / resampling engine.

One forward pass propagates N particles through the proposal, accumulates
incremental importance weights in log space, resamples (multinomial by
default, systematic optionally; always, or when ESS drops below a threshold),
and records everything needed afterwards: normalized filtering weights,
ancestor indices, per-step log normalizers (for the marginal-likelihood
estimate), ESS traces, and filtering posterior means.

Resampling permutes both the particle states and the proposal's recurrent
state through the same ancestor indices, so a recurrent proposal's
conditioning always reflects the particle's own ancestral history.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import StateSpaceModel
from .nnet import logsumexp
from .prng import RngStream
from .proposals import PriorProposal, ProposalModel

__all__ = [
    "SmcConfig",
    "SmcResult",
    "DegenerateWeightsError",
    "run_smc",
    "run_bootstrap",
    "ess",
    "multinomial_resample",
    "systematic_resample",
]


class DegenerateWeightsError(RuntimeError):
    """Raised when every particle has zero likelihood at some timestep."""

    def __init__(self, t: int):
        super().__init__(f"all importance weights degenerate at t={t}")
        self.t = t


@dataclass
class SmcConfig:
    n_particles: int
    resample_scheme: str = "multinomial"  # or "systematic"
    ess_threshold: float | None = None  # None = resample every step
    record_filtering_stats: bool = True

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.resample_scheme not in ("multinomial", "systematic"):
            raise ValueError(f"unknown resample scheme {self.resample_scheme!r}")
        if self.ess_threshold is not None and not (0 < self.ess_threshold <= 1):
            raise ValueError("ess_threshold must lie in (0, 1]")


def ess(norm_w: np.ndarray) -> float:
    """Effective sample size 1 / sum(w^2); in [1, N] for normalized w."""
    return float(1.0 / np.sum(np.asarray(norm_w) ** 2))


def multinomial_resample(norm_w: np.ndarray, rng: RngStream) -> np.ndarray:
    n = norm_w.shape[0]
    cum = np.cumsum(norm_w)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, rng.uniforms(n), side="right"), n - 1)


def systematic_resample(norm_w: np.ndarray, rng: RngStream) -> np.ndarray:
    n = norm_w.shape[0]
    cum = np.cumsum(norm_w)
    cum[-1] = 1.0
    pos = (np.arange(n) + rng.uniform01()) / n
    return np.minimum(np.searchsorted(cum, pos, side="right"), n - 1)


@dataclass
class SmcResult:
    """Per-step record of one filtering pass."""

    states: list = field(default_factory=list)  # t -> (N, D_z)
    norm_w: list = field(default_factory=list)  # t -> (N,)
    ancestors: list = field(default_factory=list)  # t -> (N,) or None (no resample)
    log_incr: list = field(default_factory=list)  # t -> float
    ess_trace: list = field(default_factory=list)  # t -> float
    filtering_means: list = field(default_factory=list)  # t -> (D_z,) if recorded

    @property
    def n_steps(self) -> int:
        return len(self.states)

    def log_marginal_likelihood(self) -> float:
        """Sum of per-step log-average incremental weights."""
        return float(np.sum(self.log_incr))

    def mean_ess(self) -> float:
        return float(np.mean(self.ess_trace))

    def trajectory(self, n: int) -> np.ndarray:
        """Reconstruct z_{1:T} for final-time particle n through the ancestry."""
        T = self.n_steps
        path = np.zeros((T, self.states[0].shape[1]))
        idx = n
        for t in range(T - 1, -1, -1):
            path[t] = self.states[t][idx]
            if t > 0 and self.ancestors[t] is not None:
                idx = int(self.ancestors[t][idx])
        return path

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            dim = self.states[0].shape[1]
            header = ["t", "ess", "log_incremental_normalizer"]
            header += [f"posterior_mean{d}" for d in range(dim)]
            w.writerow(header)
            for t in range(self.n_steps):
                mean = (
                    self.filtering_means[t]
                    if self.filtering_means
                    else np.full(dim, np.nan)
                )
                w.writerow(
                    [t + 1, repr(float(self.ess_trace[t])), repr(float(self.log_incr[t]))]
                    + [repr(float(v)) for v in mean]
                )


def run_smc(
    model: StateSpaceModel,
    proposal: ProposalModel,
    x: np.ndarray,
    config: SmcConfig,
    rng: RngStream,
    step_hook=None,
) -> SmcResult:
    """One filtering pass over an observation sequence x of shape (T, D_x).

    Draw streams are derived per consumer and timestep from ``rng``, so the
    proposal, the resampler, and anything downstream never share a stream.
    ``step_hook(t, result)``, if given, runs after each completed step (used
    by the online adaptation mode to update the proposal mid-sequence).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    T = x.shape[0]
    N = config.n_particles
    proposal.begin_sequence(N, T)
    result = SmcResult()
    log_norm_w = np.full(N, -np.log(N))
    z_prev = None
    resampler = (
        multinomial_resample
        if config.resample_scheme == "multinomial"
        else systematic_resample
    )

    for t in range(1, T + 1):
        a = None
        if t > 1:
            norm_w = np.exp(log_norm_w)
            trigger = (
                True
                if config.ess_threshold is None
                else ess(norm_w) < config.ess_threshold * N
            )
            if trigger and N > 1:
                a = resampler(norm_w, rng.split("resample", t))
                z_prev = z_prev[a]
                proposal.permute_states(a)
                log_norm_w = np.full(N, -np.log(N))
        result.ancestors.append(a)

        proposal.condition(model, x[t - 1], z_prev, t)
        z = proposal.sample(rng.split("proposal", t))
        log_q = proposal.score(z)
        if t == 1:
            log_p = model.log_init(z)
        else:
            log_p = model.log_trans(z, z_prev, t)
        log_alpha = log_p + model.log_obs(x[t - 1], z, t) - log_q
        log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
        if np.all(np.isinf(log_alpha) & (log_alpha < 0)):
            raise DegenerateWeightsError(t)

        lw = log_norm_w + log_alpha
        log_z_t = logsumexp(lw)
        log_norm_w = lw - log_z_t
        norm_w = np.exp(log_norm_w)

        result.states.append(z)
        result.norm_w.append(norm_w)
        result.log_incr.append(float(log_z_t))
        result.ess_trace.append(ess(norm_w))
        if config.record_filtering_stats:
            result.filtering_means.append(norm_w @ z)
        z_prev = z
        if step_hook is not None:
            step_hook(t, result)

    return result


def run_bootstrap(
    model: StateSpaceModel, x: np.ndarray, config: SmcConfig, rng: RngStream
) -> SmcResult:
    """Bootstrap filter: SMC with the model's own prior as proposal."""
    return run_smc(model, PriorProposal(), x, config, rng)
