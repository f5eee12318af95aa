"""Parametric proposal distributions q(z_t | history, observations).

Three families:

* ``prior`` : the model's own transition density (bootstrap filtering).
* ``nn``    : feed-forward network on [x_t, z_prev, time features].
* ``rnn``   : LSTM whose per-particle state carries the ancestral history.

Each family can emit either a single diagonal Gaussian (K=1) or a K-component
mixture, and can optionally parameterize the process noise instead of the
state itself (``residual_f``): the head's means are then offsets added to the
model's prior dynamics mean.

Per-timestep call order during filtering is ``condition -> sample -> score``.
Every step's forward pass is cached so that ``backward`` can later accumulate
the weighted score-function gradient sum_t sum_n w[t,n] * d log q / d phi.
For the recurrent family this backward pass runs through time along the
ancestral tree: resampling permutes the LSTM states, so the reverse pass
scatter-adds state gradients through the recorded ancestor indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import StateSpaceModel
from .nnet import Dense, LstmCell, LstmState, MdnBatch, MdnHead, Tanh
from .params import ParamVector, load_checkpoint, save_checkpoint
from .prng import RngStream

__all__ = [
    "ProposalVariant",
    "ProposalModel",
    "PriorProposal",
    "MlpProposal",
    "RnnProposal",
    "make_proposal",
    "save_proposal",
    "load_proposal",
]

N_TIME_FEATURES = 3


def time_features(t: int, seq_len: int) -> np.ndarray:
    """Explicit periodic + progress features; the benchmark forcing is cos(1.2 t)."""
    return np.array([np.cos(1.2 * t), np.sin(1.2 * t), t / max(seq_len, 1)])


@dataclass(frozen=True)
class ProposalVariant:
    family: str  # prior | nn | rnn
    n_components: int = 1  # K; 1 = plain diagonal Gaussian head
    residual_f: bool = False  # parameterize process noise, add prior dynamics mean

    def __post_init__(self):
        if self.family not in ("prior", "nn", "rnn"):
            raise ValueError(f"unknown proposal family {self.family!r}")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")

    @property
    def label(self) -> str:
        s = self.family
        if self.family != "prior":
            if self.n_components > 1:
                s += "-md"
            if self.residual_f:
                s += "-f"
        return s

    @classmethod
    def parse(cls, label: str, n_components: int = 3) -> "ProposalVariant":
        """Parse labels like ``prior``, ``nn-md``, ``rnn-md-f``, ``rnn-f``."""
        parts = label.split("-")
        family = parts[0]
        md = "md" in parts[1:]
        res = "f" in parts[1:]
        return cls(family=family, n_components=n_components if md else 1,
                   residual_f=res)


class ProposalModel:
    """Common state machine: per-sequence caches and the condition/score API."""

    variant: ProposalVariant
    phi: ParamVector

    def begin_sequence(self, n_particles: int, seq_len: int) -> None:
        self.n_particles = n_particles
        self.seq_len = seq_len
        self._caches: list = []
        self._params: MdnBatch | None = None
        self._reset_state()

    def _reset_state(self) -> None:
        pass

    def condition(self, model, x_t, z_prev, t) -> MdnBatch:
        raise NotImplementedError

    def sample(self, rng: RngStream) -> np.ndarray:
        if self._params is None:
            raise RuntimeError("sample() before condition()")
        return self._params.sample(rng)

    def score(self, z: np.ndarray) -> np.ndarray:
        """Log proposal density of z under the latest condition() call."""
        if self._params is None:
            raise RuntimeError("score() before condition()")
        logq, ld_cache = self._params.log_density(z)
        self._caches[-1] = self._caches[-1] + (ld_cache,)
        self._params = None
        return logq

    def permute_states(self, idx: np.ndarray) -> None:
        pass

    def backward(self, weights, ancestors) -> None:
        """Accumulate sum_t sum_n weights[t][n] * d log q_t(n) / d phi.

        ``ancestors[t]`` is the index array that permuted particles (and any
        recurrent state) immediately before step t's condition call, or None.
        """
        raise NotImplementedError

    def backward_step(self, t_index: int, w: np.ndarray) -> None:
        """Accumulate the weighted gradient of step ``t_index`` only.

        Recurrent state entering the step is treated as constant (truncated
        backprop), which is what the online update mode uses.
        """
        raise NotImplementedError

    def _require_conditioned(self):
        if not hasattr(self, "_caches"):
            raise RuntimeError("begin_sequence() must be called first")


class PriorProposal(ProposalModel):
    """Bootstrap proposal: q equals the model's initial/transition density."""

    def __init__(self):
        self.variant = ProposalVariant(family="prior")
        self.phi = ParamVector()
        self.phi.freeze()

    def condition(self, model: StateSpaceModel, x_t, z_prev, t) -> MdnBatch:
        self._require_conditioned()
        n = self.n_particles
        mean = model.prior_mean(z_prev, t)
        if mean.shape[0] == 1 and n > 1:
            mean = np.tile(mean, (n, 1))
        std = np.tile(model.prior_std(t), (n, 1))
        self._params = MdnBatch(
            logits=np.zeros((n, 1)),
            means=mean[:, None, :],
            sigmas=std[:, None, :],
        )
        self._caches.append(())
        return self._params

    def backward(self, weights, ancestors) -> None:
        pass  # no parameters

    def backward_step(self, t_index, w) -> None:
        pass


class MlpProposal(ProposalModel):
    """Feed-forward proposal: dense-tanh trunk, mixture-density head."""

    def __init__(self, variant: ProposalVariant, dim_z: int, dim_x: int,
                 hidden: int = 100, seed: int = 0):
        if variant.family != "nn":
            raise ValueError("MlpProposal requires family 'nn'")
        self.variant = variant
        self.dim_z = dim_z
        self.dim_x = dim_x
        d_in = dim_x + dim_z + N_TIME_FEATURES
        self.phi = ParamVector()
        self.trunk = Dense(self.phi, "trunk", d_in, hidden)
        self.act = Tanh()
        self.head = MdnHead(self.phi, "head", hidden, variant.n_components, dim_z)
        self.phi.freeze()
        rng = RngStream(seed=seed, stream_id=0).split("init", variant.label)
        self.trunk.initialize(rng.split("trunk"))
        self.head.initialize(rng.split("head"))

    def _net_input(self, x_t, z_prev, t):
        n = self.n_particles
        feats = np.tile(time_features(t, self.seq_len), (n, 1))
        xb = np.tile(np.atleast_1d(x_t), (n, 1))
        zb = np.zeros((n, self.dim_z)) if z_prev is None else z_prev
        return np.concatenate([xb, zb, feats], axis=1)

    def condition(self, model, x_t, z_prev, t) -> MdnBatch:
        self._require_conditioned()
        u = self._net_input(x_t, z_prev, t)
        pre, c_tr = self.trunk.forward(u)
        h, c_act = self.act.forward(pre)
        shift = None
        if self.variant.residual_f:
            shift = model.prior_mean(z_prev, t)
            if shift.shape[0] == 1 and self.n_particles > 1:
                shift = np.tile(shift, (self.n_particles, 1))
        params, c_head = self.head.forward(h, mean_shift=shift)
        self._params = params
        self._caches.append((c_tr, c_act, c_head))
        return params

    def backward(self, weights, ancestors) -> None:
        for t in range(len(self._caches) - 1, -1, -1):
            self.backward_step(t, weights[t])

    def backward_step(self, t_index, w) -> None:
        c_tr, c_act, c_head, ld_cache = self._caches[t_index]
        dh = self.head.backward(c_head, ld_cache, np.asarray(w))
        self.trunk.backward(c_tr, self.act.backward(c_act, dh))


class RnnProposal(ProposalModel):
    """Recurrent proposal: per-particle LSTM state over the ancestral history."""

    def __init__(self, variant: ProposalVariant, dim_z: int, dim_x: int,
                 hidden: int = 50, seed: int = 0):
        if variant.family != "rnn":
            raise ValueError("RnnProposal requires family 'rnn'")
        self.variant = variant
        self.dim_z = dim_z
        self.dim_x = dim_x
        self.hidden = hidden
        d_in = dim_x + dim_z + N_TIME_FEATURES
        self.phi = ParamVector()
        self.cell = LstmCell(self.phi, "lstm", d_in, hidden)
        self.head = MdnHead(self.phi, "head", hidden, variant.n_components, dim_z)
        self.phi.freeze()
        rng = RngStream(seed=seed, stream_id=0).split("init", variant.label)
        self.cell.initialize(rng.split("lstm"))
        self.head.initialize(rng.split("head"))

    def _reset_state(self) -> None:
        self.state = LstmState.zeros(self.n_particles, self.hidden)

    def permute_states(self, idx: np.ndarray) -> None:
        self.state = self.state.take(idx)

    def _net_input(self, x_t, z_prev, t):
        n = self.n_particles
        feats = np.tile(time_features(t, self.seq_len), (n, 1))
        xb = np.tile(np.atleast_1d(x_t), (n, 1))
        zb = np.zeros((n, self.dim_z)) if z_prev is None else z_prev
        return np.concatenate([xb, zb, feats], axis=1)

    def condition(self, model, x_t, z_prev, t) -> MdnBatch:
        self._require_conditioned()
        u = self._net_input(x_t, z_prev, t)
        self.state, c_lstm = self.cell.forward(u, self.state)
        shift = None
        if self.variant.residual_f:
            shift = model.prior_mean(z_prev, t)
            if shift.shape[0] == 1 and self.n_particles > 1:
                shift = np.tile(shift, (self.n_particles, 1))
        params, c_head = self.head.forward(self.state.h, mean_shift=shift)
        self._params = params
        self._caches.append((c_lstm, c_head))
        return params

    def backward(self, weights, ancestors) -> None:
        n = self.n_particles
        dh = np.zeros((n, self.hidden))
        dc = np.zeros((n, self.hidden))
        for t in range(len(self._caches) - 1, -1, -1):
            c_lstm, c_head, ld_cache = self._caches[t]
            dh = dh + self.head.backward(c_head, ld_cache, np.asarray(weights[t]))
            _, dh_prev, dc_prev = self.cell.backward(c_lstm, dh, dc)
            if t > 0 and ancestors is not None and ancestors[t] is not None:
                # state entering step t was state_out(t-1) gathered by ancestors[t]
                a = ancestors[t]
                dh = np.zeros_like(dh_prev)
                dc = np.zeros_like(dc_prev)
                np.add.at(dh, a, dh_prev)
                np.add.at(dc, a, dc_prev)
            else:
                dh, dc = dh_prev, dc_prev

    def backward_step(self, t_index, w) -> None:
        c_lstm, c_head, ld_cache = self._caches[t_index]
        dh = self.head.backward(c_head, ld_cache, np.asarray(w))
        self.cell.backward(c_lstm, dh, np.zeros_like(dh))


def make_proposal(variant: ProposalVariant, dim_z: int, dim_x: int,
                  hidden: int | None = None, seed: int = 0) -> ProposalModel:
    if variant.family == "prior":
        return PriorProposal()
    if variant.family == "nn":
        return MlpProposal(variant, dim_z, dim_x, hidden=hidden or 100, seed=seed)
    return RnnProposal(variant, dim_z, dim_x, hidden=hidden or 50, seed=seed)


def save_proposal(path, proposal: ProposalModel) -> None:
    v = proposal.variant
    header = {
        "family": v.family,
        "n_components": v.n_components,
        "residual_f": int(v.residual_f),
        "dim_z": getattr(proposal, "dim_z", 1),
        "dim_x": getattr(proposal, "dim_x", 1),
        "hidden": (
            proposal.hidden
            if hasattr(proposal, "hidden")
            else proposal.trunk.d_out if hasattr(proposal, "trunk") else 0
        ),
    }
    save_checkpoint(path, proposal.phi, header=header)


def load_proposal(path) -> ProposalModel:
    # Read the header first to reconstruct the architecture, then the values.
    header = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].partition("=")
            header[k.strip()] = v.strip()
    try:
        variant = ProposalVariant(
            family=header["family"],
            n_components=int(header["n_components"]),
            residual_f=bool(int(header["residual_f"])),
        )
        dim_z = int(header["dim_z"])
        dim_x = int(header["dim_x"])
        hidden = int(header["hidden"]) or None
    except KeyError as e:
        raise ValueError(f"corrupt proposal checkpoint {path}: missing header {e}")
    proposal = make_proposal(variant, dim_z, dim_x, hidden=hidden)
    if proposal.phi.size:
        load_checkpoint(path, proposal.phi)
    return proposal
