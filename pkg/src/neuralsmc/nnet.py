"""Minimal neural-network subsystem with manual reverse-mode gradients.

Dense layers, tanh, an LSTM cell, and a mixture-density output head, all
operating on batches (rows = particles) and accumulating gradients into a
shared :class:`~neuralsmc.params.ParamVector`.  Each layer's ``forward``
returns a cache which its ``backward`` consumes; backward order is the
caller's responsibility (the proposal classes run it in reverse time order).

No computation graph: the model zoo is small and fixed, so hand-written
backward passes keep the gradients auditable and the dependencies zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri

from .params import ParamVector
from .prng import RngStream

SIGMA_FLOOR = 1e-3  # lower bound on proposal stds; keeps importance weights finite

__all__ = [
    "SIGMA_FLOOR",
    "sigmoid",
    "softplus",
    "softmax",
    "log_softmax",
    "logsumexp",
    "Dense",
    "Tanh",
    "LstmCell",
    "LstmState",
    "MdnParams",
    "MdnBatch",
    "MdnHead",
    "mdn_log_density",
    "mdn_sample",
    "finite_diff_grad",
]


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    return np.log(np.expm1(y))


def logsumexp(x, axis=-1, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    return x - logsumexp(x, axis=axis, keepdims=True)


class Dense:
    """Affine map y = x W^T + b over batch rows."""

    def __init__(self, pv: ParamVector, name: str, d_in: int, d_out: int):
        self.pv = pv
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        pv.add(f"{name}.W", (d_out, d_in))
        pv.add(f"{name}.b", (d_out,))

    def initialize(self, rng: RngStream, weight_scale: float | None = None):
        W = self.pv.view(f"{self.name}.W")
        scale = 1.0 / np.sqrt(self.d_in) if weight_scale is None else weight_scale
        W[:] = (rng.uniforms(W.size).reshape(W.shape) * 2 - 1) * scale
        self.pv.view(f"{self.name}.b")[:] = 0.0

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(
                f"{self.name}: expected input (B, {self.d_in}), got {x.shape}"
            )
        W = self.pv.view(f"{self.name}.W")
        b = self.pv.view(f"{self.name}.b")
        return x @ W.T + b, x

    def backward(self, cache, dy):
        x = cache
        self.pv.gview(f"{self.name}.W")[:] += dy.T @ x
        self.pv.gview(f"{self.name}.b")[:] += dy.sum(axis=0)
        return dy @ self.pv.view(f"{self.name}.W")


class Tanh:
    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, dy):
        return dy * (1.0 - cache**2)


@dataclass
class LstmState:
    """Hidden and cell vectors, batched over particles: shape (B, H)."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        return cls(h=np.zeros((batch, hidden)), c=np.zeros((batch, hidden)))

    def take(self, idx: np.ndarray) -> "LstmState":
        """Reindex the batch (ancestor permutation after resampling)."""
        return LstmState(h=self.h[idx], c=self.c[idx])


class LstmCell:
    """Standard LSTM cell: sigmoid input/forget/output gates, tanh candidate."""

    def __init__(self, pv: ParamVector, name: str, d_in: int, hidden: int):
        self.pv = pv
        self.name = name
        self.d_in = d_in
        self.hidden = hidden
        pv.add(f"{name}.Wx", (4 * hidden, d_in))
        pv.add(f"{name}.Wh", (4 * hidden, hidden))
        pv.add(f"{name}.b", (4 * hidden,))

    def initialize(self, rng: RngStream):
        for suffix, fan_in in (("Wx", self.d_in), ("Wh", self.hidden)):
            W = self.pv.view(f"{self.name}.{suffix}")
            W[:] = (rng.uniforms(W.size).reshape(W.shape) * 2 - 1) / np.sqrt(fan_in)
        self.pv.view(f"{self.name}.b")[:] = 0.0

    def forward(self, x: np.ndarray, state: LstmState):
        if x.shape[1] != self.d_in:
            raise ValueError(
                f"{self.name}: expected input (B, {self.d_in}), got {x.shape}"
            )
        H = self.hidden
        Wx = self.pv.view(f"{self.name}.Wx")
        Wh = self.pv.view(f"{self.name}.Wh")
        b = self.pv.view(f"{self.name}.b")
        a = x @ Wx.T + state.h @ Wh.T + b
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H : 2 * H])
        o = sigmoid(a[:, 2 * H : 3 * H])
        g = np.tanh(a[:, 3 * H :])
        c2 = f * state.c + i * g
        tc2 = np.tanh(c2)
        h2 = o * tc2
        cache = (x, state.h, state.c, i, f, o, g, tc2)
        return LstmState(h=h2, c=c2), cache

    def backward(self, cache, dh2, dc2):
        """Returns (dx, dh_prev, dc_prev); accumulates parameter grads."""
        x, h, c, i, f, o, g, tc2 = cache
        do = dh2 * tc2
        dc_tot = dc2 + dh2 * o * (1.0 - tc2**2)
        di = dc_tot * g
        df = dc_tot * c
        dg = dc_tot * i
        dc_prev = dc_tot * f
        da = np.concatenate(
            [
                di * i * (1 - i),
                df * f * (1 - f),
                do * o * (1 - o),
                dg * (1 - g**2),
            ],
            axis=1,
        )
        self.pv.gview(f"{self.name}.Wx")[:] += da.T @ x
        self.pv.gview(f"{self.name}.Wh")[:] += da.T @ h
        self.pv.gview(f"{self.name}.b")[:] += da.sum(axis=0)
        dx = da @ self.pv.view(f"{self.name}.Wx")
        dh_prev = da @ self.pv.view(f"{self.name}.Wh")
        return dx, dh_prev, dc_prev


@dataclass
class MdnParams:
    """A single mixture-of-diagonal-Gaussians: K components in D dimensions."""

    mix_logits: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    log_stds: np.ndarray  # (K, D); stds clamped to >= SIGMA_FLOOR

    def __post_init__(self):
        self.mix_logits = np.atleast_1d(np.asarray(self.mix_logits, dtype=float))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.log_stds = np.atleast_2d(np.asarray(self.log_stds, dtype=float))
        self.log_stds = np.maximum(self.log_stds, np.log(SIGMA_FLOOR))
        if self.means.shape != self.log_stds.shape:
            raise ValueError("means and log_stds must have identical shape")
        if self.mix_logits.shape[0] != self.means.shape[0]:
            raise ValueError("mix_logits length must match component count")

    @property
    def n_components(self) -> int:
        return self.mix_logits.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def mdn_log_density(m: MdnParams, z) -> float:
    """log sum_k pi_k N(z; mu_k, diag(sigma_k^2)), log-sum-exp stabilized."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape[0] != m.dim:
        raise ValueError(f"z has dim {z.shape[0]}, mixture has dim {m.dim}")
    stds = np.exp(m.log_stds)
    comp = -0.5 * np.log(2 * np.pi) - m.log_stds - 0.5 * ((z - m.means) / stds) ** 2
    lp = comp.sum(axis=1) + log_softmax(m.mix_logits)
    return float(logsumexp(lp))


def mdn_sample(m: MdnParams, rng: RngStream) -> np.ndarray:
    """Draw a component from softmax(mix_logits), then a diagonal Gaussian."""
    pi = softmax(m.mix_logits)
    k = int(np.searchsorted(np.cumsum(pi), rng.uniform01()))
    k = min(k, m.n_components - 1)
    eps = np.asarray([rng.normal() for _ in range(m.dim)])
    return m.means[k] + np.exp(m.log_stds[k]) * eps


@dataclass
class MdnBatch:
    """Per-particle mixture parameters: one MDN per batch row."""

    logits: np.ndarray  # (B, K)
    means: np.ndarray  # (B, K, D)
    sigmas: np.ndarray  # (B, K, D)

    @property
    def batch(self) -> int:
        return self.logits.shape[0]

    def get(self, i: int) -> MdnParams:
        return MdnParams(
            mix_logits=self.logits[i],
            means=self.means[i],
            log_stds=np.log(self.sigmas[i]),
        )

    def sample(self, rng: RngStream) -> np.ndarray:
        """Vectorized draw: one sample per row. Advances rng by B*(1+D)."""
        B, K, D = self.means.shape
        if K == 1:
            # single component: no selection draw, keeps streams aligned with
            # plain Gaussian sampling
            ks = np.zeros(B, dtype=np.int64)
        else:
            pi = softmax(self.logits, axis=1)
            u = rng.uniforms(B)
            cum = np.cumsum(pi, axis=1)
            ks = np.minimum((cum < u[:, None]).sum(axis=1), K - 1)
        eps = ndtri(rng.open_uniforms(B * D)).reshape(B, D)
        rows = np.arange(B)
        return self.means[rows, ks] + self.sigmas[rows, ks] * eps

    def log_density(self, z: np.ndarray):
        """Row-wise log mixture density at z (B, D); returns (logq, cache)."""
        diff = (z[:, None, :] - self.means) / self.sigmas
        comp = (-0.5 * np.log(2 * np.pi) - np.log(self.sigmas) - 0.5 * diff**2).sum(
            axis=2
        )
        ll = log_softmax(self.logits, axis=1)
        joint = ll + comp  # (B, K)
        logq = logsumexp(joint, axis=1)
        cache = (z, diff, joint, logq)
        return logq, cache


class MdnHead:
    """Maps a feature vector to mixture parameters via three affine layers.

    Stds are parameterized sigma = softplus(raw) + SIGMA_FLOOR.  The raw-std
    layer is initialized to weight zero with bias such that sigma = 1 exactly,
    so untrained proposals start unit-width.
    """

    def __init__(self, pv: ParamVector, name: str, d_in: int, K: int, D: int):
        self.K = K
        self.D = D
        self.l_logits = Dense(pv, f"{name}.logits", d_in, K)
        self.l_means = Dense(pv, f"{name}.means", d_in, K * D)
        self.l_rawstd = Dense(pv, f"{name}.rawstd", d_in, K * D)

    def initialize(self, rng: RngStream):
        self.l_logits.initialize(rng.split("logits"))
        self.l_means.initialize(rng.split("means"))
        self.l_rawstd.initialize(rng.split("rawstd"), weight_scale=0.0)
        self.l_rawstd.pv.view(f"{self.l_rawstd.name}.b")[:] = inv_softplus(
            1.0 - SIGMA_FLOOR
        )

    def forward(self, h: np.ndarray, mean_shift: np.ndarray | None = None):
        """h: (B, d_in); mean_shift (B, D) offsets every component mean."""
        B = h.shape[0]
        logits, c1 = self.l_logits.forward(h)
        means_flat, c2 = self.l_means.forward(h)
        raw, c3 = self.l_rawstd.forward(h)
        means = means_flat.reshape(B, self.K, self.D)
        if mean_shift is not None:
            means = means + mean_shift[:, None, :]
        sigmas = softplus(raw).reshape(B, self.K, self.D) + SIGMA_FLOOR
        params = MdnBatch(logits=logits, means=means, sigmas=sigmas)
        cache = (c1, c2, c3, raw, params)
        return params, cache

    def backward(self, cache, ld_cache, w: np.ndarray) -> np.ndarray:
        """Backprop sum_i w_i * logq_i; returns d/dh (B, d_in)."""
        c1, c2, c3, raw, params = cache
        z, diff, joint, logq = ld_cache
        B = z.shape[0]
        resp = np.exp(joint - logq[:, None])  # (B, K) responsibilities
        pi = softmax(params.logits, axis=1)
        dlogits = (resp - pi) * w[:, None]
        dmeans = resp[:, :, None] * diff / params.sigmas * w[:, None, None]
        dsig = resp[:, :, None] * (diff**2 - 1.0) / params.sigmas * w[:, None, None]
        draw = (dsig * sigmoid(raw.reshape(B, self.K, self.D))).reshape(B, -1)
        dh = self.l_logits.backward(c1, dlogits)
        dh += self.l_means.backward(c2, dmeans.reshape(B, -1))
        dh += self.l_rawstd.backward(c3, draw)
        return dh


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g
