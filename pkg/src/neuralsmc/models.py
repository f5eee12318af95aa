"""State-space models: the benchmark nonlinear model and a linear-Gaussian one.

Both models are Markov with additive diagonal Gaussian noise.  All density
methods are vectorized over particles (rows).  Models are immutable after
construction except for their ``theta`` parameter vector, which the learning
loop may update in place.

Time convention: the first state is z_1; the transition into step t (t >= 2)
uses the target step's index, so the benchmark forcing term is 8*cos(1.2*t).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .params import ParamVector
from .prng import RngStream

__all__ = [
    "StateSpaceModel",
    "BenchmarkNssm",
    "LinearGaussianSsm",
    "nssm_f",
    "nssm_g",
    "simulate",
    "Dataset",
]


def _log_normal_diag(x, mean, std):
    """Row-wise log N(x; mean, diag(std^2)); broadcasts over rows."""
    return np.sum(
        -0.5 * np.log(2 * np.pi) - np.log(std) - 0.5 * ((x - mean) / std) ** 2,
        axis=-1,
    )


class StateSpaceModel:
    """Interface: initial/transition/observation log-densities and samplers."""

    dim_z: int
    dim_x: int
    theta: ParamVector | None = None

    def log_init(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_init(self, n: int, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def log_trans(self, z: np.ndarray, z_prev: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def sample_trans(self, z_prev: np.ndarray, t: int, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def log_obs(self, x: np.ndarray, z: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def prior_mean(self, z_prev: np.ndarray | None, t: int) -> np.ndarray:
        """Mean of p(z_t | z_{t-1}) (t >= 2) or of p(z_1) (t == 1)."""
        raise NotImplementedError

    def prior_std(self, t: int) -> np.ndarray:
        raise NotImplementedError

    # Optional theta-gradient support (needed only for model learning).
    def grad_theta_log_trans(self, z, z_prev, t) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no differentiable theta")

    def grad_theta_log_obs(self, x, z, t) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no differentiable theta")

    def grad_theta_log_init(self, z) -> np.ndarray:
        # Initial density usually carries no theta; override if it does.
        return np.zeros((z.shape[0], self.theta.size))


def nssm_f(z, t):
    """Benchmark transition mean: z/2 + 25 z/(1+z^2) + 8 cos(1.2 t)."""
    z = np.asarray(z, dtype=float)
    return z / 2.0 + 25.0 * z / (1.0 + z**2) + 8.0 * np.cos(1.2 * t)


def nssm_g(z):
    """Benchmark observation mean: z^2 / 20 (even, hence sign-ambiguous)."""
    z = np.asarray(z, dtype=float)
    return z**2 / 20.0


class BenchmarkNssm(StateSpaceModel):
    """Scalar nonlinear model with N(0, init_var) initial state.

    z_t | z_{t-1} ~ N(f(z_{t-1}, t), sigma_v^2)
    x_t | z_t     ~ N(g(z_t), sigma_w^2)
    """

    dim_z = 1
    dim_x = 1

    def __init__(self, sigma_v: float, sigma_w: float, init_var: float = 5.0):
        if sigma_v <= 0 or sigma_w <= 0:
            raise ValueError("noise stds must be positive")
        self.init_var = float(init_var)
        self.theta = ParamVector()
        self.theta.add("sigma_v", ())
        self.theta.add("sigma_w", ())
        self.theta.freeze()
        self.theta.view("sigma_v")[...] = sigma_v
        self.theta.view("sigma_w")[...] = sigma_w

    @property
    def sigma_v(self) -> float:
        return float(self.theta.view("sigma_v"))

    @property
    def sigma_w(self) -> float:
        return float(self.theta.view("sigma_w"))

    def log_init(self, z):
        return _log_normal_diag(z, 0.0, np.sqrt(self.init_var))

    def sample_init(self, n, rng):
        return rng.normals(n, 0.0, np.sqrt(self.init_var)).reshape(n, 1)

    def log_trans(self, z, z_prev, t):
        return _log_normal_diag(z, nssm_f(z_prev, t), self.sigma_v)

    def sample_trans(self, z_prev, t, rng):
        n = z_prev.shape[0]
        return nssm_f(z_prev, t) + rng.normals(n, 0.0, self.sigma_v).reshape(n, 1)

    def log_obs(self, x, z, t):
        return _log_normal_diag(x, nssm_g(z), self.sigma_w)

    def prior_mean(self, z_prev, t):
        if t == 1:
            return np.zeros((1 if z_prev is None else z_prev.shape[0], 1))
        return nssm_f(z_prev, t)

    def prior_std(self, t):
        return np.array([np.sqrt(self.init_var) if t == 1 else self.sigma_v])

    def grad_theta_log_trans(self, z, z_prev, t):
        r = z - nssm_f(z_prev, t)
        dsv = (r**2 / self.sigma_v**3 - 1.0 / self.sigma_v).sum(axis=1)
        return np.stack([dsv, np.zeros_like(dsv)], axis=1)

    def grad_theta_log_obs(self, x, z, t):
        r = x - nssm_g(z)
        dsw = (r**2 / self.sigma_w**3 - 1.0 / self.sigma_w).sum(axis=1)
        return np.stack([np.zeros_like(dsw), dsw], axis=1)


class LinearGaussianSsm(StateSpaceModel):
    """z_t = A z_{t-1} + N(0, Q), x_t = C z_t + N(0, R), diagonal Q and R.

    theta holds the noise stds (sqrt of the Q and R diagonals) so the same
    learning machinery applies as for the benchmark model.
    """

    def __init__(self, A, C, q_std, r_std, m0, p0_std):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        q_std = np.atleast_1d(np.asarray(q_std, dtype=float))
        r_std = np.atleast_1d(np.asarray(r_std, dtype=float))
        self.m0 = np.atleast_1d(np.asarray(m0, dtype=float))
        self.p0_std = np.atleast_1d(np.asarray(p0_std, dtype=float))
        if np.any(q_std <= 0) or np.any(r_std <= 0) or np.any(self.p0_std <= 0):
            raise ValueError("covariance diagonals must be positive")
        self.dim_z = self.A.shape[0]
        self.dim_x = self.C.shape[0]
        self.theta = ParamVector()
        self.theta.add("q_std", (self.dim_z,))
        self.theta.add("r_std", (self.dim_x,))
        self.theta.freeze()
        self.theta.view("q_std")[:] = q_std
        self.theta.view("r_std")[:] = r_std

    @property
    def q_std(self):
        return self.theta.view("q_std")

    @property
    def r_std(self):
        return self.theta.view("r_std")

    def log_init(self, z):
        return _log_normal_diag(z, self.m0, self.p0_std)

    def sample_init(self, n, rng):
        eps = rng.normals(n * self.dim_z).reshape(n, self.dim_z)
        return self.m0 + self.p0_std * eps

    def log_trans(self, z, z_prev, t):
        return _log_normal_diag(z, z_prev @ self.A.T, self.q_std)

    def sample_trans(self, z_prev, t, rng):
        n = z_prev.shape[0]
        eps = rng.normals(n * self.dim_z).reshape(n, self.dim_z)
        return z_prev @ self.A.T + self.q_std * eps

    def log_obs(self, x, z, t):
        return _log_normal_diag(x, z @ self.C.T, self.r_std)

    def prior_mean(self, z_prev, t):
        if t == 1:
            n = 1 if z_prev is None else z_prev.shape[0]
            return np.tile(self.m0, (n, 1))
        return z_prev @ self.A.T

    def prior_std(self, t):
        return self.p0_std if t == 1 else self.q_std

    def grad_theta_log_trans(self, z, z_prev, t):
        r = z - z_prev @ self.A.T
        dq = r**2 / self.q_std**3 - 1.0 / self.q_std
        return np.concatenate([dq, np.zeros((z.shape[0], self.dim_x))], axis=1)

    def grad_theta_log_obs(self, x, z, t):
        r = x - z @ self.C.T
        dr = r**2 / self.r_std**3 - 1.0 / self.r_std
        return np.concatenate([np.zeros((z.shape[0], self.dim_z)), dr], axis=1)


def simulate(model: StateSpaceModel, T: int, rng: RngStream):
    """Ancestral sampling: returns (z, x) with shapes (T, D_z), (T, D_x)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    z = np.zeros((T, model.dim_z))
    x = np.zeros((T, model.dim_x))
    zt = model.sample_init(1, rng)
    for t in range(1, T + 1):
        if t > 1:
            zt = model.sample_trans(zt, t, rng)
        z[t - 1] = zt[0]
        x[t - 1] = _sample_obs(model, zt, t, rng)[0]
    return z, x


def _sample_obs(model, z, t, rng):
    if isinstance(model, BenchmarkNssm):
        mean = nssm_g(z)
        std = np.array([model.sigma_w])
    elif isinstance(model, LinearGaussianSsm):
        mean = z @ model.C.T
        std = model.r_std
    else:
        raise NotImplementedError(f"no observation sampler for {type(model).__name__}")
    n = z.shape[0]
    eps = rng.normals(n * model.dim_x).reshape(n, model.dim_x)
    return mean + std * eps


@dataclass
class Dataset:
    """A collection of observation sequences with optional latent truth."""

    sequences: list = field(default_factory=list)  # list of (x, z_or_None)

    def add(self, x: np.ndarray, z: np.ndarray | None = None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if z is not None:
            z = np.atleast_2d(np.asarray(z, dtype=float))
            if z.shape[0] != x.shape[0]:
                raise ValueError("x and z must have equal length")
        self.sequences.append((x, z))

    def __len__(self):
        return len(self.sequences)

    def __getitem__(self, j):
        return self.sequences[j]

    @classmethod
    def from_simulations(cls, model, n_sequences, T, rng: RngStream) -> "Dataset":
        ds = cls()
        for j in range(n_sequences):
            z, x = simulate(model, T, rng.split("sim", j))
            ds.add(x, z)
        return ds

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            x0, z0 = self.sequences[0]
            header = ["sequence_id", "t"]
            header += [f"x{d}" for d in range(x0.shape[1])]
            if z0 is not None:
                header += [f"z{d}" for d in range(z0.shape[1])]
            w.writerow(header)
            for j, (x, z) in enumerate(self.sequences):
                for t in range(x.shape[0]):
                    row = [j, t + 1] + [repr(float(v)) for v in x[t]]
                    if z is not None:
                        row += [repr(float(v)) for v in z[t]]
                    w.writerow(row)

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
            z_cols = [i for i, h in enumerate(header) if h.startswith("z")]
            rows_by_seq: dict[int, list] = {}
            for row in r:
                rows_by_seq.setdefault(int(row[0]), []).append(row)
        ds = cls()
        for j in sorted(rows_by_seq):
            rows = rows_by_seq[j]
            ts = [int(row[1]) for row in rows]
            if ts != list(range(1, len(ts) + 1)):
                raise ValueError(f"sequence {j}: time indices must be 1..T in order")
            x = np.array([[float(row[i]) for i in x_cols] for row in rows])
            z = (
                np.array([[float(row[i]) for i in z_cols] for row in rows])
                if z_cols
                else None
            )
            ds.add(x, z)
        return ds
