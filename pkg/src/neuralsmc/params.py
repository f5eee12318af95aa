"""Flat parameter vectors with named slices, plus the Adam optimizer.

A :class:`ParamVector` stores all parameters of a network (or a model) in one
flat float64 array with a paired gradient accumulator.  Layers register named
slices at construction time and hold reshaped views, so the optimizer only
ever sees the flat vector.

Checkpoints are plain text, one line per slice, with values written as C99
hex floats so save/load round-trips are bit-exact.
"""

from __future__ import annotations

import numpy as np

__all__ = ["ParamVector", "Adam", "save_checkpoint", "load_checkpoint"]


class ParamVector:
    """Flat parameter store with named, disjoint slices covering the vector."""

    def __init__(self):
        self._specs: list[tuple[str, tuple[int, ...]]] = []
        self._offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.values: np.ndarray | None = None
        self.grad: np.ndarray | None = None

    def add(self, name: str, shape: tuple[int, ...]) -> None:
        if self.values is not None:
            raise RuntimeError("cannot add slices after freeze()")
        if name in self._offsets:
            raise ValueError(f"duplicate slice name {name!r}")
        offset = sum(int(np.prod(s)) for _, s in self._specs)
        self._offsets[name] = (offset, int(np.prod(shape)), shape)
        self._specs.append((name, shape))

    def freeze(self) -> None:
        n = sum(int(np.prod(s)) for _, s in self._specs)
        self.values = np.zeros(n)
        self.grad = np.zeros(n)

    @property
    def size(self) -> int:
        return 0 if self.values is None else self.values.size

    @property
    def slice_names(self) -> list[str]:
        return [name for name, _ in self._specs]

    def view(self, name: str) -> np.ndarray:
        """Writable view of a named slice, reshaped to its declared shape."""
        off, size, shape = self._offsets[name]
        return self.values[off : off + size].reshape(shape)

    def gview(self, name: str) -> np.ndarray:
        off, size, shape = self._offsets[name]
        return self.grad[off : off + size].reshape(shape)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def grad_norm(self) -> float:
        return float(np.sqrt(np.sum(self.grad**2)))

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale grad down to max_norm if it exceeds it; returns the pre-clip norm."""
        norm = self.grad_norm()
        if norm > max_norm:
            self.grad *= max_norm / norm
        return norm

    def copy_values(self) -> np.ndarray:
        return self.values.copy()


class Adam:
    """Adam with bias correction; zeroes the gradient after each step."""

    def __init__(self, pv: ParamVector, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.pv = pv
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(pv.size)
        self.v = np.zeros(pv.size)
        self.t = 0

    def step(self) -> None:
        self.t += 1
        g = self.pv.grad
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        self.pv.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.pv.zero_grad()


def save_checkpoint(path, pv: ParamVector, header: dict | None = None) -> None:
    """Write slices as ``name shape hexfloat...`` lines; bit-exact round-trip."""
    with open(path, "w") as f:
        for k, v in (header or {}).items():
            f.write(f"# {k} = {v}\n")
        for name in pv.slice_names:
            arr = pv.view(name)
            shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            vals = " ".join(float(x).hex() for x in arr.ravel())
            f.write(f"{name} {shape} {vals}\n")


def load_checkpoint(path, pv: ParamVector) -> dict:
    """Load values into an already-shaped ParamVector; returns the header dict."""
    header = {}
    seen = set()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                header[k.strip()] = v.strip()
                continue
            parts = line.split()
            name, shape_s = parts[0], parts[1]
            if name not in pv._offsets:
                raise ValueError(f"checkpoint slice {name!r} unknown to this ParamVector")
            arr = pv.view(name)
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            if shape != arr.shape:
                raise ValueError(
                    f"checkpoint slice {name!r} has shape {shape}, expected {arr.shape}"
                )
            vals = np.array([float.fromhex(s) for s in parts[2:]])
            if vals.size != arr.size:
                raise ValueError(f"checkpoint slice {name!r} has wrong length")
            arr.ravel()[:] = vals
            seen.add(name)
    missing = set(pv.slice_names) - seen
    if missing:
        raise ValueError(f"checkpoint missing slices: {sorted(missing)}")
    return header
