"""Deterministic, splittable random number streams.

Every random draw in the library comes from an :class:`RngStream`, a
counter-based generator keyed by ``(seed, stream_id, counter)``.  Streams are
cheap value objects: the n-th draw of a stream is a pure function of the key,
so per-particle work can be reordered or parallelized without changing any
result.  Distinct consumers (proposal sampling, resampling, data simulation,
PMMH moves) use disjoint stream ids derived with :func:`stream_for`.

Gaussian draws use the inverse-CDF transform (one uniform per normal).  This
choice is fixed: changing it would change every bit-exact replay.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

__all__ = ["RngStream", "stream_for"]

_U64 = np.uint64
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on uint64 arrays (full avalanche)."""
    z = (z + _U64(0x9E3779B97F4A7C15)) & _U64(_MASK64)
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def _hash_component(c) -> int:
    if isinstance(c, (int, np.integer)):
        return int(c) & _MASK64
    if isinstance(c, str):
        return int.from_bytes(
            hashlib.blake2b(c.encode(), digest_size=8).digest(), "little"
        )
    raise TypeError(f"stream path components must be int or str, got {type(c)!r}")


def stream_for(seed: int, *path) -> "RngStream":
    """Derive an independent stream from a seed and a consumer path.

    The path is any tuple of ints/strings naming the consumer, e.g.
    ``stream_for(seed, "proposal", t)``.  Distinct paths give statistically
    independent streams; identical paths always give the same stream.
    """
    sid = np.uint64(0)
    with np.errstate(over="ignore"):
        for c in path:
            sid = _mix(sid ^ _U64(_hash_component(c)))
    return RngStream(seed=int(seed) & _MASK64, stream_id=int(sid))


@dataclass
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Drawing advances ``counter``; the value of draw ``i`` depends only on
    ``(seed, stream_id, i)``.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0
    _key: int = field(init=False, repr=False)

    def __post_init__(self):
        with np.errstate(over="ignore"):
            k = _mix(_mix(_U64(self.seed)) ^ _U64(self.stream_id))
        self._key = int(k)

    def _raw(self, n: int) -> np.ndarray:
        ctrs = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(_mix(_U64(self._key) ^ ctrs))

    def uniforms(self, n: int) -> np.ndarray:
        """n uniform draws in [0, 1), advancing the counter by n."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform01(self) -> float:
        return float(self.uniforms(1)[0])

    def open_uniforms(self, n: int) -> np.ndarray:
        """Uniforms in the open interval (0, 1), safe for inverse CDFs."""
        return ((self._raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """n draws from N(mean, std^2) via the inverse-CDF transform."""
        if std <= 0:
            raise ValueError(f"std must be positive, got {std}")
        return mean + std * ndtri(self.open_uniforms(n))

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        return float(self.normals(1, mean, std)[0])

    def integers(self, n: int, high: int) -> np.ndarray:
        """n draws uniform over {0, ..., high-1} (for shuffles and tests)."""
        return np.floor(self.uniforms(n) * high).astype(np.int64)

    def split(self, *path) -> "RngStream":
        """Child stream independent of this one and of other split paths."""
        return stream_for(self.seed, self.stream_id, *path)
