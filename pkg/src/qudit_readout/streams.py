"""Counter-based random streams.

Every uniform variate is a pure function of ``(seed, trial, counter)``, so a
trial's draws do not depend on how trials are batched or which worker runs
them. The mixing function is the SplitMix64 finalizer applied to a keyed
counter; it is cheap to evaluate on whole numpy arrays at once.
"""

from __future__ import annotations

import numpy as np

__all__ = ["CounterStreams", "SEED_MASK"]

SEED_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_COUNTER_SALT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class CounterStreams:
    """Per-trial substreams keyed by a 64-bit seed.

    >>> s = CounterStreams(7)
    >>> keys = s.keys(np.arange(3))
    >>> u = s.uniform(keys, 0)
    >>> bool(np.all((u >= 0) & (u < 1)))
    True
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & SEED_MASK
        with np.errstate(over="ignore"):
            self._root = _mix64(np.array([self.seed], dtype=np.uint64))[0]

    def keys(self, trials: np.ndarray) -> np.ndarray:
        t = np.asarray(trials, dtype=np.uint64)
        with np.errstate(over="ignore"):
            return _mix64(self._root ^ ((t + np.uint64(1)) * _GOLDEN))

    def uniform(self, keys: np.ndarray, counter: np.ndarray | int) -> np.ndarray:
        """Uniform doubles in ``[0, 1)``, one per key, for the given counter(s)."""
        c = np.broadcast_to(np.asarray(counter, dtype=np.uint64), np.shape(keys))
        with np.errstate(over="ignore"):
            z = _mix64(keys ^ _mix64(c * _COUNTER_SALT + _GOLDEN))
        return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53
