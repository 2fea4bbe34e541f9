"""Simulated jump traces, majority-vote filtering and empirical transition matrices."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .protocols import AncillaModel, tie_break_priority
from .transitions import TransitionMatrix

__all__ = [
    "JumpTrace",
    "TransitionEstimate",
    "generate_jump_trace",
    "majority_filter",
    "extract_transition_matrix",
    "assign_blocks",
]


@dataclass(frozen=True)
class JumpTrace:
    """Per-block state assignments of a sequential QND readout record.

    ``blips[b, f]`` is the outcome of probing frequency ``f`` in block ``b``;
    ``true_states`` is only known for simulated traces.
    """

    assigned: np.ndarray
    dimension: int
    true_states: np.ndarray | None = None
    blips: np.ndarray | None = None

    def __post_init__(self) -> None:
        a = np.asarray(self.assigned, dtype=np.int64)
        if a.ndim != 1:
            raise ValueError("assigned states must be a 1-d sequence")
        if a.size and (a.min() < 0 or a.max() >= self.dimension):
            raise ValueError(f"assigned states must lie in [0, {self.dimension})")
        object.__setattr__(self, "assigned", a)
        if self.true_states is not None:
            t = np.asarray(self.true_states, dtype=np.int64)
            if t.shape != a.shape:
                raise ValueError("true_states and assigned must have equal length")
            object.__setattr__(self, "true_states", t)
        if self.blips is not None:
            b = np.asarray(self.blips, dtype=bool)
            if b.shape != (a.size, self.dimension):
                raise ValueError(f"blips must have shape ({a.size}, {self.dimension})")
            object.__setattr__(self, "blips", b)

    def __len__(self) -> int:
        return self.assigned.size

    def replace_assigned(self, assigned: np.ndarray) -> "JumpTrace":
        return JumpTrace(assigned, self.dimension, self.true_states, self.blips)


def assign_blocks(blips: np.ndarray, probe_order: np.ndarray | None = None) -> np.ndarray:
    """Raw state assignment per block.

    A block is assigned the first frequency that blipped, in probe order.
    Blocks without any blip repeat the previous assignment; a leading run of
    empty blocks takes the highest tie-break priority state (``m = +I``).
    """
    blips = np.asarray(blips, dtype=bool)
    n, d = blips.shape
    order = np.arange(d) if probe_order is None else np.asarray(probe_order)
    ordered = blips[:, order]
    any_blip = ordered.any(axis=1)
    first = order[np.argmax(ordered, axis=1)]
    default = int(np.argmax(tie_break_priority(d)))
    # forward-fill the blocks without a blip
    idx = np.where(any_blip, np.arange(n), -1)
    np.maximum.accumulate(idx, out=idx)
    return np.where(idx >= 0, first[np.maximum(idx, 0)], default)


def generate_jump_trace(
    t_cycle: TransitionMatrix,
    anc: AncillaModel,
    n_blocks: int,
    seed: int,
    evolution: str = "per_block",
    initial_state: int | None = None,
    probe_order: np.ndarray | None = None,
) -> JumpTrace:
    """Simulate sequential readout blocks, one QND cycle per frequency in each.

    Parameters
    ----------
    evolution
        ``"per_block"`` (default) draws one transition from ``t_cycle`` at the
        end of every block, so consecutive block states are linked by exactly
        ``t_cycle``. ``"per_cycle"`` applies ``t_cycle`` before every
        frequency probe.
    initial_state
        Starting state index; drawn uniformly when omitted.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be at least 1")
    if evolution not in ("per_block", "per_cycle"):
        raise ValueError(f"unknown evolution mode {evolution!r}")
    d = t_cycle.dimension
    order = np.arange(d) if probe_order is None else np.asarray(probe_order, dtype=int)
    if sorted(order.tolist()) != list(range(d)):
        raise ValueError(f"probe_order must be a permutation of range({d})")
    rng = np.random.default_rng(seed)
    cum = np.cumsum(t_cycle.data, axis=0)
    cum[-1] = 1.0
    cum_cols = [cum[:, j].copy() for j in range(d)]

    s = int(rng.integers(d)) if initial_state is None else int(initial_state)
    if not 0 <= s < d:
        raise ValueError(f"initial_state must lie in [0, {d})")
    steps = n_blocks * d if evolution == "per_cycle" else n_blocks
    u = rng.random(steps)
    # state during each probe, shape (n_blocks, d) in probe order
    held = np.empty(steps, dtype=np.int64)
    for k in range(steps):
        if evolution == "per_cycle":
            s = int(np.searchsorted(cum_cols[s], u[k], side="right"))
            held[k] = s
        else:
            held[k] = s
            s = int(np.searchsorted(cum_cols[s], u[k], side="right"))
    np.minimum(held, d - 1, out=held)
    probed_state = held.reshape(n_blocks, d) if evolution == "per_cycle" else np.repeat(held[:, None], d, axis=1)

    hit = probed_state == order[None, :]
    p = np.where(hit, anc.p_tp, anc.p_fp)
    ordered_blips = rng.random((n_blocks, d)) < p
    blips = np.zeros_like(ordered_blips)
    blips[:, order] = ordered_blips
    # ground truth: the state at the start of the block
    true_states = probed_state[:, 0]
    return JumpTrace(assign_blocks(blips, order), d, true_states, blips)


def majority_filter(trace: JumpTrace, kernel: int = 5) -> JumpTrace:
    """Sliding-window mode of the assigned states.

    The window is truncated symmetrically near the ends (radius
    ``min(kernel // 2, i, n - 1 - i)``). If the centre element reaches the
    maximal count, or the maximum is shared by several states, the centre
    is kept.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd integer >= 1, got {kernel}")
    a = trace.assigned
    n, d = a.size, trace.dimension
    if n == 0 or kernel == 1:
        return trace.replace_assigned(a.copy())
    idx = np.arange(n)
    radius = np.minimum(kernel // 2, np.minimum(idx, n - 1 - idx))
    prefix = np.zeros((n + 1, d), dtype=np.int64)
    np.cumsum(np.eye(d, dtype=np.int64)[a], axis=0, out=prefix[1:])
    counts = prefix[idx + radius + 1] - prefix[idx - radius]
    best = counts.max(axis=1)
    unique = (counts == best[:, None]).sum(axis=1) == 1
    keep = (counts[idx, a] == best) | ~unique
    return trace.replace_assigned(np.where(keep, a, counts.argmax(axis=1)))


@dataclass(frozen=True)
class TransitionEstimate:
    """Empirical transition matrix with multinomial standard errors.

    ``counts[n, m]`` counts consecutive-block pairs ``m -> n``.
    ``empty_columns`` lists initial states that never occurred; their
    columns are set to the identity.
    """

    matrix: TransitionMatrix
    stderr: np.ndarray
    counts: np.ndarray
    empty_columns: tuple[int, ...]


def extract_transition_matrix(filtered: JumpTrace) -> TransitionEstimate:
    """Column-normalized counts of consecutive ``(from, to)`` block pairs."""
    a = filtered.assigned
    if a.size < 2:
        raise ValueError("trace must contain at least 2 blocks")
    d = filtered.dimension
    counts = np.zeros((d, d), dtype=np.int64)
    np.add.at(counts, (a[1:], a[:-1]), 1)
    totals = counts.sum(axis=0)
    empty = tuple(int(j) for j in np.flatnonzero(totals == 0))
    t = np.where(totals > 0, counts / np.maximum(totals, 1), np.eye(d))
    stderr = np.where(totals > 0, np.sqrt(t * (1.0 - t) / np.maximum(totals, 1)), 0.0)
    if empty:
        warnings.warn(f"no transitions observed out of states {list(empty)}; identity columns used",
                      RuntimeWarning, stacklevel=2)
    matrix = TransitionMatrix(t, provenance={"process": "empirical", "n_pairs": int(a.size - 1),
                                             "empty_columns": list(empty)})
    return TransitionEstimate(matrix, stderr, counts, empty)
