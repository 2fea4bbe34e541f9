"""Measurement-induced transition matrices and their generators.

All matrices are column-stochastic: ``t[n, m] = P(final n | initial m)``, so
a sequence of events composes right-to-left as ordinary matrix products.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg

from .spin import (
    ExtendedSystem,
    PhysicalParams,
    QuadrupoleTensor,
    SpinQuantum,
    build_extended_hamiltonian,
)

__all__ = [
    "TransitionMatrix",
    "GeneratorMatrix",
    "NonEmbeddableError",
    "StochasticityError",
    "DEFAULT_KAPPA",
    "transition_couple",
    "transition_decouple",
    "compound_in_out",
    "fractional_power",
    "extract_generator",
    "bare_matrix",
    "t_qnd",
    "model_matrices",
]

DEFAULT_KAPPA = 4.47
COLUMN_SUM_TOL = 1e-10


class StochasticityError(ValueError):
    pass


class NonEmbeddableError(ArithmeticError):
    """The matrix has no usable real principal logarithm."""


def _labels_for(d: int) -> np.ndarray:
    return SpinQuantum(d).m_values


@dataclass(frozen=True)
class TransitionMatrix:
    """Column-stochastic flip-probability matrix."""

    data: np.ndarray
    labels: np.ndarray | None = None
    kappa: float | None = None
    provenance: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        t = np.array(self.data, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError(f"transition matrix must be square, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise StochasticityError("transition matrix has non-finite entries")
        # round-off negatives from products/exponentials are snapped to zero
        t[(t < 0.0) & (t >= -1e-12)] = 0.0
        if t.min() < 0.0 or t.max() > 1.0 + 1e-12:
            raise StochasticityError(f"entries outside [0, 1]: min {t.min():.3e}, max {t.max():.3e}")
        dev = np.abs(t.sum(axis=0) - 1.0).max()
        if dev > COLUMN_SUM_TOL:
            raise StochasticityError(f"column sums deviate from 1 by {dev:.3e}")
        t.setflags(write=False)
        object.__setattr__(self, "data", t)
        labels = _labels_for(t.shape[0]) if self.labels is None else np.asarray(self.labels, float)
        if labels.shape != (t.shape[0],):
            raise ValueError("labels must match the matrix dimension")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def dimension(self) -> int:
        return self.data.shape[0]

    @classmethod
    def identity(cls, d: int) -> "TransitionMatrix":
        return cls(np.eye(d))

    @property
    def flip_probabilities(self) -> np.ndarray:
        """Probability of leaving each initial state."""
        return 1.0 - np.diag(self.data)

    def band(self, dm: int) -> np.ndarray:
        """Probabilities of ``|delta index| == dm`` jumps out of each initial state."""
        d = self.dimension
        out = np.zeros(d)
        for m in range(d):
            for n in (m - dm, m + dm):
                if 0 <= n < d and n != m:
                    out[m] += self.data[n, m]
        return out

    def off_diagonal(self) -> np.ndarray:
        return self.data - np.diag(np.diag(self.data))


@dataclass(frozen=True)
class GeneratorMatrix:
    """Continuous-time generator ``G`` with ``T = exp(G)`` per event.

    ``regularized_mass[j]`` is the total negative off-diagonal rate removed
    from column ``j``; ``raw`` keeps the unregularized principal logarithm.
    """

    data: np.ndarray
    raw: np.ndarray
    n_tunnel: float
    regularized_mass: np.ndarray
    round_trip_error: float
    labels: np.ndarray | None = None

    REGULARIZATION_WARN = 1e-3

    def __post_init__(self) -> None:
        if self.labels is None:
            object.__setattr__(self, "labels", _labels_for(self.data.shape[0]))

    @property
    def dimension(self) -> int:
        return self.data.shape[0]

    @property
    def heavily_regularized(self) -> bool:
        return bool(np.any(self.regularized_mass > self.REGULARIZATION_WARN))


def _normalized(t: np.ndarray, tol: float, what: str) -> np.ndarray:
    dev = np.abs(t.sum(axis=0) - 1.0).max()
    if dev > tol:
        raise StochasticityError(f"{what}: column sums deviate from 1 by {dev:.3e}")
    return t / t.sum(axis=0, keepdims=True)


def _overlap_matrix(es: ExtendedSystem, initial: str) -> np.ndarray:
    empty = es.electron_component("empty", "empty")
    t = np.zeros((es.sq.dimension,) * 2)
    for electron in ("down", "up"):
        amp = empty.conj() @ es.electron_component(initial, electron).T
        t += np.abs(amp) ** 2
    return t


def transition_couple(es: ExtendedSystem) -> TransitionMatrix:
    """Flip probabilities for loading a down electron onto the ionized nucleus.

    ``t[n, m] = |<n_empty|P_0 P_down^T|m_down>|^2 + |<n_empty|P_0 P_up^T|m_down>|^2``
    """
    t = _normalized(_overlap_matrix(es, "down"), 1e-8, "coupling matrix")
    return TransitionMatrix(t, provenance={"process": "couple"})


def transition_decouple(es: ExtendedSystem) -> TransitionMatrix:
    """Flip probabilities for an up electron tunnelling off the nucleus."""
    t = _normalized(_overlap_matrix(es, "up"), 1e-8, "decoupling matrix")
    return TransitionMatrix(t, provenance={"process": "decouple"})


def compound_in_out(
    tc: TransitionMatrix, td: TransitionMatrix, order: str = "couple_first"
) -> TransitionMatrix:
    """One tunnel-in plus tunnel-out event.

    ``order="couple_first"`` returns ``td @ tc``; ``"decouple_first"`` returns
    ``tc @ td``.
    """
    if tc.dimension != td.dimension:
        raise ValueError(f"dimension mismatch: {tc.dimension} vs {td.dimension}")
    if order == "couple_first":
        t = td.data @ tc.data
    elif order == "decouple_first":
        t = tc.data @ td.data
    else:
        raise ValueError(f"unknown order {order!r}")
    return TransitionMatrix(_normalized(t, 1e-9, "compound"), labels=tc.labels,
                            provenance={"process": "in_out", "order": order})


def _real_log(t: np.ndarray, what: str) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        log_t = scipy.linalg.logm(t)
    if not np.all(np.isfinite(log_t)):
        raise NonEmbeddableError(f"{what}: matrix logarithm is not finite (singular matrix)")
    imag = float(np.abs(np.imag(log_t)).max())
    if imag > 1e-6:
        raise NonEmbeddableError(
            f"{what}: principal logarithm has imaginary residue {imag:.3e}; "
            "matrix is not embeddable in a real continuous-time chain"
        )
    return np.real(log_t)


def fractional_power(t: TransitionMatrix, kappa: float) -> TransitionMatrix:
    """``t ** kappa`` through the principal generator, ``exp(kappa * log t)``.

    Negative entries produced by the exponential are clipped and columns
    renormalized; clipping more than 1e-6 probability in any column means the
    generator route is not trustworthy and raises :class:`NonEmbeddableError`.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if kappa == 0:
        return TransitionMatrix.identity(t.dimension)
    g = _real_log(t.data, "fractional power")
    out = scipy.linalg.expm(kappa * g)
    clipped = np.where(out < 0.0, -out, 0.0).sum(axis=0)
    if clipped.max() > 1e-6:
        raise NonEmbeddableError(
            f"fractional power: clipping removes {clipped.max():.3e} probability from column "
            f"{int(np.argmax(clipped))}; matrix is not embeddable"
        )
    out = np.clip(out, 0.0, None)
    out /= out.sum(axis=0, keepdims=True)
    return TransitionMatrix(out, labels=t.labels, kappa=float(kappa),
                            provenance={"process": "fractional_power"})


def extract_generator(t_obs: TransitionMatrix, n_tunnel: float) -> GeneratorMatrix:
    """Recover the per-event generator from a matrix compounded over ``n_tunnel`` events.

    Raises
    ------
    NonEmbeddableError
        If ``t_obs`` has a zero/negative diagonal entry, an eigenvalue on the
        closed negative real axis, or if the logarithm fails to round-trip.
    """
    if n_tunnel <= 0:
        raise ValueError("n_tunnel must be positive")
    t = t_obs.data
    diag = np.diag(t)
    if np.any(diag <= 0.0):
        raise NonEmbeddableError(
            f"diagonal entry {int(np.argmin(diag))} is {diag.min():.3e}; principal log requires a "
            "strictly positive diagonal"
        )
    eig = np.linalg.eigvals(t)
    on_axis = (np.abs(eig.imag) <= 1e-12 * max(1.0, np.abs(eig).max())) & (eig.real <= 0.0)
    if np.any(on_axis):
        bad = eig[on_axis][0].real
        raise NonEmbeddableError(
            f"eigenvalue {bad:.6g} lies on the closed negative real axis; no real principal logarithm"
        )
    raw = _real_log(t, "generator extraction") / n_tunnel
    rt = float(np.abs(scipy.linalg.expm(n_tunnel * raw) - t).max())
    if rt >= 1e-8:
        raise NonEmbeddableError(f"generator round trip error {rt:.3e} >= 1e-8")

    g = raw.copy()
    off = ~np.eye(g.shape[0], dtype=bool)
    negative = np.where(off & (g < 0.0), g, 0.0)
    g -= negative
    g[np.diag_indices_from(g)] += negative.sum(axis=0)
    gen = GeneratorMatrix(
        data=g,
        raw=raw,
        n_tunnel=float(n_tunnel),
        regularized_mass=0.0 - negative.sum(axis=0),
        round_trip_error=rt,
        labels=t_obs.labels,
    )
    if gen.heavily_regularized:
        warnings.warn(
            f"generator regularization removed up to {gen.regularized_mass.max():.3e} rate per column",
            RuntimeWarning,
            stacklevel=2,
        )
    return gen


def bare_matrix(g: GeneratorMatrix) -> TransitionMatrix:
    """Per-event Markov matrix ``exp(G)``."""
    t = scipy.linalg.expm(g.data)
    t = np.clip(t, 0.0, None)
    t /= t.sum(axis=0, keepdims=True)
    return TransitionMatrix(t, labels=g.labels, provenance={"process": "bare", "n_tunnel": g.n_tunnel})


def model_matrices(
    p: PhysicalParams,
    q: QuadrupoleTensor,
    sq: SpinQuantum,
    kappa: float = DEFAULT_KAPPA,
    order: str = "couple_first",
) -> dict[str, TransitionMatrix]:
    """Coupling, decoupling, in-out and per-QND-cycle matrices for one parameter set."""
    es = build_extended_hamiltonian(p, q, sq)
    tc = transition_couple(es)
    td = transition_decouple(es)
    tio = compound_in_out(tc, td, order=order)
    tq = fractional_power(tio, kappa)
    return {"t_couple": tc, "t_decouple": td, "t_in_out": tio, "t_qnd": tq}


def t_qnd(
    p: PhysicalParams,
    q: QuadrupoleTensor,
    sq: SpinQuantum,
    kappa: float = DEFAULT_KAPPA,
    order: str = "couple_first",
) -> TransitionMatrix:
    """Per-QND-cycle transition matrix ``(T_decouple T_couple) ** kappa``."""
    return model_matrices(p, q, sq, kappa, order)["t_qnd"]
