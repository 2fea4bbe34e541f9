"""Spin operators and the decoupled, coupled and extended Hamiltonians.

Conventions used throughout the package
---------------------------------------
- Energies are frequencies in kHz (h = 1).
- Nuclear basis index 0 is ``m = +I``; index ``k`` is ``m = I - k``.
- Electron ordering in the extended basis is (up, down, empty), so the
  extended basis state ``|m> (x) |e>`` sits at index ``3 * k + e``.
- Nuclear Zeeman term is ``-gamma_n * B0 * (cos(theta) Iz + sin(theta) Ix)``,
  electron Zeeman term is ``+gamma_e * B0 * Sz`` (field rotation only tilts the
  nuclear term).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "SpinQuantum",
    "SpinOperators",
    "PhysicalParams",
    "QuadrupoleTensor",
    "HermitianSystem",
    "LabeledEigenstate",
    "ExtendedSystem",
    "ClassificationError",
    "MANIFOLDS",
    "make_spin_operators",
    "electron_operators",
    "quadrupole_operator",
    "build_system_hamiltonian",
    "build_coupled_hamiltonian",
    "build_extended_hamiltonian",
    "extended_projectors",
    "diagonalize",
    "assign_labels",
    "overlap_matrices",
    "flip_flop_admixture",
    "decoupled_overlaps",
]

MANIFOLDS = ("up", "down", "empty")
_UP, _DOWN, _EMPTY = 0, 1, 2


class ClassificationError(RuntimeError):
    """An eigenstate could not be matched to a nominal basis state."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpinQuantum:
    """Hilbert-space dimension ``D = 2I + 1`` of a nuclear spin."""

    dimension: int

    def __post_init__(self) -> None:
        if int(self.dimension) != self.dimension or self.dimension < 2:
            raise ValueError(f"spin dimension must be an integer >= 2, got {self.dimension}")
        object.__setattr__(self, "dimension", int(self.dimension))

    @classmethod
    def from_spin(cls, spin: float | Fraction) -> "SpinQuantum":
        two_i = Fraction(spin) * 2
        if two_i.denominator != 1:
            raise ValueError(f"spin must be integer or half-integer, got {spin}")
        return cls(int(two_i) + 1)

    @property
    def spin(self) -> Fraction:
        return Fraction(self.dimension - 1, 2)

    @property
    def m_values(self) -> np.ndarray:
        """Magnetic quantum numbers in basis order, ``+I`` first."""
        return float(self.spin) - np.arange(self.dimension, dtype=float)

    def index_of(self, m: float) -> int:
        k = float(self.spin) - m
        if abs(k - round(k)) > 1e-9 or not 0 <= round(k) < self.dimension:
            raise ValueError(f"m = {m} is not a valid projection for I = {self.spin}")
        return int(round(k))


@dataclass(frozen=True)
class SpinOperators:
    """Dimensionless angular-momentum matrices (hbar = 1)."""

    ix: np.ndarray
    iy: np.ndarray
    iz: np.ndarray

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter((self.ix, self.iy, self.iz))

    @property
    def dimension(self) -> int:
        return self.iz.shape[0]


def make_spin_operators(sq: SpinQuantum | int) -> SpinOperators:
    """Build ``(Ix, Iy, Iz)`` from the ladder matrix elements.

    ``<m+1|I+|m> = sqrt(I(I+1) - m(m+1))``; with index 0 at ``m = +I`` the
    raising operator sits on the first superdiagonal.
    """
    if not isinstance(sq, SpinQuantum):
        sq = SpinQuantum(sq)
    spin = float(sq.spin)
    m = sq.m_values
    raise_elems = np.sqrt(spin * (spin + 1.0) - m[1:] * (m[1:] + 1.0))
    i_plus = np.diag(raise_elems, k=1).astype(complex)
    i_minus = i_plus.conj().T
    ix = 0.5 * (i_plus + i_minus)
    iy = -0.5j * (i_plus - i_minus)
    iz = np.diag(m).astype(complex)
    return SpinOperators(_frozen(ix), _frozen(iy), _frozen(iz))


def electron_operators() -> SpinOperators:
    """Spin-1/2 operators in (up, down) order."""
    return make_spin_operators(SpinQuantum(2))


@dataclass(frozen=True)
class PhysicalParams:
    """Field, gyromagnetic ratios and hyperfine coupling.

    Attributes
    ----------
    b0 : float
        Static field in tesla.
    gamma_n, gamma_e : float
        Nuclear and electron gyromagnetic ratios in kHz/T.
    hyperfine : float
        Isotropic contact hyperfine coupling ``A`` in kHz.
    theta : float
        Field rotation angle in the zx-plane, radians.
    """

    b0: float = 1.395
    gamma_n: float = 5.55e3
    gamma_e: float = 2.802e7
    hyperfine: float = 9.75e4
    theta: float = 0.0

    @classmethod
    def sb123(cls, **overrides: float) -> "PhysicalParams":
        return cls(**overrides)

    @classmethod
    def ge73(cls, **overrides: float) -> "PhysicalParams":
        base = dict(b0=1.0, gamma_n=-1.4852e3, gamma_e=2.802e7, hyperfine=350.0, theta=0.0)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes: float) -> "PhysicalParams":
        return PhysicalParams(**{**self.as_dict(), **changes})

    def as_dict(self) -> dict[str, float]:
        return dict(
            b0=self.b0,
            gamma_n=self.gamma_n,
            gamma_e=self.gamma_e,
            hyperfine=self.hyperfine,
            theta=self.theta,
        )

    @property
    def nuclear_larmor(self) -> float:
        return self.gamma_n * self.b0


@dataclass(frozen=True)
class QuadrupoleTensor:
    """Traceless symmetric 3x3 quadrupole tensor in kHz (5 free parameters)."""

    qxx: float = 0.0
    qyy: float = 0.0
    qyz: float = 0.0
    qxz: float = 0.0
    qxy: float = 0.0

    PARAM_NAMES = ("qxx", "qyy", "qyz", "qxz", "qxy")

    @classmethod
    def zero(cls) -> "QuadrupoleTensor":
        return cls()

    @classmethod
    def sb123(cls) -> "QuadrupoleTensor":
        """Ionized 123Sb tensor from rotated-field NMR spectroscopy."""
        return cls(qxx=-10.57, qyy=3.06, qyz=5.16, qxz=2.60, qxy=-30.48)

    @classmethod
    def ge73_placeholder(cls) -> "QuadrupoleTensor":
        # No published 73Ge tensor; Sb tensor scaled by the quadrupole-moment ratio (-0.196 b / -0.49 b).
        return cls.sb123().scaled(0.4)

    @classmethod
    def from_params(cls, params: Sequence[float]) -> "QuadrupoleTensor":
        if len(params) != 5:
            raise ValueError("quadrupole tensor needs exactly 5 free parameters")
        return cls(*(float(v) for v in params))

    @classmethod
    def from_matrix(cls, q: np.ndarray, atol: float = 1e-9) -> "QuadrupoleTensor":
        q = np.asarray(q, dtype=float)
        if q.shape != (3, 3):
            raise ValueError("quadrupole tensor must be 3x3")
        scale = max(1.0, float(np.abs(q).max()))
        if np.abs(q - q.T).max() > atol * scale:
            raise ValueError("quadrupole tensor must be symmetric")
        if abs(np.trace(q)) > atol * scale:
            raise ValueError("quadrupole tensor must be traceless")
        return cls(q[0, 0], q[1, 1], q[1, 2], q[0, 2], q[0, 1])

    @property
    def qzz(self) -> float:
        return -(self.qxx + self.qyy)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.qxx, self.qyy, self.qyz, self.qxz, self.qxy])

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.qxx, self.qxy, self.qxz],
                [self.qxy, self.qyy, self.qyz],
                [self.qxz, self.qyz, self.qzz],
            ]
        )

    def scaled(self, factor: float) -> "QuadrupoleTensor":
        return QuadrupoleTensor.from_params(self.params * factor)


def quadrupole_operator(q: QuadrupoleTensor | np.ndarray, ops: SpinOperators) -> np.ndarray:
    """``sum_ab q[a][b] I_a I_b``."""
    qm = q.matrix if isinstance(q, QuadrupoleTensor) else np.asarray(q)
    comps = tuple(ops)
    out = np.zeros_like(ops.iz)
    for a in range(3):
        for b in range(3):
            if qm[a, b] != 0.0:
                out = out + qm[a, b] * (comps[a] @ comps[b])
    return out


@dataclass(frozen=True)
class HermitianSystem:
    """A Hermitian matrix with eigenvalues ascending and phase-fixed eigenvectors."""

    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


def _fix_phases(vecs: np.ndarray) -> np.ndarray:
    # Largest-magnitude component of every column made real and positive.
    idx = np.argmax(np.abs(vecs), axis=0)
    pivots = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(pivots) / pivots)[None, :]


def diagonalize(h: np.ndarray) -> HermitianSystem:
    """Diagonalize a Hermitian matrix and check the accuracy contract."""
    h = np.asarray(h, dtype=complex)
    scale = max(float(np.abs(h).max()), np.finfo(float).tiny)
    if np.abs(h - h.conj().T).max() >= 1e-9 * scale:
        raise ValueError("matrix is not Hermitian")
    h = 0.5 * (h + h.conj().T)
    w, v = np.linalg.eigh(h)
    v = _fix_phases(v)
    recon = (v * w[None, :]) @ v.conj().T
    resid = np.abs(h - recon).max()
    if resid >= 1e-8 * scale:
        raise np.linalg.LinAlgError(f"eigendecomposition residual {resid:.3e} exceeds contract")
    return HermitianSystem(_frozen(h), _frozen(w), _frozen(v))


def build_system_hamiltonian(
    p: PhysicalParams, q: QuadrupoleTensor, sq: SpinQuantum
) -> HermitianSystem:
    """Decoupled (ionized) nuclear Hamiltonian, diagonalized."""
    return diagonalize(_system_matrix(p, q, make_spin_operators(sq)))


def _system_matrix(p: PhysicalParams, q: QuadrupoleTensor, ops: SpinOperators) -> np.ndarray:
    zeeman = -p.gamma_n * p.b0 * (np.cos(p.theta) * ops.iz + np.sin(p.theta) * ops.ix)
    return zeeman + quadrupole_operator(q, ops)


def _coupled_matrix(p: PhysicalParams, q: QuadrupoleTensor, ops: SpinOperators) -> np.ndarray:
    s = electron_operators()
    eye_n = np.eye(ops.dimension)
    h = np.kron(_system_matrix(p, q, ops), np.eye(2))
    h = h + p.gamma_e * p.b0 * np.kron(eye_n, s.iz)
    h = h + p.hyperfine * sum(np.kron(a, b) for a, b in zip(ops, s))
    return h


def build_coupled_hamiltonian(
    p: PhysicalParams, q: QuadrupoleTensor, sq: SpinQuantum
) -> np.ndarray:
    """``H_S + H_A + H_C`` on the 2D-dimensional neutral space, basis ``|m>(x)(up, down)``."""
    return _coupled_matrix(p, q, make_spin_operators(sq))


def extended_projectors(sq: SpinQuantum) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(P_updown, P_empty)`` with shapes ``(2D, 3D)`` and ``(D, 3D)``."""
    eye_n = np.eye(sq.dimension)
    p_ud = np.kron(eye_n, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    p_empty = np.kron(eye_n, np.array([[0.0, 0.0, 1.0]]))
    return p_ud, p_empty


def assign_labels(overlaps: np.ndarray) -> np.ndarray:
    """Match eigenvectors (rows) to nominal basis states (columns).

    Greedy max-overlap first; falls back to an optimal assignment when the
    greedy pass produces a clash or any overlap <= 0.5.

    Returns
    -------
    numpy.ndarray
        ``labels[i]`` is the column assigned to row ``i``.

    Raises
    ------
    ClassificationError
        If even the optimal assignment leaves an overlap <= 0.5.
    """
    overlaps = np.asarray(overlaps, dtype=float)
    n = overlaps.shape[0]
    greedy = np.argmax(overlaps, axis=1)
    best = overlaps[np.arange(n), greedy]
    if len(set(greedy.tolist())) == n and np.all(best > 0.5):
        return greedy
    rows, cols = linear_sum_assignment(overlaps, maximize=True)
    labels = np.empty(n, dtype=int)
    labels[rows] = cols
    chosen = overlaps[np.arange(n), labels]
    bad = np.flatnonzero(chosen <= 0.5)
    if bad.size:
        i = int(bad[0])
        raise ClassificationError(
            f"eigenstate {i} has best overlap {chosen[i]:.4f} <= 0.5 with its nominal basis state "
            f"{int(labels[i])}"
        )
    return labels


@dataclass(frozen=True)
class LabeledEigenstate:
    manifold: str
    m: float
    energy: float
    vector: np.ndarray
    overlap: float


@dataclass(frozen=True)
class ExtendedSystem:
    """The 3D-dimensional Hamiltonian with manifold-labeled eigenstates."""

    sq: SpinQuantum
    hamiltonian: np.ndarray
    projector_updown: np.ndarray
    projector_empty: np.ndarray
    eigenstates: tuple[LabeledEigenstate, ...]
    _by_manifold: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {name: [None] * self.sq.dimension for name in MANIFOLDS}
        for st in self.eigenstates:
            index[st.manifold][self.sq.index_of(st.m)] = st
        self._by_manifold.update(index)

    def states(self, manifold: str) -> list[LabeledEigenstate]:
        """Eigenstates of one manifold, in basis order (``m = +I`` first)."""
        return list(self._by_manifold[manifold])

    def vectors(self, manifold: str) -> np.ndarray:
        """``(D, 3D)`` array; row ``k`` is the eigenvector labeled ``m = I - k``."""
        return np.array([st.vector for st in self._by_manifold[manifold]])

    def energies(self, manifold: str) -> np.ndarray:
        return np.array([st.energy for st in self._by_manifold[manifold]])

    def electron_component(self, manifold: str, electron: str) -> np.ndarray:
        """Nuclear amplitudes of each manifold eigenvector in one electron subspace, ``(D, D)``."""
        e = MANIFOLDS.index(electron)
        return self.vectors(manifold)[:, e::3]


def build_extended_hamiltonian(
    p: PhysicalParams, q: QuadrupoleTensor, sq: SpinQuantum
) -> ExtendedSystem:
    """Assemble ``P_ud^T (H_S + H_A + H_C) P_ud + P_0^T H_S P_0`` and label its eigenstates.

    The empty block and the coupled block are exactly decoupled, so each is
    diagonalized on its own; this keeps cross-block amplitudes identically
    zero even when levels of different blocks happen to be degenerate.
    """
    ops = make_spin_operators(sq)
    d = sq.dimension
    p_ud, p_empty = extended_projectors(sq)
    h_s = _system_matrix(p, q, ops)
    h_c = _coupled_matrix(p, q, ops)
    h = p_ud.T @ h_c @ p_ud + p_empty.T @ h_s @ p_empty

    coupled = diagonalize(p_ud @ h @ p_ud.T)
    empty = diagonalize(p_empty @ h @ p_empty.T)

    states: list[LabeledEigenstate] = []
    # coupled block basis index 2k + e, e in (up, down)
    cov = np.abs(coupled.eigenvectors.T) ** 2
    labels = assign_labels(cov)
    for i, lab in enumerate(labels):
        k, e = divmod(int(lab), 2)
        states.append(
            LabeledEigenstate(
                manifold=MANIFOLDS[e],
                m=float(sq.spin) - k,
                energy=float(coupled.eigenvalues[i]),
                vector=_frozen(p_ud.T @ coupled.eigenvectors[:, i]),
                overlap=float(cov[i, lab]),
            )
        )
    eov = np.abs(empty.eigenvectors.T) ** 2
    labels = assign_labels(eov)
    for i, k in enumerate(labels):
        states.append(
            LabeledEigenstate(
                manifold="empty",
                m=float(sq.spin) - int(k),
                energy=float(empty.eigenvalues[i]),
                vector=_frozen(p_empty.T @ empty.eigenvectors[:, i]),
                overlap=float(eov[i, k]),
            )
        )
    states.sort(key=lambda st: st.energy)
    return ExtendedSystem(
        sq=sq,
        hamiltonian=_frozen(h),
        projector_updown=_frozen(p_ud),
        projector_empty=_frozen(p_empty),
        eigenstates=tuple(states),
    )


def overlap_matrices(es: ExtendedSystem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Squared overlaps of each manifold's eigenstates with its nominal basis states.

    Returns ``(down, up, empty)``; in each ``D x D`` matrix row ``i`` is the
    eigenstate labeled by basis index ``i`` and column ``j`` the tensor state
    ``|m_j> (x) |e>`` of the same electron configuration.
    """
    return tuple(
        np.abs(es.electron_component(name, name)) ** 2 for name in ("down", "up", "empty")
    )


def flip_flop_admixture(es: ExtendedSystem) -> float:
    """Largest weight any coupled eigenstate carries in the opposite electron subspace."""
    down = np.sum(np.abs(es.electron_component("down", "up")) ** 2, axis=1)
    up = np.sum(np.abs(es.electron_component("up", "down")) ** 2, axis=1)
    return float(max(down.max(), up.max()))


def decoupled_overlaps(es: ExtendedSystem) -> tuple[np.ndarray, np.ndarray]:
    """Nuclear overlap ``|<m_empty|m_down>|^2`` and ``|<m_empty|m_up>|^2`` per m.

    Both electron components of the coupled state are projected onto the
    decoupled nuclear eigenvector, so these are the diagonals of the coupling
    and decoupling transition matrices.
    """
    empty = es.electron_component("empty", "empty")
    out = []
    for name in ("down", "up"):
        amp_u = np.einsum("ij,ij->i", empty.conj(), es.electron_component(name, "up"))
        amp_d = np.einsum("ij,ij->i", empty.conj(), es.electron_component(name, "down"))
        out.append(np.abs(amp_u) ** 2 + np.abs(amp_d) ** 2)
    return out[0], out[1]
