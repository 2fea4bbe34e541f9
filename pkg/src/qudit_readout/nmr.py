"""NMR transition frequencies versus field angle and quadrupole-tensor fitting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, linear_sum_assignment

from .spin import (
    PhysicalParams,
    QuadrupoleTensor,
    SpinQuantum,
    ClassificationError,
    assign_labels,
    electron_operators,
    make_spin_operators,
    quadrupole_operator,
)

__all__ = [
    "CHARGE_STATES",
    "LevelTrackingError",
    "FitError",
    "RankDeficientError",
    "NmrSpectrumSet",
    "QuadrupoleFit",
    "nmr_frequencies",
    "nmr_frequency_curve",
    "splittings",
    "synth_spectra",
    "fit_quadrupole",
]

CHARGE_STATES = ("ionized", "neutral")
TRACK_STEP = np.deg2rad(1.0)
TRACK_MARGIN = 0.1


class LevelTrackingError(RuntimeError):
    pass


class FitError(RuntimeError):
    pass


class RankDeficientError(FitError):
    def __init__(self, message: str, direction: np.ndarray):
        super().__init__(message)
        self.direction = direction


class _Model:
    """Angle-dependent Hamiltonian pieces for one spin and charge state."""

    def __init__(self, p: PhysicalParams, sq: SpinQuantum, charge_state: str):
        if charge_state not in CHARGE_STATES:
            raise ValueError(f"charge_state must be one of {CHARGE_STATES}, got {charge_state!r}")
        self.p = p
        self.sq = sq
        self.neutral = charge_state == "neutral"
        ops = make_spin_operators(sq)
        self.ops = ops
        ix, iy, iz = ops
        self.q_derivs = [
            ix @ ix - iz @ iz,
            iy @ iy - iz @ iz,
            iy @ iz + iz @ iy,
            ix @ iz + iz @ ix,
            ix @ iy + iy @ ix,
        ]
        if self.neutral:
            s = electron_operators()
            d = sq.dimension
            self.static = p.gamma_e * p.b0 * np.kron(np.eye(d), s.iz) + p.hyperfine * sum(
                np.kron(a, b) for a, b in zip(ops, s)
            )
            self.q_derivs = [np.kron(m, np.eye(2)) for m in self.q_derivs]

    def lift(self, m: np.ndarray) -> np.ndarray:
        return np.kron(m, np.eye(2)) if self.neutral else m

    def zeeman_axis(self, theta: float) -> np.ndarray:
        return self.lift(-(np.cos(theta) * self.ops.iz + np.sin(theta) * self.ops.ix))

    def hamiltonians(self, q: QuadrupoleTensor, thetas: np.ndarray, larmor: float) -> np.ndarray:
        """Stack of Hamiltonians ``(len(thetas), N, N)``."""
        base = self.lift(quadrupole_operator(q, self.ops))
        if self.neutral:
            base = base + self.static
        z = self.lift(-self.ops.iz)
        x = self.lift(-self.ops.ix)
        c = larmor * np.cos(thetas)[:, None, None]
        s = larmor * np.sin(thetas)[:, None, None]
        return base[None] + c * z[None] + s * x[None]

    def seed_labels(self, vecs: np.ndarray) -> np.ndarray:
        """Order eigenvectors at theta = 0 by nominal basis label."""
        labels = assign_labels(np.abs(vecs.T) ** 2)
        order = np.empty_like(labels)
        order[labels] = np.arange(labels.size)
        return order

    def transition_levels(self, energies: np.ndarray) -> np.ndarray:
        # neutral block is ordered (m, up), (m, down); keep the down manifold
        return energies[..., 1::2] if self.neutral else energies


def _follow(ov: np.ndarray, theta: float) -> np.ndarray:
    """Permutation taking new eigenvectors onto the previous ones, with a margin check."""
    perm = np.argmax(ov, axis=1)
    if np.unique(perm).size != perm.size:
        rows, cols = linear_sum_assignment(ov, maximize=True)
        perm = np.empty_like(cols)
        perm[rows] = cols
    best = ov[np.arange(perm.size), perm]
    masked = ov.copy()
    masked[np.arange(perm.size), perm] = -np.inf
    margin = best - masked.max(axis=1)
    if margin.min() < TRACK_MARGIN:
        raise LevelTrackingError(
            f"ambiguous level tracking at theta = {np.rad2deg(theta):.3f} deg "
            f"(overlap margin {margin.min():.3f} < {TRACK_MARGIN}); use a finer angle step"
        )
    return perm


def _track(
    model: _Model,
    q: QuadrupoleTensor,
    angles: np.ndarray,
    larmor: float,
    max_step: float = TRACK_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    """Adiabatically follow eigenstates from theta = 0 to every requested angle.

    Returns energies ``(n_angles, N)`` and eigenvectors ``(n_angles, N, N)``
    with column ``j`` always the state seeded by basis label ``j``.
    """
    angles = np.asarray(angles, dtype=float)
    n_dim = model.lift(model.ops.iz).shape[0]
    energies = np.empty((angles.size, n_dim))
    vectors = np.empty((angles.size, n_dim, n_dim), dtype=complex)

    w0, v0 = np.linalg.eigh(model.hamiltonians(q, np.zeros(1), larmor)[0])
    order = model.seed_labels(v0)
    w0, v0 = w0[order], v0[:, order]

    for sign in (1.0, -1.0):
        targets = np.flatnonzero(angles >= 0.0 if sign > 0 else angles < 0.0)
        if targets.size == 0:
            continue
        stop = float(np.max(np.abs(angles[targets])))
        n_steps = int(np.ceil(stop / max_step)) if stop > 0 else 0
        grid = np.union1d(np.linspace(0.0, stop, n_steps + 1), np.abs(angles[targets]))
        grid = grid[grid > 0.0]
        ws, vs = np.linalg.eigh(model.hamiltonians(q, sign * grid, larmor))
        slot = {0.0: -1}
        slot.update({float(t): i for i, t in enumerate(grid)})
        tracked_w = np.empty((grid.size, n_dim))
        tracked_v = np.empty((grid.size, n_dim, n_dim), dtype=complex)
        v = v0
        for i in range(grid.size):
            ov = np.abs(v.conj().T @ vs[i]) ** 2
            perm = _follow(ov, sign * grid[i])
            v = vs[i][:, perm]
            tracked_w[i] = ws[i][perm]
            tracked_v[i] = v
        for idx in targets:
            j = slot[abs(float(angles[idx]))]
            energies[idx] = w0 if j < 0 else tracked_w[j]
            vectors[idx] = v0 if j < 0 else tracked_v[j]
    return energies, vectors


def _transitions(levels: np.ndarray) -> np.ndarray:
    return np.abs(np.diff(levels, axis=-1))


def nmr_frequency_curve(
    p: PhysicalParams,
    q: QuadrupoleTensor,
    sq: SpinQuantum,
    angles: Sequence[float],
    charge_state: str = "ionized",
    max_step: float = TRACK_STEP,
) -> np.ndarray:
    """NMR frequencies ``(len(angles), D-1)`` in kHz; ``p.theta`` is ignored.

    Column ``k`` is the ``m -> m - 1`` transition with ``m = I - k``, where
    ``m`` labels are fixed at theta = 0 and carried along by eigenvector
    continuity.
    """
    model = _Model(p, sq, charge_state)
    energies, _ = _track(model, q, np.asarray(angles, float), p.nuclear_larmor, max_step)
    return _transitions(model.transition_levels(energies))


def nmr_frequencies(
    p: PhysicalParams, q: QuadrupoleTensor, sq: SpinQuantum, charge_state: str = "ionized"
) -> np.ndarray:
    """The ``D-1`` NMR frequencies at field angle ``p.theta``."""
    return nmr_frequency_curve(p, q, sq, [p.theta], charge_state)[0]


def splittings(freqs: Sequence[float]) -> tuple[float, float]:
    """First and second order quadrupole splittings, mean first/second differences."""
    f = np.asarray(freqs, dtype=float)
    if f.ndim != 1 or f.size < 3:
        raise ValueError("need at least 3 transition frequencies")
    return float(np.mean(np.diff(f))), float(np.mean(np.diff(f, n=2)))


@dataclass(frozen=True)
class NmrSpectrumSet:
    """Transition frequencies measured at several field angles.

    ``freqs`` and ``sigma`` have shape ``(n_angles, D-1)``; angles are radians.
    """

    angles: np.ndarray
    freqs: np.ndarray
    sigma: np.ndarray
    charge_state: str = "ionized"

    def __post_init__(self) -> None:
        angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        freqs = np.atleast_2d(np.asarray(self.freqs, dtype=float))
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), freqs.shape).copy()
        if freqs.shape[0] != angles.size:
            raise ValueError("need one row of frequencies per angle")
        if freqs.shape[1] < 1:
            raise ValueError("empty frequency rows")
        if np.any(sigma <= 0.0):
            raise ValueError("sigma must be positive")
        if self.charge_state not in CHARGE_STATES:
            raise ValueError(f"unknown charge state {self.charge_state!r}")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dimension(self) -> int:
        return self.freqs.shape[1] + 1


def synth_spectra(
    p: PhysicalParams,
    q: QuadrupoleTensor,
    sq: SpinQuantum,
    angles: Sequence[float],
    noise_sigma: float,
    seed: int,
    charge_state: str = "ionized",
) -> NmrSpectrumSet:
    """Forward-model spectra plus i.i.d. Gaussian noise.

    With ``noise_sigma == 0`` the reported sigma is 1 kHz so the set stays a
    valid weighted-fit input.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    exact = nmr_frequency_curve(p, q, sq, angles, charge_state)
    rng = np.random.default_rng(seed)
    noisy = exact + rng.normal(0.0, noise_sigma, size=exact.shape) if noise_sigma > 0 else exact
    sigma = np.full(exact.shape, noise_sigma if noise_sigma > 0 else 1.0)
    return NmrSpectrumSet(np.asarray(angles, float), noisy, sigma, charge_state)


@dataclass(frozen=True)
class QuadrupoleFit:
    tensor: QuadrupoleTensor
    std_errors: np.ndarray
    covariance: np.ndarray
    residual_rms: float
    chi2: float
    n_points: int
    n_iterations: int
    larmor: float
    larmor_std_error: float | None = None

    @property
    def mirror(self) -> QuadrupoleTensor:
        """Spectrally identical tensor with ``qxy`` and ``qyz`` negated.

        Field rotation confined to the zx-plane cannot tell the two apart.
        """
        t = self.tensor
        return QuadrupoleTensor(t.qxx, t.qyy, -t.qyz, t.qxz, -t.qxy)


def _residuals_and_jac(model: _Model, data: NmrSpectrumSet, x: np.ndarray, fit_larmor: bool):
    q = QuadrupoleTensor.from_params(x[:5])
    larmor = x[5] if fit_larmor else model.p.nuclear_larmor
    energies, vectors = _track(model, q, data.angles, larmor)
    levels = model.transition_levels(energies)
    diffs = np.diff(levels, axis=1)
    f = np.abs(diffs)
    sgn = np.sign(diffs)
    resid = ((f - data.freqs) / data.sigma).ravel()

    derivs = list(model.q_derivs)
    n_par = 5 + int(fit_larmor)
    jac = np.empty((data.angles.size, data.freqs.shape[1], n_par))
    for a, theta in enumerate(data.angles):
        v = vectors[a]
        ops = derivs + ([model.zeeman_axis(theta)] if fit_larmor else [])
        # Hellmann-Feynman: dE_k/dx = <v_k| dH/dx |v_k>
        de = np.stack([np.real(np.einsum("ik,ij,jk->k", v.conj(), op, v)) for op in ops], axis=1)
        de = model.transition_levels(de.T).T
        jac[a] = sgn[a][:, None] * np.diff(de, axis=0)
    jac /= data.sigma[:, :, None]
    return resid, jac.reshape(-1, n_par)


def _start_points(init: QuadrupoleTensor) -> list[np.ndarray]:
    x0 = init.params
    if init.qxy != 0.0 or init.qyz != 0.0:
        return [x0]
    # qxy and qyz only act at second order under zx-plane rotation, so the
    # zero tensor is a saddle in those directions; start off it instead.
    starts = []
    for dyz in (10.0, -10.0):
        x = x0.copy()
        x[4] += 10.0
        x[2] += dyz
        starts.append(x)
    return starts


def _check_rank(jmat: np.ndarray, rcond: float, fit_larmor: bool) -> np.ndarray:
    """Return singular values/vectors of the weighted Jacobian or raise if singular."""
    _, s, vt = np.linalg.svd(jmat, full_matrices=False)
    if s[-1] <= rcond * s[0]:
        names = list(QuadrupoleTensor.PARAM_NAMES) + (["larmor"] if fit_larmor else [])
        direction = vt[-1]
        desc = ", ".join(f"{n}={c:+.3f}" for n, c in zip(names, direction))
        raise RankDeficientError(
            f"rank-deficient Jacobian (singular value ratio {s[-1] / s[0]:.2e}); "
            f"undetermined direction: {desc}",
            direction,
        )
    return s, vt


def fit_quadrupole(
    data: NmrSpectrumSet,
    p0: PhysicalParams,
    init: QuadrupoleTensor | None = None,
    fit_larmor: bool = False,
    max_iterations: int = 200,
    rcond: float = 1e-9,
) -> QuadrupoleFit:
    """Weighted nonlinear least-squares fit of the five free tensor components.

    Parameters
    ----------
    data : NmrSpectrumSet
        Observed frequencies, with angles in radians.
    p0 : PhysicalParams
        Field and gyromagnetic ratios; ``gamma_n * b0`` is held fixed unless
        ``fit_larmor`` adds it as a sixth (nuisance) parameter.
    init : QuadrupoleTensor, optional
        Starting tensor, zero by default. Its ``qxy``/``qyz`` sign selects
        which of the two mirror-equivalent solutions is returned; with no
        sign information the ``qxy <= 0`` branch is reported.

    Raises
    ------
    RankDeficientError
        If the Jacobian at the optimum is (numerically) singular; the
        offending parameter direction is attached as ``.direction``.
    FitError
        If the optimizer does not converge within ``max_iterations``.
    """
    init = QuadrupoleTensor.zero() if init is None else init
    sq = SpinQuantum(data.dimension)
    model = _Model(p0, sq, data.charge_state)
    larmor0 = p0.nuclear_larmor

    starts = _start_points(init)
    if fit_larmor:
        starts = [np.append(x0, larmor0) for x0 in starts]
    # under-determined geometry shows up at any generic point, not just the optimum
    _check_rank(_residuals_and_jac(model, data, starts[0], fit_larmor)[1], rcond, fit_larmor)

    best = None
    failures = []
    for x0 in starts:
        cache = {}

        def fun(x):
            key = x.tobytes()
            if key not in cache:
                cache.clear()
                cache[key] = _residuals_and_jac(model, data, x, fit_larmor)
            return cache[key][0]

        def jac(x):
            fun(x)
            return cache[x.tobytes()][1]

        try:
            res = least_squares(
                fun, x0, jac=jac, method="trf", ftol=1e-10, xtol=1e-10, gtol=1e-12,
                max_nfev=max_iterations, x_scale="jac",
            )
        except (LevelTrackingError, ClassificationError) as exc:
            failures.append(str(exc))
            continue
        if res.status <= 0:
            failures.append(res.message)
            continue
        if best is None or res.cost < best.cost - 1e-12 * max(1.0, best.cost):
            best = res
    if best is None:
        detail = "; ".join(failures)
        raise FitError(f"quadrupole fit did not converge within {max_iterations} iterations: {detail}")

    x = best.x.copy()
    hint = init.qxy if init.qxy != 0.0 else init.qyz
    current = x[4] if init.qxy != 0.0 else x[2]
    if (hint != 0.0 and np.sign(current) != np.sign(hint)) or (hint == 0.0 and x[4] > 0.0):
        x[2], x[4] = -x[2], -x[4]

    resid, jmat = _residuals_and_jac(model, data, x, fit_larmor)
    s, vt = _check_rank(jmat, rcond, fit_larmor)
    cov_full = (vt.T / s**2) @ vt
    std = np.sqrt(np.diag(cov_full))
    f_model = resid * data.sigma.ravel() + data.freqs.ravel()
    raw = f_model - data.freqs.ravel()
    return QuadrupoleFit(
        tensor=QuadrupoleTensor.from_params(x[:5]),
        std_errors=std[:5],
        covariance=cov_full[:5, :5],
        residual_rms=float(np.sqrt(np.mean(raw**2))),
        chi2=float(np.sum(resid**2)),
        n_points=resid.size,
        n_iterations=int(best.nfev),
        larmor=float(x[5]) if fit_larmor else larmor0,
        larmor_std_error=float(std[5]) if fit_larmor else None,
    )
