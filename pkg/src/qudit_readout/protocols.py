"""Monte-Carlo simulation of repeated (RR) and adaptive (AR) QND readout.

Each trial draws a uniform initial nuclear state and runs one readout. The
hidden state evolves by draws from the per-cycle transition matrix; an
imperfect ancilla reports a blip with probability ``p_tp`` when the probed
state holds the nucleus and ``p_fp`` otherwise.

Trials are simulated in vectorized batches. All randomness comes from
:class:`~qudit_readout.streams.CounterStreams`, indexed by trial number and a
per-trial step counter, so results are bit-identical for any batch size or
worker count.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .streams import CounterStreams
from .transitions import DEFAULT_KAPPA, TransitionMatrix

__all__ = [
    "AncillaModel",
    "ProtocolConfig",
    "SimResult",
    "SweepRow",
    "FP_RATIO",
    "simulate",
    "simulate_rr",
    "simulate_ar",
    "ancilla_sweep",
    "assign_by_counts",
    "tie_break_priority",
]

logger = logging.getLogger(__name__)

# p_fp / (1 - p_tp) of the measured ancilla, 0.019 / 0.032
FP_RATIO = 0.594
BATCH = 1 << 15

# draw slots within one probe step
_EVOLVE, _BLIP, _FP_TUNNEL, _POST = 0, 1, 2, 3
_SLOTS = 4


@dataclass(frozen=True)
class AncillaModel:
    p_tp: float = 0.968
    p_fp: float = 0.019
    fp_tunnel_prob: float = 0.0

    def __post_init__(self) -> None:
        for name in ("p_tp", "p_fp", "fp_tunnel_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.p_tp < self.p_fp:
            warnings.warn(
                f"true-positive probability {self.p_tp} is below false-positive probability {self.p_fp}",
                RuntimeWarning,
                stacklevel=3,
            )

    @classmethod
    def from_fidelity(cls, fidelity: float, fp_ratio: float = FP_RATIO,
                      fp_tunnel_prob: float = 0.0) -> "AncillaModel":
        """Ancilla with ``p_tp = F`` and ``p_fp = fp_ratio * (1 - F)``."""
        return cls(fidelity, fp_ratio * (1.0 - fidelity), fp_tunnel_prob)

    @classmethod
    def perfect(cls) -> "AncillaModel":
        return cls(1.0, 0.0, 0.0)


@dataclass(frozen=True)
class ProtocolConfig:
    """Readout protocol settings.

    ``init_policy`` decides when the hidden state is perturbed:
    ``"per_cycle"`` applies the transition matrix before every probe window,
    ``"on_demand"`` only at the first electron load and after every blip
    that reflects a real tunnelling event. Defaults: RR per cycle, AR on
    demand. ``probe_order`` fixes the frequency order used by RR sweeps and
    by the AR first subroutine (default: basis order, ``m = +I`` first).
    With ``early_reject`` the AR dark-subspace subroutine stops as soon as
    the blip count reaches ``threshold``, since the outcome is then decided.
    """

    kind: str
    n_shots: int
    threshold: int | None = None
    init_policy: str | None = None
    kappa: float = DEFAULT_KAPPA
    max_restarts: int = 10
    probe_order: tuple[int, ...] | None = None
    max_subroutine1_sweeps: int = 1000
    early_reject: bool = True

    def __post_init__(self) -> None:
        kind = self.kind.lower()
        if kind not in ("rr", "ar"):
            raise ValueError(f"protocol kind must be 'rr' or 'ar', got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if int(self.n_shots) != self.n_shots or self.n_shots < 1:
            raise ValueError(f"n_shots must be a positive integer, got {self.n_shots}")
        threshold = math.ceil(self.n_shots / 2) if self.threshold is None else int(self.threshold)
        if kind == "ar" and not 1 <= threshold <= self.n_shots:
            raise ValueError(f"threshold must lie in [1, n_shots={self.n_shots}], got {threshold}")
        object.__setattr__(self, "threshold", threshold)
        policy = self.init_policy or ("per_cycle" if kind == "rr" else "on_demand")
        if policy not in ("per_cycle", "on_demand"):
            raise ValueError(f"unknown init_policy {policy!r}")
        object.__setattr__(self, "init_policy", policy)
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be non-negative")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.probe_order is not None:
            object.__setattr__(self, "probe_order", tuple(int(i) for i in self.probe_order))

    def order(self, d: int) -> np.ndarray:
        if self.probe_order is None:
            return np.arange(d)
        order = np.asarray(self.probe_order, dtype=int)
        if sorted(order.tolist()) != list(range(d)):
            raise ValueError(f"probe_order must be a permutation of range({d})")
        return order


@dataclass(frozen=True)
class SimResult:
    fidelity_per_state: np.ndarray
    fidelity_avg: float
    fidelity_stderr: float
    mean_qnd_cycles: float
    rejection_rate: float
    n_trials: int
    seed: int
    config: ProtocolConfig
    ancilla: AncillaModel
    mean_subroutine1_length: float = float("nan")
    mean_tunnel_events: float = 0.0
    restarts_exhausted: int = 0
    unassigned: int = 0
    trials_per_state: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "protocol": self.config.kind,
            "config": asdict(self.config),
            "ancilla": asdict(self.ancilla),
            "seed": self.seed,
            "n_trials": self.n_trials,
            "fidelity_avg": self.fidelity_avg,
            "fidelity_stderr": self.fidelity_stderr,
            "fidelity_per_state": self.fidelity_per_state.tolist(),
            "trials_per_state": None if self.trials_per_state is None else self.trials_per_state.tolist(),
            "mean_qnd_cycles": self.mean_qnd_cycles,
            "rejection_rate": self.rejection_rate,
            "mean_subroutine1_length": self.mean_subroutine1_length,
            "mean_tunnel_events": self.mean_tunnel_events,
            "restarts_exhausted": self.restarts_exhausted,
            "unassigned": self.unassigned,
        }


def tie_break_priority(d: int) -> np.ndarray:
    """Rank of each basis index for tie-breaking: larger ``|m|`` first, then positive ``m``.

    Higher value wins.
    """
    m = (d - 1) / 2.0 - np.arange(d)
    order = sorted(range(d), key=lambda k: (-abs(m[k]), -m[k]))
    prio = np.empty(d, dtype=np.int64)
    prio[order] = np.arange(d)[::-1]
    return prio


def assign_by_counts(counts: np.ndarray) -> np.ndarray:
    """State with the most blips per row; ties go to larger ``|m|``, then positive ``m``."""
    counts = np.asarray(counts, dtype=np.int64)
    d = counts.shape[-1]
    return np.argmax(counts * (d + 1) + tie_break_priority(d), axis=-1)


class _Tally:
    """Integer sums over trials; merged by addition so batching is invisible."""

    fields = ("correct", "per_state", "cycles", "attempts", "rejections",
              "sub1_probes", "tunnels", "exhausted", "unassigned")

    def __init__(self, d: int):
        self.correct = np.zeros(d, dtype=np.int64)
        self.per_state = np.zeros(d, dtype=np.int64)
        self.cycles = self.attempts = self.rejections = 0
        self.sub1_probes = self.tunnels = self.exhausted = self.unassigned = 0

    def __iadd__(self, other: "_Tally") -> "_Tally":
        for name in self.fields:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self


def _evolve(cum: np.ndarray, states: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of the first cumulative probability exceeding u
    return np.sum(u[None, :] >= cum[:, states], axis=0)


def _cumulative(t: np.ndarray) -> np.ndarray:
    cum = np.cumsum(t, axis=0)
    cum[-1, :] = 1.0
    return cum


def _ctr(step, slot):
    return 1 + np.asarray(step, dtype=np.int64) * _SLOTS + slot


def _initial_states(streams: CounterStreams, keys: np.ndarray, d: int) -> np.ndarray:
    return np.minimum((streams.uniform(keys, 0) * d).astype(np.int64), d - 1)


def _record(tally: _Tally, s0: np.ndarray, assigned: np.ndarray, d: int) -> None:
    tally.per_state += np.bincount(s0, minlength=d)
    tally.correct += np.bincount(s0[assigned == s0], minlength=d)


def _rr_batch(cum, anc, cfg, streams, trials) -> _Tally:
    d = cum.shape[0]
    n = trials.size
    keys = streams.keys(trials)
    s0 = _initial_states(streams, keys, d)
    s = s0.copy()
    counts = np.zeros((n, d), dtype=np.int64)
    tunnels = 0
    per_cycle = cfg.init_policy == "per_cycle"
    step = 0
    for _ in range(cfg.n_shots):
        for f in cfg.order(d):
            if per_cycle or step == 0:
                s = _evolve(cum, s, streams.uniform(keys, _ctr(step, _EVOLVE)))
                tunnels += n
            hit = s == f
            blip = streams.uniform(keys, _ctr(step, _BLIP)) < np.where(hit, anc.p_tp, anc.p_fp)
            counts[:, f] += blip
            if not per_cycle:
                tunnel = blip & hit
                if anc.fp_tunnel_prob > 0:
                    tunnel |= blip & ~hit & (
                        streams.uniform(keys, _ctr(step, _FP_TUNNEL)) < anc.fp_tunnel_prob
                    )
                if tunnel.any():
                    moved = _evolve(cum, s, streams.uniform(keys, _ctr(step, _POST)))
                    s = np.where(tunnel, moved, s)
                    tunnels += int(tunnel.sum())
            step += 1
    tally = _Tally(d)
    _record(tally, s0, assign_by_counts(counts), d)
    tally.cycles = n * step
    tally.attempts = n
    tally.tunnels = tunnels
    return tally


def _ar_batch(cum, anc, cfg, streams, trials) -> _Tally:
    d = cum.shape[0]
    n = trials.size
    order = cfg.order(d)
    keys = streams.keys(trials)
    s0 = _initial_states(streams, keys, d)
    s = s0.copy()
    phase = np.zeros(n, dtype=np.int8)  # 0 first subroutine, 1 dark subspace, 2 done
    pos = np.zeros(n, dtype=np.int64)
    guess = np.full(n, -1, dtype=np.int64)
    dark = np.zeros(n, dtype=np.int64)
    shots = np.zeros(n, dtype=np.int64)
    restarts = np.zeros(n, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    assigned = np.full(n, -1, dtype=np.int64)
    tally = _Tally(d)
    tally.attempts = n
    per_cycle = cfg.init_policy == "per_cycle"
    sub1_cap = cfg.max_subroutine1_sweeps * d

    active = np.arange(n)
    while active.size:
        k = steps[active]
        ks = keys[active]
        si = s[active]
        load = np.ones(active.size, bool) if per_cycle else k == 0
        if load.any():
            si = np.where(load, _evolve(cum, si, streams.uniform(ks, _ctr(k, _EVOLVE))), si)
            tally.tunnels += int(load.sum())

        in_sub1 = phase[active] == 0
        probe = order[pos[active] % d]
        hit = np.where(in_sub1, si == probe, si != guess[active])
        blip = streams.uniform(ks, _ctr(k, _BLIP)) < np.where(hit, anc.p_tp, anc.p_fp)
        if not per_cycle:
            tunnel = blip & hit
            if anc.fp_tunnel_prob > 0:
                tunnel |= blip & ~hit & (streams.uniform(ks, _ctr(k, _FP_TUNNEL)) < anc.fp_tunnel_prob)
            if tunnel.any():
                si = np.where(tunnel, _evolve(cum, si, streams.uniform(ks, _ctr(k, _POST))), si)
                tally.tunnels += int(tunnel.sum())
        s[active] = si
        steps[active] = k + 1

        # first subroutine: a blip fixes the guess, otherwise move to the next frequency
        a1 = active[in_sub1]
        b1 = blip[in_sub1]
        tally.sub1_probes += a1.size
        found = a1[b1]
        guess[found] = probe[in_sub1][b1]
        phase[found] = 1
        dark[found] = 0
        shots[found] = 0
        missed = a1[~b1]
        pos[missed] += 1
        gave_up = missed[pos[missed] >= sub1_cap]
        phase[gave_up] = 2
        tally.unassigned += gave_up.size

        # dark-subspace subroutine
        a2 = active[~in_sub1]
        dark[a2] += blip[~in_sub1]
        shots[a2] += 1
        if cfg.early_reject:
            finished = a2[(shots[a2] >= cfg.n_shots) | (dark[a2] >= cfg.threshold)]
        else:
            finished = a2[shots[a2] >= cfg.n_shots]
        rejected = finished[dark[finished] >= cfg.threshold]
        accepted = finished[dark[finished] < cfg.threshold]
        assigned[accepted] = guess[accepted]
        phase[accepted] = 2
        tally.rejections += rejected.size
        retry = rejected[restarts[rejected] < cfg.max_restarts]
        stuck = rejected[restarts[rejected] >= cfg.max_restarts]
        restarts[retry] += 1
        phase[retry] = 0
        pos[retry] = 0
        tally.attempts += retry.size
        assigned[stuck] = guess[stuck]
        phase[stuck] = 2
        tally.exhausted += stuck.size

        active = active[phase[active] < 2]

    _record(tally, s0, assigned, d)
    tally.cycles = int(steps.sum())
    return tally


def simulate(
    t_cycle: TransitionMatrix,
    anc: AncillaModel,
    cfg: ProtocolConfig,
    n_trials: int,
    seed: int,
    workers: int = 1,
) -> SimResult:
    """Run ``n_trials`` readouts of either protocol; see :func:`simulate_rr`/:func:`simulate_ar`."""
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    d = t_cycle.dimension
    cfg.order(d)
    cum = _cumulative(np.asarray(t_cycle.data))
    streams = CounterStreams(seed)
    batch = _rr_batch if cfg.kind == "rr" else _ar_batch
    bounds = [(lo, min(lo + BATCH, n_trials)) for lo in range(0, n_trials, BATCH)]

    def run(bound):
        return batch(cum, anc, cfg, streams, np.arange(*bound, dtype=np.int64))

    tally = _Tally(d)
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(run, bounds):
                tally += part
    else:
        for bound in bounds:
            tally += run(bound)

    f_avg = float(tally.correct.sum()) / n_trials
    with np.errstate(invalid="ignore", divide="ignore"):
        per_state = np.where(tally.per_state > 0, tally.correct / np.maximum(tally.per_state, 1), np.nan)
    return SimResult(
        fidelity_per_state=per_state,
        fidelity_avg=f_avg,
        fidelity_stderr=math.sqrt(f_avg * (1.0 - f_avg) / n_trials),
        mean_qnd_cycles=tally.cycles / n_trials,
        rejection_rate=tally.rejections / tally.attempts if cfg.kind == "ar" else 0.0,
        n_trials=n_trials,
        seed=int(seed),
        config=cfg,
        ancilla=anc,
        mean_subroutine1_length=tally.sub1_probes / tally.attempts if cfg.kind == "ar" else float("nan"),
        mean_tunnel_events=tally.tunnels / n_trials,
        restarts_exhausted=tally.exhausted,
        unassigned=tally.unassigned,
        trials_per_state=tally.per_state,
    )


def simulate_rr(t_cycle, anc, cfg, n_trials, seed, workers=1) -> SimResult:
    """Repeated readout: ``n_shots`` sweeps over all ``D`` frequencies.

    Every frequency probe is one QND cycle. The assigned state is the one with
    the most blips (ties: larger ``|m|``, then positive ``m``); fidelity is
    measured against the state before the readout started.
    """
    if cfg.kind != "rr":
        raise ValueError("simulate_rr needs a config with kind='rr'")
    return simulate(t_cycle, anc, cfg, n_trials, seed, workers)


def simulate_ar(t_cycle, anc, cfg, n_trials, seed, workers=1) -> SimResult:
    """Adaptive readout.

    Subroutine 1 probes single frequencies cyclically until a blip names a
    guess. Subroutine 2 then runs ``n_shots`` collective probes of the dark
    subspace (all states but the guess); the guess is rejected and the
    protocol restarts when at least ``threshold`` of them blip (by default
    the subroutine stops at that point, see ``ProtocolConfig.early_reject``). After
    ``max_restarts`` rejections the last guess is kept and counted in
    ``restarts_exhausted``. Every probe window of either subroutine counts as
    one QND cycle.
    """
    if cfg.kind != "ar":
        raise ValueError("simulate_ar needs a config with kind='ar'")
    return simulate(t_cycle, anc, cfg, n_trials, seed, workers)


@dataclass(frozen=True)
class SweepRow:
    ancilla_fidelity: float
    protocol: str
    n_shots: int
    fidelity: float
    stderr: float
    mean_qnd_cycles: float
    rejection_rate: float
    optimal: bool = False


def ancilla_sweep(
    t_cycle: TransitionMatrix,
    cfg_grid: Sequence[ProtocolConfig],
    fidelity_grid: Sequence[float],
    n_trials: int,
    seed: int,
    fp_ratio: float = FP_RATIO,
    fp_tunnel_prob: float = 0.0,
    workers: int = 1,
) -> list[SweepRow]:
    """Full factorial sweep of protocol configs against ancilla fidelity.

    The ancilla at fidelity ``F`` has ``p_tp = F`` and ``p_fp = fp_ratio * (1 - F)``.
    Every grid point uses the same seed (common random numbers). Within each
    (fidelity, protocol) group the row with the highest fidelity is flagged
    ``optimal``; ties go to the smaller ``n_shots``.
    """
    if not cfg_grid or not fidelity_grid:
        raise ValueError("ancilla sweep needs non-empty config and fidelity grids")
    for f in fidelity_grid:
        if not 0.5 < f <= 1.0:
            raise ValueError(f"ancilla fidelity must lie in (0.5, 1], got {f}")
    rows: list[SweepRow] = []
    for f in fidelity_grid:
        anc = AncillaModel.from_fidelity(f, fp_ratio, fp_tunnel_prob)
        group: dict[str, list[SweepRow]] = {}
        for cfg in cfg_grid:
            res = simulate(t_cycle, anc, cfg, n_trials, seed, workers)
            logger.debug("F_anc=%.3f %s n=%d -> %.5f", f, cfg.kind, cfg.n_shots, res.fidelity_avg)
            row = SweepRow(f, cfg.kind, cfg.n_shots, res.fidelity_avg, res.fidelity_stderr,
                           res.mean_qnd_cycles, res.rejection_rate)
            group.setdefault(cfg.kind, []).append(row)
        for kind_rows in group.values():
            best = max(kind_rows, key=lambda r: (r.fidelity, -r.n_shots))
            for r in kind_rows:
                rows.append(SweepRow(**{**asdict(r), "optimal": r is best}))
    return rows
