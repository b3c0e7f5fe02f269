"""
Splitting resolvent-Euler scheme for slow-fast multivalued McKean-Vlasov systems.

State arrays carry a repetition axis and a particle axis: ``X`` is
``(R, N, n)``, ``Y`` is ``(R, N, m)``.  Each repetition is an independent
N-particle system whose empirical measure stands in for the law of ``X``.

One macro step of length ``dt``::

    Y <- J2_hf( Y + hf/delta b2(X, mu, Y) + delta^{-1/2} sigma2(X, mu, Y) dW2 )   (S times)
    X <- J1_dt( X + dt b1(X, mu, Y) + eps^theta sigma1(X, mu, Y) dW1 )

with ``hf = dt / S``, ``mu`` the start-of-step cloud and ``J`` the resolvents.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from . import rng as streams
from .errors import (ConfigError, DivergenceError, InputError, NonConvergenceError,
                     NumericalError, StepError)
from .measure import ParticleCloud
from .model import CoefficientSet, matvec
from .monotone_ops import MonotoneOperator


@dataclass
class SimConfig:
    T: float = 1.0
    dt: float = 1e-2
    epsilon: float = 0.1
    delta: float = 1e-2
    theta: Optional[float] = None
    gamma: float = 0.5
    n_particles: int = 512
    x0: object = 0.0
    y0: object = 0.0
    fast_substeps: Optional[int] = None
    seed: int = 0
    repetitions: int = 1
    x0_cloud: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 < self.dt <= self.T:
            raise ConfigError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not 0 < self.epsilon <= 1:
            raise ConfigError("epsilon must lie in (0, 1]")
        if self.theta is not None and self.theta < 0:
            raise ConfigError("theta must be nonnegative")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.n_particles < 1 or self.repetitions < 1:
            raise ConfigError("n_particles and repetitions must be positive")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-6 * steps:
            raise ConfigError("T must be an integer multiple of dt")
        block = self.block_length
        if not self.dt * (1 - 1e-9) <= block <= self.T * (1 + 1e-9):
            raise ConfigError(f"block delta^gamma={block:.3g} must lie in [dt, T]")
        if self.fast_substeps is None:
            self.fast_substeps = max(1, math.ceil(10 * self.dt / self.delta - 1e-9))
        if self.fast_substeps < 1:
            raise ConfigError("fast_substeps must be >= 1")
        if self.dt / self.fast_substeps > self.delta / 10 * (1 + 1e-9):
            raise ConfigError("fast step dt/fast_substeps exceeds delta/10")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def block_length(self) -> float:
        return self.delta ** self.gamma

    @property
    def block_steps(self) -> int:
        return max(1, int(round(self.block_length / self.dt)))

    @property
    def fast_step(self) -> float:
        return self.dt / self.fast_substeps

    def grid(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def noise_scale(self, coeffs: CoefficientSet) -> float:
        theta = coeffs.theta if self.theta is None else self.theta
        return self.epsilon ** theta

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("x0", "y0", "x0_cloud"):
            if isinstance(out[k], np.ndarray):
                out[k] = out[k].tolist()
        return out


@dataclass
class SlowFastEnsemble:
    """R independent systems of N particles: positions, fast states, |K| variations."""

    X: np.ndarray
    Y: np.ndarray
    k1_var: np.ndarray
    k2_var: np.ndarray
    t: float = 0.0
    step_index: int = 0
    pre: Optional[np.ndarray] = None  # slow predictor of the last step, before the resolvent

    @classmethod
    def initial(cls, coeffs: CoefficientSet, cfg: SimConfig, A1=None, A2=None):
        R, N = cfg.repetitions, cfg.n_particles
        if cfg.x0_cloud is not None:
            x0 = np.asarray(cfg.x0_cloud, dtype=float).reshape(-1, coeffs.n)
            if len(x0) != N:
                raise InputError("x0_cloud must hold n_particles points")
            X = np.broadcast_to(x0, (R, N, coeffs.n)).copy()
        else:
            X = np.broadcast_to(_point(cfg.x0, coeffs.n), (R, N, coeffs.n)).copy()
        Y = np.broadcast_to(_point(cfg.y0, coeffs.m), (R, N, coeffs.m)).copy()
        if A1 is not None and not np.all(A1.domain_contains(X)):
            raise InputError("x0 lies outside the closure of D(A1)")
        if A2 is not None and not np.all(A2.domain_contains(Y)):
            raise InputError("y0 lies outside the closure of D(A2)")
        return cls(X, Y, np.zeros((R, N)), np.zeros((R, N)))

    @property
    def cloud(self) -> ParticleCloud:
        return ParticleCloud(self.X)

    def copy(self) -> "SlowFastEnsemble":
        return SlowFastEnsemble(self.X.copy(), self.Y.copy(), self.k1_var.copy(),
                                self.k2_var.copy(), self.t, self.step_index)

    def rows(self, sl: slice) -> "SlowFastEnsemble":
        return SlowFastEnsemble(self.X[sl], self.Y[sl], self.k1_var[sl], self.k2_var[sl],
                                self.t, self.step_index)


def _point(v, dim) -> np.ndarray:
    p = np.atleast_1d(np.asarray(v, dtype=float))
    if p.shape == (1,):
        p = np.repeat(p, dim)
    if p.shape != (dim,):
        raise InputError(f"initial point has shape {p.shape}, expected ({dim},)")
    return p


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

def slow_noise(cfg: SimConfig, step: int, d1: int, seed: Optional[int] = None) -> np.ndarray:
    seed = cfg.seed if seed is None else seed
    shape = (cfg.repetitions, cfg.n_particles, d1)
    return math.sqrt(cfg.dt) * streams.normal_block(seed, streams.SLOW, step, shape)


def fast_noise(cfg: SimConfig, step: int, d2: int, seed: Optional[int] = None) -> np.ndarray:
    seed = cfg.seed if seed is None else seed
    shape = (cfg.repetitions, cfg.n_particles, cfg.fast_substeps, d2)
    return math.sqrt(cfg.fast_step) * streams.normal_block(seed, streams.FAST, step, shape)


def step_noise(cfg: SimConfig, coeffs: CoefficientSet, step: int):
    return slow_noise(cfg, step, coeffs.d1), fast_noise(cfg, step, coeffs.d2)


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------

def _apply_resolvent(op: MonotoneOperator, lam: float, pre: np.ndarray) -> np.ndarray:
    try:
        return op.resolvent_point(lam, pre)
    except NumericalError as exc:
        flat = pre.reshape(-1, pre.shape[-1])
        for i, p in enumerate(flat):
            try:
                op.resolvent_point(lam, p)
            except NumericalError:
                raise StepError(f"resolvent failed at particle {i}: {exc}",
                                particle=i, residual=exc.residual) from exc
        raise StepError(str(exc), residual=exc.residual) from exc


def fast_advance(X, cloud, Y, dW2, coeffs, A2, hf, delta, shift=None):
    """Run the fast sub-cycle with ``(X, cloud)`` held fixed.

    ``dW2`` has shape ``(..., S, d2)``.  ``shift`` is an extra drift callable
    ``(X, cloud, Y) -> (..., m)`` (used for controls).  Returns ``(Y, dK2)``.
    """
    dk = np.zeros(Y.shape[:-1])
    rate, amp = hf / delta, 1.0 / math.sqrt(delta)
    for s in range(dW2.shape[-2]):
        pre = Y + rate * coeffs.b2(X, cloud, Y) + amp * matvec(coeffs.sigma2(X, cloud, Y),
                                                               dW2[..., s, :])
        if shift is not None:
            pre = pre + hf * shift(X, cloud, Y)
        Y = _apply_resolvent(A2, hf, pre)
        dk += np.linalg.norm(pre - Y, axis=-1)
    return Y, dk


def slow_advance(X, cloud, Y, dW1, coeffs, A1, dt, scale, shift=None):
    """One resolvent-Euler step of the slow component; returns ``(X, dK1, pre)``."""
    pre = X + dt * coeffs.b1(X, cloud, Y) + scale * matvec(coeffs.sigma1(X, cloud, Y), dW1)
    if shift is not None:
        pre = pre + dt * shift(X, cloud, Y)
    new = _apply_resolvent(A1, dt, pre)
    return new, np.linalg.norm(pre - new, axis=-1), pre


def step(ens: SlowFastEnsemble, coeffs: CoefficientSet, A1: MonotoneOperator,
         A2: MonotoneOperator, cfg: SimConfig, noise, law: Optional[ParticleCloud] = None,
         slow_shift=None, fast_shift=None, scale: Optional[float] = None) -> SlowFastEnsemble:
    """Advance every particle by one macro step; returns a new ensemble.

    ``noise = (dW1, dW2)`` are Gaussian increments shaped ``(R, N, d1)`` and
    ``(R, N, fast_substeps, d2)`` (the leading ``R`` may be dropped when R=1).
    ``law`` replaces the ensemble's own cloud as the measure argument (used by
    the controlled system, which is driven by an uncontrolled companion).
    """
    dW1, dW2 = (np.asarray(w, dtype=float) for w in noise)
    R, N = ens.X.shape[:2]
    if dW1.ndim == 2:
        dW1 = dW1[None]
    if dW2.ndim == 3:
        dW2 = dW2[None]
    if dW1.shape != (R, N, coeffs.d1):
        raise InputError(f"slow noise shape {dW1.shape}, expected {(R, N, coeffs.d1)}")
    if dW2.shape[:2] != (R, N) or dW2.shape[3:] != (coeffs.d2,):
        raise InputError(f"fast noise shape {dW2.shape} does not match (R, N, S, d2)")
    cloud = ens.cloud if law is None else law
    hf = cfg.dt / dW2.shape[2]
    Y, dk2 = fast_advance(ens.X, cloud, ens.Y, dW2, coeffs, A2, hf, cfg.delta, fast_shift)
    scale = cfg.noise_scale(coeffs) if scale is None else scale
    X, dk1, pre = slow_advance(ens.X, cloud, Y, dW1, coeffs, A1, cfg.dt, scale, slow_shift)
    new = SlowFastEnsemble(X, Y, ens.k1_var + dk1, ens.k2_var + dk2,
                           ens.t + cfg.dt, ens.step_index + 1, pre)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DivergenceError(f"non-finite state at t={new.t:.6g}", last_finite=ens)
    return new


def _step_parallel(ens, coeffs, A1, A2, cfg, noise, pool, chunks, **kw):
    dW1, dW2 = noise
    parts = list(pool.map(
        lambda sl: step(ens.rows(sl), coeffs, A1, A2, cfg, (dW1[sl], dW2[sl]),
                        law=None if kw.get("law") is None else ParticleCloud(kw["law"].points[sl]),
                        **{k: v for k, v in kw.items() if k != "law"}),
        chunks))
    return SlowFastEnsemble(np.concatenate([p.X for p in parts]),
                            np.concatenate([p.Y for p in parts]),
                            np.concatenate([p.k1_var for p in parts]),
                            np.concatenate([p.k2_var for p in parts]),
                            parts[0].t, parts[0].step_index,
                            np.concatenate([p.pre for p in parts]))


def run_steps(coeffs: CoefficientSet, A1: MonotoneOperator, A2: MonotoneOperator,
              cfg: SimConfig, ens: Optional[SlowFastEnsemble] = None,
              max_workers: int = 1, law_fn: Optional[Callable[[int], ParticleCloud]] = None,
              **step_kw) -> Iterator[SlowFastEnsemble]:
    """Yield the ensemble at every grid time, starting with the initial state.

    With ``max_workers > 1`` repetitions are split across threads; each
    repetition is an independent system, so results do not change.
    ``law_fn(k)`` optionally supplies the measure argument at step ``k``.
    """
    ens = SlowFastEnsemble.initial(coeffs, cfg, A1, A2) if ens is None else ens
    yield ens
    R = ens.X.shape[0]
    workers = max(1, min(max_workers, R))
    bounds = np.linspace(0, R, workers + 1).astype(int)
    chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for k in range(ens.step_index, cfg.n_steps):
            noise = step_noise(cfg, coeffs, k)
            law = law_fn(k) if law_fn is not None else None
            if pool is None:
                ens = step(ens, coeffs, A1, A2, cfg, noise, law=law, **step_kw)
            else:
                ens = _step_parallel(ens, coeffs, A1, A2, cfg, noise, pool, chunks,
                                     law=law, **step_kw)
            yield ens
    finally:
        if pool is not None:
            pool.shutdown()


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Snapshots on the macro grid.

    ``mode="full"`` keeps X, Y and both variations per particle;
    ``mode="reduced"`` keeps X (needed for sup-norm errors) and the summary
    statistics only.  Arrays are indexed ``[time, repetition, particle, ...]``.
    """

    times: np.ndarray
    X: np.ndarray
    Y: Optional[np.ndarray] = None
    k1_var: Optional[np.ndarray] = None
    k2_var: Optional[np.ndarray] = None
    mode: str = "full"
    seed: Optional[int] = None
    streams: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != len(self.X):
            raise InputError("snapshot count must equal grid length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise InputError("grid must be strictly increasing")

    @property
    def mean(self) -> np.ndarray:
        return self.X.mean(axis=2)

    @property
    def second_moment(self) -> np.ndarray:
        return np.mean(np.sum(self.X ** 2, axis=-1), axis=2)

    def cloud(self, k: int, rep: int = 0) -> ParticleCloud:
        return ParticleCloud(self.X[k, rep])

    def final(self) -> SlowFastEnsemble:
        return SlowFastEnsemble(self.X[-1], self.Y[-1] if self.Y is not None else None,
                                None if self.k1_var is None else self.k1_var[-1],
                                None if self.k2_var is None else self.k2_var[-1],
                                float(self.times[-1]), len(self.times) - 1)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.X.shape[-1]
        if self.mode == "full":
            m = self.Y.shape[-1]
            w.writerow(["t", "particle_id"] + [f"x{i}" for i in range(n)]
                       + [f"y{i}" for i in range(m)] + ["k1_var", "k2_var"])
            for k, t in enumerate(self.times):
                X = self.X[k].reshape(-1, n)
                Y = self.Y[k].reshape(-1, m)
                k1 = self.k1_var[k].ravel()
                k2 = self.k2_var[k].ravel()
                for p in range(len(X)):
                    w.writerow([repr(float(t)), p] + [repr(float(v)) for v in X[p]]
                               + [repr(float(v)) for v in Y[p]]
                               + [repr(float(k1[p])), repr(float(k2[p]))])
        else:
            w.writerow(["t"] + [f"mean_x{i}" for i in range(n)] + ["second_moment"])
            mean = self.mean.mean(axis=1)
            sm = self.second_moment.mean(axis=1)
            for k, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in mean[k]]
                           + [repr(float(sm[k]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _collect(snaps, times, mode, seed):
    X = np.stack([s.X for s in snaps])
    if mode == "full":
        return Trajectory(times, X, np.stack([s.Y for s in snaps]),
                          np.stack([s.k1_var for s in snaps]),
                          np.stack([s.k2_var for s in snaps]), mode, seed)
    return Trajectory(times, X, mode=mode, seed=seed)


def simulate(coeffs: CoefficientSet, A1: MonotoneOperator, A2: MonotoneOperator,
             cfg: SimConfig, mode: str = "full", max_workers: int = 1,
             assumptions=None, **step_kw) -> Trajectory:
    """Integrate the particle system over ``cfg.grid()``.

    If an :class:`AssumptionReport` is passed its gate is enforced first.
    Output depends only on the config (seed, sizes, grid), not on
    ``max_workers``.
    """
    if mode not in ("full", "reduced"):
        raise InputError(f"unknown trajectory mode {mode!r}")
    if assumptions is not None:
        assumptions.require_gate("simulate")
    snaps = []
    try:
        for ens in run_steps(coeffs, A1, A2, cfg, max_workers=max_workers, **step_kw):
            snaps.append(ens)
    except DivergenceError as exc:
        exc.partial = _collect(snaps, cfg.grid()[:len(snaps)], mode, cfg.seed)
        raise
    traj = _collect(snaps, cfg.grid(), mode, cfg.seed)
    traj.streams = {"slow": streams.stream_id(cfg.seed, streams.SLOW),
                    "fast": streams.stream_id(cfg.seed, streams.FAST)}
    return traj


# ---------------------------------------------------------------------------
# Khasminskii auxiliary process
# ---------------------------------------------------------------------------

def khasminskii_path(traj: Trajectory, coeffs: CoefficientSet, A2: MonotoneOperator,
                     cfg: SimConfig) -> Trajectory:
    """Fast process with coefficients frozen on blocks of length ``delta^gamma``.

    On block ``[k D, (k+1) D)`` the fast equation is driven by ``(X, cloud)``
    taken at the block start and restarted from ``Y`` there; the fast noise is
    the one used by ``simulate``.  ``diagnostics["gap"]`` holds
    ``sup_t mean |Y_t - Yhat_t|^2``.
    """
    if traj.mode != "full" or traj.Y is None:
        raise InputError("khasminskii_path needs a full-mode trajectory")
    if len(traj.times) != cfg.n_steps + 1:
        raise InputError("trajectory grid does not match config")
    B = cfg.block_steps
    Yhat = np.empty_like(traj.Y)
    Yhat[0] = traj.Y[0]
    Yh = traj.Y[0]
    for k in range(cfg.n_steps):
        start = (k // B) * B
        if k == start:
            Yh = traj.Y[k]
        Xs = traj.X[start]
        Yh, _ = fast_advance(Xs, ParticleCloud(Xs), Yh, fast_noise(cfg, k, coeffs.d2),
                             coeffs, A2, cfg.fast_step, cfg.delta)
        Yhat[k + 1] = Yh
    gap_t = np.mean(np.sum((traj.Y - Yhat) ** 2, axis=-1), axis=(1, 2))
    out = Trajectory(traj.times, traj.X, Yhat, mode="full", seed=traj.seed,
                     streams=dict(traj.streams))
    out.k1_var = np.zeros(traj.X.shape[:-1])
    out.k2_var = np.zeros(traj.X.shape[:-1])
    out.diagnostics = {"gap": float(np.max(gap_t)), "gap_t": gap_t, "block_steps": B}
    return out


# ---------------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------------

def _fast_path(Xpath, coeffs, A2, cfg):
    Y = np.empty(Xpath.shape[:-1] + (coeffs.m,))
    Y[0] = np.broadcast_to(_point(cfg.y0, coeffs.m), Y[0].shape)
    for k in range(cfg.n_steps):
        Y[k + 1], _ = fast_advance(Xpath[k], ParticleCloud(Xpath[k]), Y[k],
                                   fast_noise(cfg, k, coeffs.d2), coeffs, A2,
                                   cfg.fast_step, cfg.delta)
    return Y


def _slow_path(Ypath, x_init, coeffs, A1, cfg):
    X = np.empty(Ypath.shape[:-1] + (coeffs.n,))
    X[0] = x_init
    k1 = np.zeros(Ypath.shape[:-1])
    scale = cfg.noise_scale(coeffs)
    for k in range(cfg.n_steps):
        X[k + 1], dk, _ = slow_advance(X[k], ParticleCloud(X[k]), Ypath[k + 1],
                                       slow_noise(cfg, k, coeffs.d1), coeffs, A1,
                                       cfg.dt, scale)
        k1[k + 1] = k1[k] + dk
    return X, k1


def picard_solve(coeffs: CoefficientSet, A1: MonotoneOperator, A2: MonotoneOperator,
                 cfg: SimConfig, max_iter: int = 20, tol: float = 1e-12):
    """Picard iterates: ``Y^(l)`` driven by ``X^(l-1)``, then ``X^(l)`` driven by ``Y^(l)``.

    Both equations reuse the noise of :func:`simulate`, so the fixed point is
    the scheme's own trajectory.  Returns ``(trajectory, gaps)`` with
    ``gaps[l-1] = sup_t mean |X^(l)_t - X^(l-1)_t|^2``.
    """
    if max_iter < 2:
        raise InputError("max_iter must be at least 2")
    x_init = SlowFastEnsemble.initial(coeffs, cfg, A1, A2).X
    X_prev = np.broadcast_to(x_init, (cfg.n_steps + 1,) + x_init.shape).copy()
    gaps, rises = [], 0
    for _ in range(max_iter):
        Y = _fast_path(X_prev, coeffs, A2, cfg)
        X, k1 = _slow_path(Y, x_init, coeffs, A1, cfg)
        if not np.all(np.isfinite(X)):
            raise DivergenceError("Picard iterate became non-finite")
        g = float(np.max(np.mean(np.sum((X - X_prev) ** 2, axis=-1), axis=(1, 2))))
        rises = rises + 1 if gaps and g > gaps[-1] else 0
        gaps.append(g)
        X_prev = X
        if g < tol:
            break
        if rises >= 3:
            raise NonConvergenceError("Picard gaps grew three times in a row", gaps=gaps)
    traj = Trajectory(cfg.grid(), X, Y, k1, np.zeros_like(k1), seed=cfg.seed)
    return traj, gaps
