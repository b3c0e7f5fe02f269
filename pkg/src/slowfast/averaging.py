"""
Frozen-equation ergodics and the averaged slow dynamics.

The frozen equation is the fast equation with the slow state ``(x, mu)``
held fixed and unit time scale::

    dY in -A2(Y) dt + b2(x, mu, Y) dt + sigma2(x, mu, Y) dW

Its long-run law gives the averaged drift ``b1_bar(x, mu) = E_nu b1(x, mu, Y)``.
Replicas run side by side on the particle axis of the coefficient calls.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from . import rng as streams
from .errors import (AssumptionGateError, InputError, InsufficientSignalError,
                     NumericalError, DivergenceError)
from .measure import ParticleCloud
from .model import AssumptionReport, CoefficientSet, check_assumptions, matvec
from .monotone_ops import MonotoneOperator, ZeroOperator
from .sde_engine import SimConfig, Trajectory, _apply_resolvent, _point, slow_noise

log = logging.getLogger(__name__)

CHUNK = 256
METASTABLE_SIGMAS = 5.0
CACHE_RTOL = 1e-3


@dataclass
class ErgodicSettings:
    """Estimator knobs; ``None`` entries are derived from the assumption report.

    Defaults: ``dt_f = 1/(40 beta)``, burn-in ``max(5/alpha, 50 dt_f)``,
    horizon ``200/alpha`` (post burn-in), 8 replicas.
    """

    dt_f: Optional[float] = None
    horizon: Optional[float] = None
    burn_in: Optional[float] = None
    replicas: int = 8
    subsample: int = 10
    seed: int = 0
    y0: Optional[object] = None
    mixing_replicas: int = 2048
    mixing_horizon: Optional[float] = None
    mixing_points: int = 40
    fit_mixing: bool = True

    def resolved(self, report: AssumptionReport) -> "ErgodicSettings":
        if report.alpha is None:
            raise AssumptionGateError("frozen dynamics not dissipative (beta <= 2L')",
                                      report=report)
        alpha, beta = report.alpha, report.beta
        dt_f = self.dt_f if self.dt_f is not None else 1.0 / (40.0 * beta)
        if dt_f > 1.0 / (10.0 * beta) * (1 + 1e-12):
            raise InputError(f"dt_f={dt_f:.3g} exceeds 1/(10 beta)={1 / (10 * beta):.3g}")
        burn = self.burn_in if self.burn_in is not None else max(5.0 / alpha, 50 * dt_f)
        horizon = self.horizon if self.horizon is not None else 200.0 / alpha
        mix_h = self.mixing_horizon if self.mixing_horizon is not None else 4.0 / alpha
        return replace(self, dt_f=dt_f, burn_in=burn, horizon=horizon, mixing_horizon=mix_h)


def _report_for(coeffs: CoefficientSet, report: Optional[AssumptionReport],
                weak: bool = False) -> AssumptionReport:
    """Assumption report with the dissipativity gate enforced.

    ``weak=True`` (single frozen paths) admits the borderline ``beta = 2L'``;
    ergodic estimates need the strict inequality.
    """
    report = report if report is not None else check_assumptions(coeffs)
    ok = report.beta >= 2.0 * report.lip_sigma2_y if weak else report.dissipative
    if not ok:
        raise AssumptionGateError("frozen equation refused: beta <= 2L'", report=report)
    return report


def _anchor(x, mu: ParticleCloud, n: int):
    x = _point(x, n)
    if mu.batched or mu.dim != n:
        raise InputError("anchor cloud must be an unbatched cloud in R^n")
    return x


def _frozen_steps(x, mu, coeffs, A2, dt_f, n_steps, Y, seed, role=streams.FROZEN,
                  ) -> Iterator[np.ndarray]:
    """Yield ``(Y, dK2)`` after each frozen step; ``Y`` is ``(R, m)``."""
    R = Y.shape[0]
    xb = np.broadcast_to(x, (R, x.shape[-1]))
    sq = math.sqrt(dt_f)
    for c in range(0, n_steps, CHUNK):
        block = streams.normal_block(seed, role, c // CHUNK, (CHUNK, R, coeffs.d2))
        for j in range(min(CHUNK, n_steps - c)):
            pre = (Y + dt_f * coeffs.b2(xb, mu, Y)
                   + matvec(coeffs.sigma2(xb, mu, Y), sq * block[j]))
            Y = _apply_resolvent(A2, dt_f, pre)
            if not np.all(np.isfinite(Y)):
                raise DivergenceError("frozen path became non-finite")
            yield Y, np.linalg.norm(pre - Y, axis=-1)


@dataclass
class FrozenPath:
    times: np.ndarray
    Y: np.ndarray          # (time, replica, m)
    k2_var: np.ndarray     # (time, replica)
    anchor: tuple


def simulate_frozen(x, mu: ParticleCloud, coeffs: CoefficientSet, A2: MonotoneOperator,
                    horizon: float, dt_f: float, seed: int = 0, y0=None, replicas: int = 1,
                    report: Optional[AssumptionReport] = None) -> FrozenPath:
    """Resolvent-Euler path of the frozen equation at the anchor ``(x, mu)``."""
    report = _report_for(coeffs, report, weak=True)
    if report.beta > 0 and dt_f > 1.0 / (10.0 * report.beta) * (1 + 1e-12):
        raise InputError(f"dt_f={dt_f:.3g} exceeds 1/(10 beta)")
    x = _anchor(x, mu, coeffs.n)
    n_steps = int(round(horizon / dt_f))
    y = np.broadcast_to(_point(0.0 if y0 is None else y0, coeffs.m),
                        (replicas, coeffs.m)).copy()
    Ys, ks = [y], [np.zeros(replicas)]
    for Y, dk in _frozen_steps(x, mu, coeffs, A2, dt_f, n_steps, y, seed):
        Ys.append(Y)
        ks.append(ks[-1] + dk)
    return FrozenPath(dt_f * np.arange(n_steps + 1), np.stack(Ys), np.stack(ks),
                      (tuple(x), mu.digest()))


@dataclass
class InvariantEstimate:
    anchor: tuple
    cloud: ParticleCloud
    burn_in: float
    mixing_rate_fit: Optional[tuple]
    mean: np.ndarray
    mean_stderr: np.ndarray
    var: np.ndarray
    var_stderr: np.ndarray
    replica_means: np.ndarray
    replica_second_moments: np.ndarray
    fit_warning: bool = False
    metastable: bool = False

    def to_csv(self, path=None) -> str:
        return self.cloud.to_csv(path)


def _batch_stderr(series: np.ndarray, n_batches: int = 20) -> np.ndarray:
    """Stderr of a time average from batch means; ``series`` is ``(time, R, ...)``."""
    T = len(series) - len(series) % n_batches
    b = series[:T].reshape((n_batches, T // n_batches) + series.shape[1:]).mean(axis=1)
    return b.std(axis=0, ddof=1) / math.sqrt(n_batches)


def _flag_metastable(replica_means: np.ndarray, within: np.ndarray) -> bool:
    pooled = replica_means.mean(axis=0)
    spread = np.abs(replica_means - pooled)
    tol = METASTABLE_SIGMAS * np.sqrt(within ** 2 + np.mean(within ** 2, axis=0))
    return bool(np.any(spread > tol + 1e-14))


def _ergodic_run(x, mu, coeffs, A2, s: ErgodicSettings, reader: Callable):
    """Post-burn-in samples of ``reader(Y)`` for every replica, plus subsampled states."""
    y0 = np.broadcast_to(_point(0.0 if s.y0 is None else s.y0, coeffs.m),
                         (s.replicas, coeffs.m)).copy()
    n_burn = int(math.ceil(s.burn_in / s.dt_f))
    n_keep = int(math.ceil(s.horizon / s.dt_f))
    vals, states = [], []
    for i, (Y, _) in enumerate(_frozen_steps(x, mu, coeffs, A2, s.dt_f, n_burn + n_keep,
                                             y0, s.seed)):
        if i >= n_burn:
            vals.append(reader(Y))
            if (i - n_burn) % s.subsample == 0:
                states.append(Y)
    return np.stack(vals), np.stack(states)


def estimate_invariant(x, mu: ParticleCloud, coeffs: CoefficientSet, A2: MonotoneOperator,
                       settings: Optional[ErgodicSettings] = None,
                       report: Optional[AssumptionReport] = None) -> InvariantEstimate:
    """Long-run samples of the frozen dynamics, pooled over replicas."""
    report = _report_for(coeffs, report)
    s = (settings or ErgodicSettings()).resolved(report)
    x = _anchor(x, mu, coeffs.n)
    _, states = _ergodic_run(x, mu, coeffs, A2, s, lambda Y: Y[:, :0])
    rep_mean = states.mean(axis=0)
    rep_sm = np.mean(np.sum(states ** 2, axis=-1), axis=0)
    rep_var = states.var(axis=0)
    R = s.replicas
    mean = rep_mean.mean(axis=0)
    est = InvariantEstimate(
        anchor=(tuple(x), mu.digest()), cloud=ParticleCloud(states.reshape(-1, coeffs.m)),
        burn_in=s.burn_in, mixing_rate_fit=None, mean=mean,
        mean_stderr=rep_mean.std(axis=0, ddof=1) / math.sqrt(R),
        var=rep_var.mean(axis=0), var_stderr=rep_var.std(axis=0, ddof=1) / math.sqrt(R),
        replica_means=rep_mean, replica_second_moments=rep_sm)
    est.metastable = _flag_metastable(rep_mean, _batch_stderr(states))
    if est.metastable:
        warnings.warn("replica clouds disagree beyond 5 stderr: slow mixing or "
                      "non-unique invariant law", RuntimeWarning, stacklevel=2)
    if s.fit_mixing:
        try:
            far = mean + 2.0 * (1.0 + np.sqrt(est.var))
            y_far = A2.resolvent_point(1.0, far) if not isinstance(A2, ZeroOperator) else far
            fs = replace(s, y0=y_far)
            est.mixing_rate_fit = mixing_decay_fit(x, mu, y_far, coeffs, A2, fs, report=report,
                                                   reader=lambda Y: Y)
            est.fit_warning = est.mixing_rate_fit[1] < 0.8
        except InsufficientSignalError:
            est.fit_warning = True
    return est


def averaged_drift(x, mu: ParticleCloud, coeffs: CoefficientSet, A2: MonotoneOperator,
                   settings: Optional[ErgodicSettings] = None,
                   report: Optional[AssumptionReport] = None):
    """Ergodic estimate of ``b1_bar(x, mu)``; returns ``(value, stderr)``.

    Each replica contributes the time average of ``b1(x, mu, Y_t)`` over its
    post-burn-in path; the stderr is the replica spread over ``sqrt(R)``.
    """
    report = _report_for(coeffs, report)
    s = (settings or ErgodicSettings()).resolved(report)
    x = _anchor(x, mu, coeffs.n)
    xb = np.broadcast_to(x, (s.replicas, coeffs.n))
    y_ref = np.broadcast_to(_point(0.0 if s.y0 is None else s.y0, coeffs.m),
                            (s.replicas, coeffs.m))
    v0 = coeffs.b1(xb, mu, y_ref)
    # Averaging deviations from v0 makes a y-independent drift come out exact.
    vals, _ = _ergodic_run(x, mu, coeffs, A2, s, lambda Y: coeffs.b1(xb, mu, Y) - v0)
    rep = v0 + vals.mean(axis=0)
    value = v0[0] + (rep - v0).mean(axis=0)
    stderr = (rep - v0).std(axis=0, ddof=1) / math.sqrt(s.replicas)
    return value, stderr


class AveragedDrift:
    """Read-through cache of ``b1_bar`` keyed by moment digests of ``x`` and ``mu``.

    Entries match when every digest component agrees within relative
    tolerance ``CACHE_RTOL``.  Stored values keep their stderr and replica
    count.
    """

    def __init__(self, coeffs: CoefficientSet, A2: MonotoneOperator,
                 settings: Optional[ErgodicSettings] = None,
                 report: Optional[AssumptionReport] = None, rtol: float = CACHE_RTOL):
        self.coeffs, self.A2 = coeffs, A2
        self.settings = settings or ErgodicSettings()
        self.report = _report_for(coeffs, report)
        self.rtol = rtol
        self.entries: list[tuple[np.ndarray, np.ndarray, np.ndarray, int]] = []
        self.hits = self.misses = 0

    @staticmethod
    def key(x, mu: ParticleCloud) -> np.ndarray:
        xd = ParticleCloud.dirac(x).digest()[:len(np.atleast_1d(x))]
        return np.array(xd + mu.digest())

    def lookup(self, x, mu):
        k = self.key(x, mu)
        for key, val, err, n in self.entries:
            if key.shape == k.shape and np.all(np.abs(key - k) <= self.rtol * np.abs(key) + 1e-12):
                self.hits += 1
                return val, err
        return None

    def __call__(self, x, mu: ParticleCloud):
        found = self.lookup(x, mu)
        if found is not None:
            return found
        self.misses += 1
        val, err = averaged_drift(x, mu, self.coeffs, self.A2, self.settings, self.report)
        self.entries.append((self.key(x, mu), np.asarray(val), np.asarray(err),
                             self.settings.replicas))
        return val, err

    def save(self, path) -> None:
        data = {"settings": {k: v for k, v in self.settings.__dict__.items()
                             if not isinstance(v, np.ndarray)},
                "entries": [{"key": k.tolist(), "value": v.tolist(), "stderr": e.tolist(),
                             "n": n} for k, v, e, n in self.entries]}
        Path(path).write_text(json.dumps(data, indent=1, default=float))

    def load(self, path) -> None:
        data = json.loads(Path(path).read_text())
        for e in data["entries"]:
            self.entries.append((np.array(e["key"]), np.array(e["value"]),
                                 np.array(e["stderr"]), e["n"]))


def mixing_decay_fit(x, mu: ParticleCloud, y0, coeffs: CoefficientSet, A2: MonotoneOperator,
                     settings: Optional[ErgodicSettings] = None, bbar=None,
                     report: Optional[AssumptionReport] = None, reader: Optional[Callable] = None):
    """Exponential rate of ``|E b1(x, mu, Y_t^{y0}) - b1_bar|^2``.

    The expectation is a mean over ``mixing_replicas`` frozen paths started at
    ``y0``.  Grid points are kept from the start while the signal exceeds
    three combined standard errors.  Returns ``(rate, r2)``.
    """
    report = _report_for(coeffs, report)
    s = (settings or ErgodicSettings()).resolved(report)
    x = _anchor(x, mu, coeffs.n)
    R = s.mixing_replicas
    if reader is None:
        def reader(Y):
            return coeffs.b1(np.broadcast_to(x, Y.shape[:-1] + (coeffs.n,)), mu, Y)
    if bbar is None:
        vals, _ = _ergodic_run(x, mu, coeffs, A2, replace(s, y0=None), reader)
        rep = vals.mean(axis=0)
        bbar, bbar_err = rep.mean(axis=0), rep.std(axis=0, ddof=1) / math.sqrt(len(rep))
    elif isinstance(bbar, tuple):
        bbar, bbar_err = bbar
    else:
        bbar_err = np.zeros_like(np.atleast_1d(bbar))
    bbar, bbar_err = np.atleast_1d(bbar).astype(float), np.atleast_1d(bbar_err).astype(float)

    n_steps = int(math.ceil(s.mixing_horizon / s.dt_f))
    every = max(1, n_steps // s.mixing_points)
    y = np.broadcast_to(_point(y0, coeffs.m), (R, coeffs.m)).copy()
    ts, sig, noise = [], [], []
    for i, (Y, _) in enumerate(_frozen_steps(x, mu, coeffs, A2, s.dt_f, n_steps, y,
                                             streams.derive_seed(s.seed, "mixing"))):
        if (i + 1) % every:
            continue
        v = reader(Y)
        m = v.mean(axis=0)
        ts.append((i + 1) * s.dt_f)
        sig.append(float(np.sum((m - bbar) ** 2)))
        noise.append(float(np.sum(v.var(axis=0, ddof=1) / R + bbar_err ** 2)))
    ts, sig, noise = map(np.asarray, (ts, sig, noise))
    above = sig > 9.0 * noise
    keep = int(np.argmin(above)) if not np.all(above) else len(above)
    if keep < 3:
        raise InsufficientSignalError(
            f"only {keep} grid points above the noise floor before the signal vanished")
    t, ly = ts[:keep], np.log(sig[:keep])
    slope, icpt = np.polyfit(t, ly, 1)
    resid = ly - (slope * t + icpt)
    r2 = 1.0 - np.sum(resid ** 2) / max(np.sum((ly - ly.mean()) ** 2), 1e-300)
    return float(-slope), float(r2)


# ---------------------------------------------------------------------------
# Averaged equations
# ---------------------------------------------------------------------------

def _drift_function(coeffs: CoefficientSet, drift, A2, settings, tol):
    if drift is not None:
        return drift
    if coeffs.averaged_b1 is not None:
        return coeffs.averaged_b1
    if A2 is None:
        raise InputError("no analytic b1_bar: pass A2 so it can be estimated")
    cache = AveragedDrift(coeffs, A2, settings)

    def estimated(x, mu: ParticleCloud):
        out = np.empty(x.shape)
        flat_x = x.reshape(-1, x.shape[-2], x.shape[-1])
        pts = mu.points.reshape(-1, mu.count, mu.dim)
        out_flat = out.reshape(flat_x.shape)
        for r in range(len(flat_x)):
            cloud = ParticleCloud(pts[r if len(pts) > 1 else 0])
            for i, xi in enumerate(flat_x[r]):
                val, err = cache(xi, cloud)
                tries = 0
                while tol is not None and np.max(err) > tol:
                    if tries == 3:
                        raise NumericalError(f"b1_bar stderr {np.max(err):.3g} above {tol}",
                                             residual=float(np.max(err)))
                    cache.settings = replace(cache.settings,
                                             horizon=2 * (cache.settings.horizon or 200.0
                                                          / cache.report.alpha),
                                             replicas=2 * cache.settings.replicas)
                    cache.entries.clear()
                    val, err = cache(xi, cloud)
                    tries += 1
                out_flat[r, i] = val
        return out
    estimated.cache = cache
    return estimated


def averaged_steps(coeffs: CoefficientSet, A1: MonotoneOperator, cfg: SimConfig,
                   mode: str, drift=None, A2=None, settings=None, stderr_tol=None,
                   seed: Optional[int] = None) -> Iterator[np.ndarray]:
    """Yield the averaged ensemble ``X`` at every grid time.

    ``mode="theta_pos"``: deterministic, ``X`` is ``(1, N, n)``.
    ``mode="theta_zero"``: ``X`` is ``(R, N, n)`` driven by the slow stream of
    ``seed`` (default ``cfg.seed``), i.e. the same ``W1`` increments as
    :func:`~slowfast.sde_engine.simulate` for that seed.
    """
    if mode not in ("theta_pos", "theta_zero"):
        raise InputError(f"unknown averaging mode {mode!r}")
    if mode == "theta_zero" and not coeffs.sigma1_y_independent:
        raise InputError("theta = 0 averaging needs sigma1 independent of y")
    bbar = _drift_function(coeffs, drift, A2, settings, stderr_tol)
    R = 1 if mode == "theta_pos" else cfg.repetitions
    N = cfg.n_particles
    if cfg.x0_cloud is not None:
        X = np.broadcast_to(np.asarray(cfg.x0_cloud, float).reshape(N, coeffs.n),
                            (R, N, coeffs.n)).copy()
    else:
        X = np.broadcast_to(_point(cfg.x0, coeffs.n), (R, N, coeffs.n)).copy()
    if not np.all(A1.domain_contains(X)):
        raise InputError("x0 lies outside the closure of D(A1)")
    y_dummy = np.broadcast_to(_point(cfg.y0, coeffs.m), (R, N, coeffs.m))
    yield X
    for k in range(cfg.n_steps):
        cloud = ParticleCloud(X)
        pre = X + cfg.dt * np.asarray(bbar(X, cloud), dtype=float)
        if mode == "theta_zero":
            dW1 = slow_noise(cfg, k, coeffs.d1, seed)
            pre = pre + matvec(coeffs.sigma1(X, cloud, y_dummy), dW1)
        X = _apply_resolvent(A1, cfg.dt, pre)
        if not np.all(np.isfinite(X)):
            raise DivergenceError(f"averaged state non-finite at step {k + 1}")
        yield X


def integrate_averaged(coeffs: CoefficientSet, A1: MonotoneOperator, cfg: SimConfig,
                       mode: str, drift=None, A2=None, settings=None,
                       stderr_tol=None) -> Trajectory:
    """Resolvent-Euler integration of the averaged equation on ``cfg.grid()``.

    ``drift`` overrides ``b1_bar``; otherwise the closed form on ``coeffs``
    is used when present, else the ergodic estimator (needs ``A2``).
    """
    Xs = list(averaged_steps(coeffs, A1, cfg, mode, drift, A2, settings, stderr_tol))
    traj = Trajectory(cfg.grid(), np.stack(Xs), mode="reduced", seed=cfg.seed)
    if mode == "theta_zero":
        traj.streams = {"slow": streams.stream_id(cfg.seed, streams.SLOW)}
    return traj
