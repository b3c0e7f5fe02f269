"""
Large-deviation tools: skeleton equation, rate function, controlled system, probes.

Controls are piecewise constant on the macro grid with values in
``R^{d1 + d2}``; the first ``d1`` components form the slow block (seen by the
skeleton and the slow equation), the rest the fast block.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import binomtest

from . import rng as streams
from .averaging import integrate_averaged
from .errors import AssumptionGateError, InputError
from .measure import ParticleCloud
from .model import AssumptionReport, CoefficientSet, check_assumptions, matvec
from .monotone_ops import MonotoneOperator
from .sde_engine import SimConfig, Trajectory, _apply_resolvent, run_steps, simulate

log = logging.getLogger(__name__)

FD_STEP = 1e-5
PENALTY_START = 10.0
PENALTY_ROUNDS = 12
RESIDUAL_TOL = 1e-4


@dataclass
class ControlPath:
    """Piecewise-constant control: ``values[k]`` acts on ``[times[k], times[k+1])``."""

    times: np.ndarray
    values: np.ndarray
    d1: int
    bound: Optional[float] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.times) != len(self.values) + 1:
            raise InputError("a control needs one value per grid cell")
        if not np.all(np.diff(self.times) > 0):
            raise InputError("control grid must be strictly increasing")
        if not 0 <= self.d1 <= self.values.shape[1]:
            raise InputError("slow block size out of range")
        if self.bound is not None and self.l2_norm_sq > self.bound * (1 + 1e-12):
            raise InputError(f"|h|^2 = {self.l2_norm_sq:.6g} exceeds the bound {self.bound}")

    @classmethod
    def zeros(cls, times, d1: int, d2: int, bound=None) -> "ControlPath":
        return cls(times, np.zeros((len(times) - 1, d1 + d2)), d1, bound)

    @classmethod
    def constant(cls, times, value, d1: int, bound=None) -> "ControlPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(times, np.broadcast_to(value, (len(times) - 1, len(value))).copy(), d1, bound)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def l2_norm_sq(self) -> float:
        return float(np.sum(np.sum(self.values ** 2, axis=1) * self.dt))

    @property
    def slow(self) -> np.ndarray:
        return self.values[:, :self.d1]

    @property
    def fast(self) -> np.ndarray:
        return self.values[:, self.d1:]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"h{i}" for i in range(self.values.shape[1])])
        for t, v in zip(self.times[:-1], self.values):
            w.writerow([repr(float(t))] + [repr(float(c)) for c in v])
        w.writerow([repr(float(self.times[-1]))] + [""] * self.values.shape[1])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path, d1: int, bound=None) -> "ControlPath":
        rows = list(csv.reader(io.StringIO(Path(path).read_text())))[1:]
        times = [float(r[0]) for r in rows]
        values = [[float(c) for c in r[1:]] for r in rows[:-1]]
        return cls(np.array(times), np.array(values), d1, bound)


@dataclass
class RateResult:
    I: float
    control: ControlPath
    residual: float
    iterations: int
    converged: bool
    feasible: bool = True
    penalty: float = 0.0
    endpoint: Optional[np.ndarray] = None

    def to_json(self, path=None, control_ref: Optional[str] = None) -> str:
        data = {"I": self.I if math.isfinite(self.I) else "inf",
                "residual": self.residual, "iterations": self.iterations,
                "converged": self.converged, "feasible": self.feasible,
                "penalty": self.penalty, "control": control_ref,
                "control_norm_sq": self.control.l2_norm_sq}
        text = json.dumps(data, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


# ---------------------------------------------------------------------------
# Skeleton equation
# ---------------------------------------------------------------------------

def _bbar(coeffs: CoefficientSet, drift):
    if drift is not None:
        return drift
    if coeffs.averaged_b1 is None:
        raise InputError("the skeleton needs b1_bar: pass drift= or use a model with a closed form")
    return coeffs.averaged_b1


def _baseline_path(baseline) -> np.ndarray:
    X = baseline.X if isinstance(baseline, Trajectory) else np.asarray(baseline, dtype=float)
    if X.ndim == 4:
        if X.shape[1] != 1 or X.shape[2] != 1:
            raise InputError("the baseline must be a single deterministic path (N = 1)")
        X = X[:, 0, 0]
    return X


def skeleton_paths(H: np.ndarray, baseline, coeffs: CoefficientSet, A1: MonotoneOperator,
                   dt: float, drift=None) -> np.ndarray:
    """Batched skeleton: ``H`` is ``(B, K, d1)``; returns ``(K+1, B, n)``.

    The measure argument at step ``k`` is the Dirac mass at the baseline
    ``Xbar0_k``; ``sigma1`` is evaluated with a dummy fast state since it
    does not depend on ``y``.
    """
    bbar = _bbar(coeffs, drift)
    base = _baseline_path(baseline)
    B, K = H.shape[:2]
    if len(base) != K + 1:
        raise InputError("control grid does not match the baseline grid")
    X = np.empty((K + 1, B, 1, coeffs.n))
    X[0] = base[0]
    y = np.zeros((B, 1, coeffs.m))
    for k in range(K):
        dirac = ParticleCloud(base[k][None, :])
        pre = X[k] + dt * np.asarray(bbar(X[k], dirac), dtype=float)
        pre = pre + dt * matvec(coeffs.sigma1(X[k], dirac, y), H[:, k][:, None, :])
        X[k + 1] = _apply_resolvent(A1, dt, pre)
    return X[:, :, 0]


def solve_skeleton(h: ControlPath, baseline, coeffs: CoefficientSet, A1: MonotoneOperator,
                   dt: Optional[float] = None, drift=None) -> np.ndarray:
    """Skeleton path ``(K+1, n)`` for the control ``h`` (only its slow block acts)."""
    if not coeffs.sigma1_y_independent:
        raise InputError("the skeleton needs sigma1 independent of y")
    if h.d1 != coeffs.d1:
        raise InputError(f"control slow block has {h.d1} components, expected {coeffs.d1}")
    dt = float(h.dt[0]) if dt is None else dt
    return skeleton_paths(h.slow[None], baseline, coeffs, A1, dt, drift)[:, 0]


# ---------------------------------------------------------------------------
# Rate function
# ---------------------------------------------------------------------------

def rate_function(target, coeffs: CoefficientSet, A1: MonotoneOperator, baseline,
                  dt: float, drift=None, d2: Optional[int] = None,
                  penalty0: float = PENALTY_START, rounds: int = PENALTY_ROUNDS,
                  tol: float = RESIDUAL_TOL, max_inner: int = 200) -> RateResult:
    """``I = 1/2 min |h|^2`` over skeleton paths reaching ``target``.

    ``target`` is an endpoint ``(n,)`` or a path ``(K+1, n)``.  Quadratic
    penalty on the residual (endpoint distance, or discrete L2 path distance),
    doubled each outer round; the inner problem is solved by L-BFGS-B with
    central finite-difference gradients.  Targets whose residual stays above
    ``tol`` at the largest penalty are reported infeasible with ``I = inf``.
    """
    base = _baseline_path(baseline)
    K = len(base) - 1
    n, d1 = coeffs.n, coeffs.d1
    d2 = coeffs.d2 if d2 is None else d2
    target = np.asarray(target, dtype=float)
    path_mode = target.ndim == 2
    if (path_mode and target.shape != (K + 1, n)) or (not path_mode and target.shape != (n,)):
        raise InputError(f"target shape {target.shape} does not match the grid/dimension")
    times = dt * np.arange(K + 1)

    def residuals(H):
        X = skeleton_paths(H.reshape(-1, K, d1), base, coeffs, A1, dt, drift)
        if path_mode:
            return np.sqrt(dt * np.sum((X - target[:, None]) ** 2, axis=(0, 2)))
        return np.linalg.norm(X[-1] - target, axis=-1)

    def objective(h, c):
        eps = FD_STEP * np.maximum(1.0, np.abs(h))
        P = h.size
        batch = np.empty((2 * P + 1, P))
        batch[0] = h
        batch[1:P + 1] = h + np.diag(eps)
        batch[P + 1:] = h - np.diag(eps)
        F = 0.5 * dt * np.sum(batch ** 2, axis=1) + c * residuals(batch) ** 2
        grad = (F[1:P + 1] - F[P + 1:]) / (2 * eps)
        return F[0], grad

    h = np.zeros(K * d1)
    c = penalty0
    iters, ok, res = 0, True, float(residuals(h[None])[0])
    if res <= tol * 1e-3:
        rounds = 0
    for _ in range(rounds):
        out = minimize(objective, h, args=(c,), jac=True, method="L-BFGS-B",
                       options={"maxiter": max_inner, "gtol": 1e-10, "ftol": 1e-15})
        h, iters = out.x, iters + out.nit
        ok = bool(out.success) or out.status == 0
        res = float(residuals(h[None])[0])
        if res <= tol:
            break
        c *= 2.0
    values = np.concatenate([h.reshape(K, d1), np.zeros((K, d2))], axis=1)
    control = ControlPath(times, values, d1)
    feasible = res <= tol
    endpoint = skeleton_paths(h.reshape(1, K, d1), base, coeffs, A1, dt, drift)[-1, 0]
    I = 0.5 * control.l2_norm_sq if feasible else math.inf
    if not ok:
        log.warning("rate_function: inner optimiser stagnated (residual %.3g)", res)
    return RateResult(I, control, res, iters, bool(ok and feasible), feasible, c, endpoint)


def exceedance_rate(eta: float, coeffs: CoefficientSet, A1: MonotoneOperator, baseline,
                    dt: float, drift=None, hit_times: Optional[Sequence[float]] = None,
                    **kw) -> RateResult:
    """Cheapest skeleton deviation of size ``eta`` from the baseline (1-D slow state).

    Minimises over endpoint targets ``Xbar0_t +- eta`` at the candidate hit
    times (default: the final time).
    """
    if coeffs.n != 1:
        raise InputError("exceedance_rate is implemented for a scalar slow state")
    base = _baseline_path(baseline)
    K = len(base) - 1
    ks = [K] if hit_times is None else sorted({max(1, int(round(t / dt))) for t in hit_times})
    best = None
    for k in ks:
        for sign in (1.0, -1.0):
            res = rate_function(base[k] + sign * eta, coeffs, A1, base[:k + 1], dt, drift, **kw)
            if best is None or res.I < best.I:
                best = res
    return best


# ---------------------------------------------------------------------------
# Controlled slow-fast system
# ---------------------------------------------------------------------------

def ldp_config(cfg: SimConfig) -> SimConfig:
    """The LDP regime: slow noise ``sqrt(eps)``."""
    return replace(cfg, theta=0.5)


def simulate_controlled(u: ControlPath, coeffs: CoefficientSet, A1: MonotoneOperator,
                        A2: MonotoneOperator, cfg: SimConfig,
                        companion: Optional[Trajectory] = None,
                        report: Optional[AssumptionReport] = None,
                        mode: str = "full") -> Trajectory:
    """Controlled particle system; its measure argument is the companion's cloud.

    The companion is the uncontrolled run with the same seed (simulated here
    when not supplied).  Slow drift gains ``sigma1 pi1 u``, fast drift gains
    ``(delta eps)^{-1/2} sigma2 pi2 u``; slow noise is ``sqrt(eps) sigma1 dW1``.
    """
    report = report if report is not None else check_assumptions(coeffs)
    if not report.sigma2_bounded:
        raise AssumptionGateError("sigma2 is not bounded: controlled system refused",
                                  report=report)
    cfg = ldp_config(cfg)
    K = cfg.n_steps
    if u.values.shape != (K, coeffs.d1 + coeffs.d2) or u.d1 != coeffs.d1:
        raise InputError("control does not match the grid or (d1, d2)")
    if not np.allclose(u.times, cfg.grid(), rtol=0, atol=1e-12):
        raise InputError("control grid differs from the simulation grid")
    if companion is None:
        companion = simulate(coeffs, A1, A2, cfg, mode="reduced")
    if companion.X.shape[:3] != (K + 1, cfg.repetitions, cfg.n_particles):
        raise InputError("companion trajectory does not match the config")

    state = {"k": 0}
    gain = 1.0 / math.sqrt(cfg.delta * cfg.epsilon)

    def slow_shift(X, cloud, Y):
        return matvec(coeffs.sigma1(X, cloud, Y), u.slow[state["k"]])

    def fast_shift(X, cloud, Y):
        return gain * matvec(coeffs.sigma2(X, cloud, Y), u.fast[state["k"]])

    def law(k):
        state["k"] = k
        return ParticleCloud(companion.X[k])

    snaps = list(run_steps(coeffs, A1, A2, cfg, law_fn=law, slow_shift=slow_shift,
                           fast_shift=fast_shift))
    X = np.stack([s.X for s in snaps])
    if mode == "full":
        return Trajectory(cfg.grid(), X, np.stack([s.Y for s in snaps]),
                          np.stack([s.k1_var for s in snaps]),
                          np.stack([s.k2_var for s in snaps]), seed=cfg.seed)
    return Trajectory(cfg.grid(), X, mode="reduced", seed=cfg.seed)


# ---------------------------------------------------------------------------
# Continuity and rare-event checks
# ---------------------------------------------------------------------------

def oscillating_control(h: ControlPath, amplitude: float, omega: float) -> ControlPath:
    """``h + amplitude sin(omega t)`` on the slow block, using exact cell averages."""
    t = h.times
    avg = (np.cos(omega * t[:-1]) - np.cos(omega * t[1:])) / (omega * np.diff(t))
    values = h.values.copy()
    values[:, :h.d1] += amplitude * avg[:, None]
    return ControlPath(t, values, h.d1, h.bound)


def weak_continuity_check(h: ControlPath, amplitude: float, ks: Sequence[int],
                          coeffs: CoefficientSet, A1: MonotoneOperator, baseline,
                          drift=None) -> list[tuple[int, float, float]]:
    """Rows ``(k, omega_k, sup_t |X^{h_k} - X^h|)`` for ``omega_k = 2^k pi / T``."""
    T = h.times[-1] - h.times[0]
    ref = solve_skeleton(h, baseline, coeffs, A1, drift=drift)
    rows = []
    for k in ks:
        omega = 2.0 ** k * math.pi / T
        hk = oscillating_control(h, amplitude, omega)
        Xk = solve_skeleton(hk, baseline, coeffs, A1, drift=drift)
        rows.append((int(k), omega, float(np.max(np.linalg.norm(Xk - ref, axis=-1)))))
    return rows


@dataclass
class ProbeRow:
    epsilon: float
    delta: float
    n_paths: int
    hits: int
    p_hat: float
    ci_low: float
    ci_high: float
    rate: float            # -eps log p_hat (inf when no hits)
    rate_bound: float      # -eps log ci_high, a lower bound on the rate


def rare_event_probe(eta: float, epsilons: Sequence[float], coeffs: CoefficientSet,
                     A1: MonotoneOperator, A2: MonotoneOperator, cfg: SimConfig, n_mc: int,
                     delta_rule: Callable[[float], float] = lambda e: e ** 1.5,
                     baseline: Optional[Trajectory] = None, drift=None,
                     progress: Optional[Callable] = None, chunk: int = 64) -> list[ProbeRow]:
    """Monte Carlo estimate of ``P(sup_t |X_t - Xbar0_t| > eta)`` per epsilon.

    ``n_mc`` independent repetitions of the ``cfg.n_particles`` system are
    run (in chunks of ``chunk`` repetitions, each with its own derived seed);
    every particle path counts as one sample.  Intervals are Wilson 95%.
    """
    if n_mc < 1000:
        raise InputError("n_mc must be at least 1000")
    if baseline is None:
        base_cfg = replace(cfg, n_particles=1, repetitions=1, x0_cloud=None)
        baseline = integrate_averaged(coeffs, A1, base_cfg, "theta_pos", drift=drift)
    base = _baseline_path(baseline)
    rows = []
    for eps in epsilons:
        delta = delta_rule(eps)
        hits = n = 0
        for start in range(0, n_mc, chunk):
            reps = min(chunk, n_mc - start)
            seed = streams.derive_seed(cfg.seed, "probe", repr(eps), start)
            ecfg = ldp_config(replace(cfg, epsilon=eps, delta=delta, fast_substeps=None,
                                      repetitions=reps, seed=seed))
            sup = np.zeros((reps, cfg.n_particles))
            for k, ens in enumerate(run_steps(coeffs, A1, A2, ecfg)):
                np.maximum(sup, np.linalg.norm(ens.X - base[k], axis=-1), out=sup)
            hits += int(np.count_nonzero(sup > eta))
            n += sup.size
        ci = binomtest(hits, n).proportion_ci(0.95, method="wilson")
        p = hits / n
        rate = -eps * math.log(p) if hits else math.inf
        bound = -eps * math.log(ci.high) if ci.high > 0 else math.inf
        rows.append(ProbeRow(eps, delta, n, hits, p, ci.low, ci.high, rate, bound))
        if progress is not None:
            progress(rows[-1])
    return rows
