"""Small coefficient builders shared by the test modules."""
from __future__ import annotations

import itertools

import numpy as np

from slowfast.model import CoefficientSet
from slowfast.monotone_ops import (
    Ball,
    Box,
    HalfSpace,
    IndicatorOperator,
    Polytope,
    ZeroOperator,
    builtin_subgradient,
)
from slowfast.sde_engine import SimConfig, run_steps, slow_noise

TRIANGLE = Polytope([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 1.0], [0.25, 0.25])
SETS = {
    "box": Box([-1.0, -1.0], [1.0, 1.0]),
    "ball": Ball([0.0, 0.0], 1.0),
    "triangle": TRIANGLE,
}
_PERMS = {k: np.array(list(itertools.permutations(range(k)))) for k in range(1, 9)}


def const(value):
    mat = np.atleast_2d(value).astype(float)
    return lambda x, mu, y: np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)


def zero_drift(x, mu, y):
    return 0.0 * x


def coefficients(b1=zero_drift, b2=None, s1=0.0, s2=0.0, n=1, m=1, theta=0.0, **kw):
    if b2 is None:
        def b2(x, mu, y):
            return 0.0 * y
    s1 = np.atleast_2d(s1) if np.ndim(s1) else s1 * np.eye(n)
    s2 = np.atleast_2d(s2) if np.ndim(s2) else s2 * np.eye(m)
    return CoefficientSet(b1=b1, sigma1=const(s1), b2=b2, sigma2=const(s2), n=n, m=m,
                          d1=s1.shape[1], d2=s2.shape[1], theta=theta,
                          sigma1_y_independent=True, **kw)


def builtin_operators():
    return {
        "zero": ZeroOperator(2),
        "halfspace": IndicatorOperator(HalfSpace([1.0, -2.0], 0.5)),
        "box": IndicatorOperator(Box([-1.0, 0.0], [1.0, 2.0])),
        "ball": IndicatorOperator(Ball([0.5, -0.5], 1.5)),
        "triangle": IndicatorOperator(TRIANGLE),
        "abs": builtin_subgradient("abs", 2),
        "half_square": builtin_subgradient("half_square", 2),
    }


def brute_force_w2(a: np.ndarray, b: np.ndarray) -> float:
    """Exhaustive search over every bijection between the two atom lists."""
    k = len(a)
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    totals = cost[np.arange(k), _PERMS[k]].mean(axis=1)
    return float(np.sqrt(totals.min()))


def gbm(mu_rate: float = 0.5, vol: float = 0.8) -> CoefficientSet:
    """Slow component dX = mu X dt + vol X dW, decoupled from a trivial fast one."""
    return CoefficientSet(
        b1=lambda x, mu, y: mu_rate * x,
        sigma1=lambda x, mu, y: vol * x[..., None],
        b2=lambda x, mu, y: -y, sigma2=const(0.0), n=1, m=1, d1=1, d2=1)


def gbm_strong_errors(dts, n_paths: int = 4000, seed: int = 5, mu_rate=0.5, vol=0.8):
    """RMS endpoint error of the engine against the exact GBM solution on the same path."""
    coeffs = gbm(mu_rate, vol)
    out = []
    for dt in dts:
        cfg = SimConfig(T=1.0, dt=dt, delta=1.0, epsilon=1.0, theta=0.0, n_particles=n_paths,
                        x0=1.0, seed=seed)
        W = np.zeros((1, n_paths, 1))
        for k, ens in enumerate(run_steps(coeffs, ZeroOperator(1), ZeroOperator(1), cfg)):
            if k < cfg.n_steps:
                W += slow_noise(cfg, k, 1)
        exact = np.exp((mu_rate - 0.5 * vol ** 2) * cfg.T + vol * W)
        out.append(float(np.sqrt(np.mean((ens.X - exact) ** 2))))
    return out


def log_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def constrained_run(name: str, T: float, n_particles: int = 8):
    """Outward drift plus noise; returns (max violation, complementarity mismatches, exits).

    The bounded-variation part may only grow, and only on steps whose
    predictor left the set.
    """
    cset = SETS[name]
    c = np.array([0.2, 0.2]) if name == "triangle" else np.zeros(2)
    coeffs = coefficients(b1=lambda x, mu, y: 2.0 * (x - c) + 0.5, b2=lambda x, mu, y: -y,
                          s1=0.5, s2=1.0, n=2, m=2)
    cfg = SimConfig(T=T, dt=1e-3, delta=1e-2, epsilon=1.0, theta=0.0, n_particles=n_particles,
                    x0=c, seed=1)
    worst, mismatches, exits, prev = -np.inf, 0, 0, None
    for ens in run_steps(coeffs, IndicatorOperator(cset), ZeroOperator(2), cfg):
        worst = max(worst, float(cset.violation(ens.X).max()))
        if prev is not None:
            dk = ens.k1_var - prev.k1_var
            left = cset.violation(ens.pre) > 0
            mismatches += int(np.sum((dk > 0) != left)) + int(np.sum(dk < 0))
            exits += int(left.sum())
        prev = ens
    return worst, mismatches, exits
