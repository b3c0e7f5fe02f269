"""
Problem definitions: coefficient sets, sampled assumption probes, built-in models.

Coefficient handles follow one broadcasting convention so that a whole
ensemble is evaluated in a single call::

    b1(x, mu, y)      x: (..., k, n), mu.points: (..., count, n), y: (..., k, m)
                      -> (..., k, n)
    sigma1(x, mu, y)  -> (..., k, n, d1)
    b2(x, mu, y)      -> (..., k, m)
    sigma2(x, mu, y)  -> (..., k, m, d2)

Leading axes of ``x`` and ``mu.points`` broadcast against each other, so one
cloud may serve many query points and a stack of clouds may serve a stack of
particle systems.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import AssumptionGateError, InputError, ModelError
from .measure import ParticleCloud, w2_batched_1d, w2_distance
from .monotone_ops import ConvexSet, IndicatorOperator, MonotoneOperator, ZeroOperator

log = logging.getLogger(__name__)

Drift = Callable[[np.ndarray, ParticleCloud, np.ndarray], np.ndarray]


@dataclass
class CoefficientSet:
    """The drift/diffusion quadruple of the slow-fast system.

    ``averaged_b1`` is an optional closed form ``(x, mu) -> b1_bar`` used to
    bypass ergodic estimation.
    """

    b1: Drift
    sigma1: Drift
    b2: Drift
    sigma2: Drift
    n: int
    m: int
    d1: int
    d2: int
    theta: float = 0.0
    sigma1_y_independent: bool = False
    averaged_b1: Optional[Callable[[np.ndarray, ParticleCloud], np.ndarray]] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.theta < 0:
            raise InputError("theta must be nonnegative")
        for k in ("n", "m", "d1", "d2"):
            if getattr(self, k) < 1:
                raise InputError(f"dimension {k} must be positive")

    def validate(self, n_samples: int = 16, seed: int = 0) -> None:
        """Check output shapes (and y-independence of sigma1 when flagged) on samples."""
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (n_samples, 1, self.n))
        y1 = rng.uniform(-1, 1, (n_samples, 1, self.m))
        y2 = rng.uniform(-1, 1, (n_samples, 1, self.m))
        mu = ParticleCloud(rng.uniform(-1, 1, (n_samples, 4, self.n)))
        expect = {
            "b1": (n_samples, 1, self.n), "sigma1": (n_samples, 1, self.n, self.d1),
            "b2": (n_samples, 1, self.m), "sigma2": (n_samples, 1, self.m, self.d2),
        }
        for name, shape in expect.items():
            out = np.shape(_evaluate(getattr(self, name), name, x, mu, y1))
            if out != shape:
                raise InputError(f"{name} returned shape {out}, expected {shape}")
        if self.sigma1_y_independent:
            s_a = _evaluate(self.sigma1, "sigma1", x, mu, y1)
            s_b = _evaluate(self.sigma1, "sigma1", x, mu, y2)
            if not np.allclose(s_a, s_b, rtol=0, atol=1e-12):
                raise InputError("sigma1 flagged y-independent but varies with y")


def _evaluate(fn, name, x, mu, y):
    try:
        return np.asarray(fn(x, mu, y), dtype=float)
    except Exception as exc:  # noqa: BLE001 - rewrapped with the offending input
        offending = None
        lead = np.shape(x)[:-2]
        x_flat = np.reshape(x, (-1,) + np.shape(x)[-2:])
        y_flat = np.reshape(y, (-1,) + np.shape(y)[-2:])
        per_row = mu.batched and mu.points.shape[:-2] == lead
        if per_row:
            mu_flat = mu.points.reshape((-1,) + mu.points.shape[-2:])
        if len(x_flat) > 1 and (per_row or not mu.batched):
            for i in range(len(x_flat)):
                mu_i = ParticleCloud(mu_flat[i]) if per_row else mu
                try:
                    fn(x_flat[i], mu_i, y_flat[i])
                except Exception:  # noqa: BLE001
                    offending = (x_flat[i], y_flat[i])
                    break
        raise ModelError(f"{name} failed: {exc}", offending_input=offending) from exc


def matvec(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Batched ``mat @ vec`` over leading axes."""
    return np.einsum("...ij,...j->...i", mat, vec)


# ---------------------------------------------------------------------------
# Assumption probes
# ---------------------------------------------------------------------------

@dataclass
class BoxSampler:
    """Uniform sampler over bounding boxes for x, cloud atoms and y."""

    x_low: float = -2.0
    x_high: float = 2.0
    y_low: float = -2.0
    y_high: float = 2.0
    cloud_count: int = 8

    def draw(self, rng, n_pairs, n, m, scale=1.0):
        xl, xh = scale * self.x_low, scale * self.x_high
        yl, yh = scale * self.y_low, scale * self.y_high
        x = rng.uniform(xl, xh, (n_pairs, 1, n))
        mu = rng.uniform(xl, xh, (n_pairs, self.cloud_count, n))
        y = rng.uniform(yl, yh, (n_pairs, 1, m))
        return x, ParticleCloud(mu), y


@dataclass
class AssumptionReport:
    """Sampled constants of the structural hypotheses.

    Lipschitz-type constants are maxima of difference quotients over the
    sample (lower bounds of the true constants); ``beta`` is the sampled
    infimum of the dissipativity quotient.
    """

    lip_b1_sigma1: float
    lip_b2_sigma2_xmu: float
    lip_sigma2_y: float
    beta: float
    alpha: Optional[float]
    sigma2_bound: float
    sigma2_bounded: bool
    growth_b1_sigma1: float
    growth_b2_sigma2: float
    sigma1_y_independent: Optional[bool]
    n_samples: int

    @property
    def lipschitz_finite(self) -> bool:
        return bool(np.isfinite(self.lip_b1_sigma1) and np.isfinite(self.lip_b2_sigma2_xmu)
                    and np.isfinite(self.lip_sigma2_y))

    @property
    def dissipative(self) -> bool:
        return bool(self.beta > 2.0 * self.lip_sigma2_y)

    @property
    def gate_ok(self) -> bool:
        return self.lipschitz_finite and self.dissipative

    def flags(self) -> dict:
        return {"lipschitz_finite": self.lipschitz_finite, "dissipative": self.dissipative,
                "sigma2_bounded": self.sigma2_bounded,
                "sigma1_y_independent": self.sigma1_y_independent}

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["flags"] = self.flags()
        return out

    def require_gate(self, what: str = "this run") -> None:
        if not self.gate_ok:
            raise AssumptionGateError(
                f"assumption gate failed for {what}: beta={self.beta:.6g}, "
                f"2L'={2 * self.lip_sigma2_y:.6g}", report=self)


def _sq(v):
    return np.sum(np.reshape(v, v.shape[:1] + (-1,)) ** 2, axis=1)


def _w2_sq(mu1: ParticleCloud, mu2: ParticleCloud) -> np.ndarray:
    if mu1.dim == 1:
        return w2_batched_1d(mu1.points, mu2.points) ** 2
    return np.array([w2_distance(ParticleCloud(a), ParticleCloud(b)) ** 2
                     for a, b in zip(mu1.points, mu2.points)])


def _directional_max(f, x, mu: ParticleCloud, y, blocks, h: float = 0.25) -> float:
    """Refine a sampled Lipschitz quotient along the worst local direction.

    At each base point the joint perturbation ``(dx, v, dy)`` (over the listed
    ``blocks``) is scored by a finite-difference Jacobian; the top singular
    direction is then evaluated as a genuine difference pair.  The cloud is
    perturbed by translation, for which ``W2(mu, mu + h v) = h |v|`` exactly.
    Returns the largest such quotient (a sample, hence still a lower bound).
    """
    B = x.shape[0]
    sizes = {"x": x.shape[-1], "mu": mu.dim, "y": y.shape[-1]}
    p = sum(sizes[b] for b in blocks)

    def moved(D):
        # D: (B, r, p) -> evaluations at base + h*D, shape (B, r, q)
        r = D.shape[1]
        xs, ms, ys = (np.repeat(a, r, axis=0) for a in (x, mu.points, y))
        off = 0
        D = D.reshape(B * r, p)
        for b in blocks:
            part = h * D[:, off:off + sizes[b]][:, None, :]
            if b == "x":
                xs = xs + part
            elif b == "mu":
                ms = ms + part
            else:
                ys = ys + part
            off += sizes[b]
        return f(xs, ParticleCloud(ms), ys).reshape(B, r, -1)

    f0 = f(x, mu, y).reshape(B, 1, -1)
    J = (moved(np.broadcast_to(np.eye(p), (B, p, p))) - f0) / h
    _, vecs = np.linalg.eigh(J @ np.swapaxes(J, 1, 2))
    best = vecs[:, :, -1][:, None, :]
    num = np.sum((moved(best) - f0) ** 2, axis=(1, 2))
    return float(np.max(num) / h ** 2)


def _max_quotient(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(np.max(q)) if q.size else 0.0


def check_assumptions(coeffs: CoefficientSet, sampler: Optional[BoxSampler] = None,
                      n_samples: int = 10_000, seed: int = 0) -> AssumptionReport:
    """Monte Carlo estimates of the Lipschitz, dissipativity and growth constants."""
    if n_samples < 2:
        raise InputError("need at least two samples")
    sampler = sampler or BoxSampler()
    rng = np.random.default_rng(seed)
    n, m = coeffs.n, coeffs.m
    x1, mu1, y1 = sampler.draw(rng, n_samples, n, m)
    x2, mu2, y2 = sampler.draw(rng, n_samples, n, m)

    def ev(name, x, mu, y):
        return _evaluate(getattr(coeffs, name), name, x, mu, y)

    dx2, dy2, dw2 = _sq(x1 - x2), _sq(y1 - y2), _w2_sq(mu1, mu2)

    b1a, s1a = ev("b1", x1, mu1, y1), ev("sigma1", x1, mu1, y1)
    b1b, s1b = ev("b1", x2, mu2, y2), ev("sigma1", x2, mu2, y2)
    lip1 = _max_quotient(_sq(b1a - b1b) + _sq(s1a - s1b), dx2 + dw2 + dy2)

    b2a, s2a = ev("b2", x1, mu1, y1), ev("sigma2", x1, mu1, y1)
    b2x, s2x = ev("b2", x2, mu2, y1), ev("sigma2", x2, mu2, y1)
    lip2 = _max_quotient(_sq(b2a - b2x) + _sq(s2a - s2x), dx2 + dw2)

    b2y, s2y = ev("b2", x1, mu1, y2), ev("sigma2", x1, mu1, y2)
    ds2 = _sq(s2a - s2y)
    lip_s2y = _max_quotient(ds2, dy2)
    inner = np.sum(np.reshape((y1 - y2) * (b2a - b2y), (n_samples, -1)), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        quot = np.where(dy2 > 0, -(2.0 * inner + ds2) / np.where(dy2 > 0, dy2, 1.0), np.inf)
    beta = float(np.min(quot))
    alpha = beta - 2.0 * lip_s2y if beta > 2.0 * lip_s2y else None

    # Refine the three Lipschitz constants from the worst sampled base points.
    def top(q_num, q_den, k=8):
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(q_den > 0, q_num / np.where(q_den > 0, q_den, 1.0), 0.0)
        idx = np.argsort(-q)[:k]
        return x1[idx], ParticleCloud(mu1.points[idx]), y1[idx]

    def pair(bn, sn):
        return lambda x, mu, y: np.concatenate(
            [ev(bn, x, mu, y).reshape(len(x), -1), ev(sn, x, mu, y).reshape(len(x), -1)], axis=1)

    lip1 = max(lip1, _directional_max(pair("b1", "sigma1"),
                                      *top(_sq(b1a - b1b) + _sq(s1a - s1b), dx2 + dw2 + dy2),
                                      ("x", "mu", "y")))
    lip2 = max(lip2, _directional_max(pair("b2", "sigma2"),
                                      *top(_sq(b2a - b2x) + _sq(s2a - s2x), dx2 + dw2),
                                      ("x", "mu")))
    lip_s2y = max(lip_s2y, _directional_max(
        lambda x, mu, y: ev("sigma2", x, mu, y).reshape(len(x), -1),
        *top(ds2, dy2), ("y",)))
    alpha = beta - 2.0 * lip_s2y if beta > 2.0 * lip_s2y else None

    norms = np.sqrt(_sq(s2a))
    bound = float(np.max(norms))
    xf, muf, yf = sampler.draw(rng, n_samples, n, m, scale=4.0)
    far = float(np.max(np.sqrt(_sq(ev("sigma2", xf, muf, yf)))))
    bounded = far <= 1.5 * bound + 1e-12

    mom = 1.0 + _sq(x1) + np.mean(np.sum(mu1.points ** 2, axis=-1), axis=-1) + _sq(y1)
    growth1 = _max_quotient(_sq(b1a) + _sq(s1a), mom)
    growth2 = _max_quotient(_sq(b2a) + _sq(s2a), mom)

    y_indep = None
    if coeffs.sigma1_y_independent:
        s1y = ev("sigma1", x1, mu1, y2)
        y_indep = bool(np.max(np.abs(s1a - s1y)) <= 1e-12)

    report = AssumptionReport(
        lip_b1_sigma1=lip1, lip_b2_sigma2_xmu=lip2, lip_sigma2_y=lip_s2y, beta=beta,
        alpha=alpha, sigma2_bound=bound, sigma2_bounded=bool(bounded),
        growth_b1_sigma1=growth1, growth_b2_sigma2=growth2,
        sigma1_y_independent=y_indep, n_samples=n_samples)
    log.debug("assumption report: %s", report)
    return report


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------

def _const_matrix(mat: np.ndarray):
    mat = np.asarray(mat, dtype=float)

    def sigma(x, mu, y):
        return np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)
    return sigma


def linear_test(a=1.0, kappa=0.5, c=1.0, beta=2.0, g=1.0, s1=1.0, s2=1.0,
                theta=0.0) -> CoefficientSet:
    """One-dimensional linear-dissipative slow-fast model.

    ``b1 = -a x + kappa (mean(mu) - x) + c y``, ``b2 = -beta y + g x`` with
    constant diffusions ``s1``, ``s2``.  The frozen law is Gaussian with mean
    ``g x / beta`` and variance ``s2^2 / (2 beta)``, which gives the closed form
    ``b1_bar = -a x + kappa (mean(mu) - x) + c g x / beta``.
    """
    def b1(x, mu, y):
        return -a * x + kappa * (mu.mean() - x) + c * y

    def b2(x, mu, y):
        return -beta * y + g * x

    def b1_bar(x, mu):
        return -a * x + kappa * (mu.mean() - x) + c * g * x / beta

    return CoefficientSet(
        b1=b1, sigma1=_const_matrix([[s1]]), b2=b2, sigma2=_const_matrix([[s2]]),
        n=1, m=1, d1=1, d2=1, theta=theta, sigma1_y_independent=True,
        averaged_b1=b1_bar, name="linear_test",
        params=dict(a=a, kappa=kappa, c=c, beta=beta, g=g, s1=s1, s2=s2, theta=theta))


def ou_frozen(beta=2.0, g=0.0, s=1.0, s1=0.0, readout="y", theta=0.0) -> CoefficientSet:
    """Fast Ornstein-Uhlenbeck model ``b2 = -beta y + g``, ``sigma2 = s``.

    The slow drift reads the fast state out: ``b1 = y`` (``readout="y"``) or
    ``b1 = y^2`` (``readout="y2"``).  Closed forms: ``g / beta`` and
    ``(g / beta)^2 + s^2 / (2 beta)`` respectively.
    """
    if readout == "y":
        def b1(x, mu, y):
            return y + 0.0 * x
        bar = g / beta
    elif readout == "y2":
        def b1(x, mu, y):
            return y * y + 0.0 * x
        bar = (g / beta) ** 2 + s * s / (2.0 * beta)
    else:
        raise InputError(f"unknown readout {readout!r}")

    def b2(x, mu, y):
        return -beta * y + g + 0.0 * x

    def b1_bar(x, mu):
        return np.full(np.shape(x), bar)

    return CoefficientSet(
        b1=b1, sigma1=_const_matrix([[s1]]), b2=b2, sigma2=_const_matrix([[s]]),
        n=1, m=1, d1=1, d2=1, theta=theta, sigma1_y_independent=True,
        averaged_b1=b1_bar, name="ou_frozen",
        params=dict(beta=beta, g=g, s=s, s1=s1, readout=readout, theta=theta))


@dataclass
class GradientField:
    """Named gradient family ``z -> k z`` / ``k tanh(z)`` / ``0`` (for config use)."""

    kind: str = "zero"
    k: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "linear", "tanh"):
            raise InputError(f"unknown gradient kind {self.kind!r}")

    def __call__(self, z):
        if self.kind == "linear":
            return self.k * z
        if self.kind == "tanh":
            return self.k * np.tanh(z)
        return np.zeros_like(z)


@dataclass
class AggregationDiffusionSpec:
    """Potential gradients, constant diffusions, slow domain and fast operator."""

    grad_v1: Callable
    grad_v2: Callable
    grad_v3: Callable
    grad_v4: Callable
    sigma1: np.ndarray
    sigma2: np.ndarray
    domain: Optional[ConvexSet] = None
    A2: Optional[MonotoneOperator] = None
    beta: float = 0.0

    def check_one_sided(self, n_samples: int = 2000, seed: int = 0) -> float:
        """Sampled infimum of ``<y1-y2, gradV3(y1)-gradV3(y2)> / |y1-y2|^2``."""
        n = np.shape(self.sigma1)[0]
        rng = np.random.default_rng(seed)
        y1 = rng.uniform(-3, 3, (n_samples, n))
        y2 = rng.uniform(-3, 3, (n_samples, n))
        num = np.sum((y1 - y2) * (self.grad_v3(y1) - self.grad_v3(y2)), axis=-1)
        return float(np.min(num / np.sum((y1 - y2) ** 2, axis=-1)))


def _convolve(grad, x, mu: ParticleCloud):
    diff = x[..., :, None, :] - mu.points[..., None, :, :]
    return np.mean(grad(diff), axis=-2)


def build_aggregation_diffusion(spec: AggregationDiffusionSpec):
    """Coefficients of the aggregation-diffusion example plus the slow operator.

    ``b1 = -[gradV1(y) + gradV2 * mu (x)]``, ``b2 = -[gradV3(y) + gradV4 * mu (x)]``
    where ``*`` is the empirical convolution over cloud atoms.  Returns
    ``(coeffs, A1)``; ``A1`` is the indicator of the domain (zero when absent).
    """
    s1 = np.atleast_2d(np.asarray(spec.sigma1, dtype=float))
    s2 = np.atleast_2d(np.asarray(spec.sigma2, dtype=float))
    n = s1.shape[0]
    if s2.shape[0] != n:
        raise InputError("sigma1 and sigma2 must have the same row count (n = m)")
    if spec.domain is not None and spec.domain.dimension != n:
        raise InputError("domain dimension does not match sigma1")
    if spec.beta > 0 and spec.check_one_sided() < spec.beta - 1e-9:
        raise InputError("gradV3 violates the declared one-sided bound")

    def b1(x, mu, y):
        return -(spec.grad_v1(y) + _convolve(spec.grad_v2, x, mu))

    def b2(x, mu, y):
        return -(spec.grad_v3(y) + _convolve(spec.grad_v4, x, mu))

    g1, g3 = spec.grad_v1, spec.grad_v3
    if (isinstance(g1, GradientField) and isinstance(g3, GradientField)
            and g1.kind in ("linear", "zero") and g3.kind == "linear"
            and (spec.A2 is None or isinstance(spec.A2, ZeroOperator))):
        k1 = g1.k if g1.kind == "linear" else 0.0

        def bar(x, mu):
            shift = _convolve(spec.grad_v4, x, mu)
            return -(k1 * (-shift / g3.k) + _convolve(spec.grad_v2, x, mu))
    else:
        bar = None

    coeffs = CoefficientSet(
        b1=b1, sigma1=_const_matrix(s1), b2=b2, sigma2=_const_matrix(s2),
        n=n, m=n, d1=s1.shape[1], d2=s2.shape[1], theta=0.0,
        sigma1_y_independent=True, averaged_b1=bar, name="aggregation_diffusion")
    A1 = IndicatorOperator(spec.domain) if spec.domain is not None else ZeroOperator(n)
    return coeffs, A1


BUILTIN_MODELS = ("linear_test", "aggregation_diffusion", "ou_frozen")


def model_from_config(name: str, params: Optional[dict] = None) -> CoefficientSet:
    """Instantiate a built-in model by name with keyword parameters."""
    params = dict(params or {})
    try:
        if name == "linear_test":
            return linear_test(**params)
        if name == "ou_frozen":
            return ou_frozen(**params)
        if name == "aggregation_diffusion":
            grads = {k: GradientField(**params.pop(k, {"kind": "zero"}))
                     for k in ("grad_v1", "grad_v2", "grad_v3", "grad_v4")}
            spec = AggregationDiffusionSpec(
                sigma1=params.pop("sigma1", [[1.0]]), sigma2=params.pop("sigma2", [[1.0]]),
                beta=params.pop("beta", 0.0), **grads)
            if params:
                raise InputError(f"unknown aggregation_diffusion parameters {sorted(params)}")
            coeffs, _ = build_aggregation_diffusion(spec)
            return coeffs
    except TypeError as exc:
        raise InputError(f"bad parameters for model {name!r}: {exc}") from exc
    raise InputError(f"unknown model {name!r}; built-ins are {BUILTIN_MODELS}")
