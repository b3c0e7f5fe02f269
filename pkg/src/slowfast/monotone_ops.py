"""
Maximal monotone operators through their resolvents
===================================================

The schemes in this package never evaluate a multivalued operator ``A(x)`` as a
set.  They only need the resolvent ``J_lam = (I + lam A)^{-1}``, which for the
three supported families is

* the identity, for the zero operator;
* the Euclidean projection onto a closed convex set, for the normal cone
  (subdifferential of the indicator function) of that set;
* the proximal map ``argmin_u lam*psi(u) + |u - x|^2 / 2``, for the
  subdifferential of a convex function ``psi``.

All point arguments broadcast over leading axes: a point is an array whose
last axis has length ``dimension``.  This is what lets the particle engine
project a whole ``(reps, particles, n)`` ensemble in one call.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InputError, NumericalError

DYKSTRA_MAX_ITER = 10_000
DYKSTRA_TOL = 1e-10
PROX_MAX_ITER = 200
BOUNDARY_TOL = 1e-8
ACTIVE_TOL = 1e-7
ACTIVE_SET_LIMIT = 256


def _n_faces(n_facets: int, dim: int) -> int:
    return sum(math.comb(n_facets, k) for k in range(2, min(dim, n_facets) + 1))


def _as_points(x, dimension: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dimension:
        raise InputError(
            f"point has trailing dimension {x.shape[-1]}, expected {dimension}")
    return x


# ---------------------------------------------------------------------------
# Convex sets
# ---------------------------------------------------------------------------

class ConvexSet:
    """Closed convex subset of R^n with a nonempty interior."""

    dimension: int

    def project(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def facets(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(normals, offsets)`` describing ``{x : normals @ x <= offsets}``."""
        raise NotImplementedError(f"{type(self).__name__} has no facet list")

    def violation(self, x) -> np.ndarray:
        """Largest constraint excess, ``<= 0`` inside the set."""
        normals, offsets = self.facets()
        x = _as_points(x, self.dimension)
        return np.max(x @ normals.T - offsets, axis=-1)

    def contains(self, x, tol: float = 1e-10) -> np.ndarray:
        return self.violation(x) <= tol

    def distance(self, x) -> np.ndarray:
        x = _as_points(x, self.dimension)
        return np.linalg.norm(x - self.project(x), axis=-1)

    def outward_normal(self, x) -> np.ndarray:
        """Unit outward normal at a boundary point.

        Uses the active facet with the largest constraint value; ties go to
        the lowest facet index (``np.argmax`` semantics).
        """
        x = _as_points(x, self.dimension)
        normals, offsets = self.facets()
        values = x @ normals.T - offsets
        idx = np.argmax(values, axis=-1)
        chosen = normals[idx]
        return chosen / np.linalg.norm(chosen, axis=-1, keepdims=True)

    def sample_interior(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class HalfSpace(ConvexSet):
    """``{x : <normal, x> <= offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.atleast_1d(np.asarray(self.normal, dtype=float))
        if normal.ndim != 1 or not np.any(normal):
            raise InputError("halfspace normal must be a nonzero vector")
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dimension(self) -> int:
        return self.normal.shape[0]

    def facets(self):
        return self.normal[None, :], np.array([self.offset])

    def project(self, x):
        x = _as_points(x, self.dimension)
        excess = x @ self.normal - self.offset
        shift = np.where(excess > 0, excess, 0.0) / (self.normal @ self.normal)
        out = x - shift[..., None] * self.normal
        return np.where((excess > 0)[..., None], out, x)

    def to_dict(self):
        return {"kind": "halfspace", "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(frozen=True)
class Box(ConvexSet):
    """Coordinatewise interval product ``[lower_i, upper_i]``; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise InputError("box bounds must be 1-D arrays of equal length")
        if np.any(lower > upper):
            raise InputError("box requires lower <= upper coordinatewise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]

    def facets(self):
        eye = np.eye(self.dimension)
        normals, offsets = [], []
        for i in range(self.dimension):
            if np.isfinite(self.lower[i]):
                normals.append(-eye[i])
                offsets.append(-self.lower[i])
            if np.isfinite(self.upper[i]):
                normals.append(eye[i])
                offsets.append(self.upper[i])
        if not normals:
            return np.zeros((1, self.dimension)), np.zeros(1)
        return np.array(normals), np.array(offsets)

    def project(self, x):
        x = _as_points(x, self.dimension)
        return np.clip(x, self.lower, self.upper)

    def contains(self, x, tol=1e-10):
        x = _as_points(x, self.dimension)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def violation(self, x):
        x = _as_points(x, self.dimension)
        return np.max(np.maximum(self.lower - x, x - self.upper), axis=-1)

    def sample_interior(self, rng, size):
        lo = np.where(np.isfinite(self.lower), self.lower, self.upper - 10.0)
        hi = np.where(np.isfinite(self.upper), self.upper, lo + 10.0)
        lo = np.where(np.isfinite(lo), lo, -5.0)
        hi = np.where(np.isfinite(hi), hi, 5.0)
        return rng.uniform(lo, hi, size=(size, self.dimension))

    def to_dict(self):
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True)
class Ball(ConvexSet):
    """Closed Euclidean ball."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise InputError("ball radius must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dimension(self) -> int:
        return self.center.shape[0]

    def project(self, x):
        x = _as_points(x, self.dimension)
        d = x - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        outside = r > self.radius
        scaled = self.center + self.radius * d / np.where(outside, r, 1.0)
        return np.where(outside, scaled, x)

    def violation(self, x):
        x = _as_points(x, self.dimension)
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def outward_normal(self, x):
        x = _as_points(x, self.dimension)
        d = x - self.center
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def sample_interior(self, rng, size):
        g = rng.standard_normal((size, self.dimension))
        g /= np.linalg.norm(g, axis=-1, keepdims=True)
        u = rng.uniform(size=(size, 1)) ** (1.0 / self.dimension)
        return self.center + self.radius * u * g

    def to_dict(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class Polytope(ConvexSet):
    """Intersection of halfspaces ``A x <= b``.

    ``interior_point`` certifies nonemptiness; it must satisfy every
    constraint strictly.
    """

    normals: np.ndarray
    offsets: np.ndarray
    interior_point: np.ndarray

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        point = np.atleast_1d(np.asarray(self.interior_point, dtype=float))
        if normals.shape[0] != offsets.shape[0] or normals.shape[1] != point.shape[0]:
            raise InputError("polytope normals/offsets/interior point disagree in shape")
        if np.any(np.linalg.norm(normals, axis=1) == 0):
            raise InputError("polytope facet normals must be nonzero")
        if not np.all(normals @ point < offsets):
            raise InputError("interior_point does not lie strictly inside the polytope")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "interior_point", point)

    @classmethod
    def from_halfspaces(cls, halfspaces: Sequence[HalfSpace], interior_point):
        normals = np.array([h.normal for h in halfspaces])
        offsets = np.array([h.offset for h in halfspaces])
        return cls(normals, offsets, interior_point)

    @property
    def dimension(self) -> int:
        return self.normals.shape[1]

    def facets(self):
        return self.normals, self.offsets

    def facet_distances(self, a) -> np.ndarray:
        """Distance from ``a`` to every facet hyperplane."""
        a = np.asarray(a, dtype=float)
        return (self.offsets - self.normals @ a) / np.linalg.norm(self.normals, axis=1)

    def project(self, x):
        x = _as_points(x, self.dimension)
        flat = x.reshape(-1, self.dimension)
        out = flat.copy()
        outside = np.flatnonzero(self.violation(flat) > 0)
        if outside.size:
            out[outside] = self._project_outside(flat[outside])
        return out.reshape(x.shape)

    def _project_outside(self, pts: np.ndarray) -> np.ndarray:
        A, b = self.normals, self.offsets
        norms_sq = np.einsum("ij,ij->i", A, A)
        result = np.empty_like(pts)
        pending = np.ones(len(pts), dtype=bool)
        # Projection onto a single violated facet is exact whenever it lands in the set.
        excess = pts @ A.T - b
        for f in np.argsort(-excess.max(axis=0)):
            idx = np.flatnonzero(pending & (excess[:, f] > 0))
            if idx.size == 0:
                continue
            cand = pts[idx] - (excess[idx, f] / norms_sq[f])[:, None] * A[f]
            ok = np.max(cand @ A.T - b, axis=1) <= 0
            result[idx[ok]] = cand[ok]
            pending[idx[ok]] = False
        idx = np.flatnonzero(pending)
        if idx.size and _n_faces(len(b), self.dimension) <= ACTIVE_SET_LIMIT:
            sub, ok = self._active_set(pts[idx])
            result[idx[ok]] = sub[ok]
            pending[idx[ok]] = False
            idx = np.flatnonzero(pending)
        if idx.size:
            result[idx] = self._polish(pts[idx], self._dykstra(pts[idx]))
        return result

    def _active_set(self, pts: np.ndarray):
        """Exact projection by enumerating facet subsets of size 2..n.

        The projection is the unique KKT point: ``z = x - A_S^T mu`` with
        ``A_S z = b_S``, ``mu >= 0`` and ``z`` feasible.  Returns the points
        and a mask of those resolved.
        """
        A, b = self.normals, self.offsets
        out = np.empty_like(pts)
        done = np.zeros(len(pts), dtype=bool)
        scale = 1e-12 * max(1.0, float(np.max(np.abs(b))))
        for size in range(2, min(self.dimension, len(b)) + 1):
            for S in itertools.combinations(range(len(b)), size):
                todo = np.flatnonzero(~done)
                if todo.size == 0:
                    return out, done
                As, bs = A[list(S)], b[list(S)]
                gram = As @ As.T
                if np.linalg.matrix_rank(gram) < size:
                    continue
                mu = np.linalg.solve(gram, (pts[todo] @ As.T - bs).T).T
                z = pts[todo] - mu @ As
                ok = np.all(mu >= -1e-14, axis=1) & (np.max(z @ A.T - b, axis=1) <= scale)
                out[todo[ok]] = z[ok]
                done[todo[ok]] = True
        return out, done

    def _polish(self, pts: np.ndarray, approx: np.ndarray) -> np.ndarray:
        """Exact projection onto the face that Dykstra identified as active.

        Dykstra stops within ``DYKSTRA_TOL``; solving the KKT system on the
        active facets removes that residual.  Points whose solve is not
        feasible with nonnegative multipliers keep the Dykstra answer.
        """
        A, b = self.normals, self.offsets
        active = np.abs(approx @ A.T - b) <= ACTIVE_TOL
        out = approx.copy()
        patterns, inverse = np.unique(active, axis=0, return_inverse=True)
        for p, mask in enumerate(patterns):
            if not mask.any():
                continue
            idx = np.flatnonzero(inverse.ravel() == p)
            As, bs = A[mask], b[mask]
            gram = As @ As.T
            if np.linalg.matrix_rank(gram) < len(bs):
                continue
            mu = np.linalg.solve(gram, (pts[idx] @ As.T - bs).T).T
            z = pts[idx] - mu @ As
            ok = np.all(mu >= -1e-12, axis=1) & (np.max(z @ A.T - b, axis=1) <= 1e-12)
            out[idx[ok]] = z[ok]
        return out

    def _dykstra(self, pts: np.ndarray) -> np.ndarray:
        A, b = self.normals, self.offsets
        norms_sq = np.einsum("ij,ij->i", A, A)
        n_facets = A.shape[0]
        cur = pts.copy()
        incr = np.zeros((n_facets,) + pts.shape)
        active = np.arange(len(pts))
        residual = np.inf
        for _ in range(DYKSTRA_MAX_ITER):
            start = cur[active].copy()
            for f in range(n_facets):
                y = cur[active] + incr[f, active]
                ex = y @ A[f] - b[f]
                proj = y - (np.maximum(ex, 0.0) / norms_sq[f])[:, None] * A[f]
                incr[f, active] = y - proj
                cur[active] = proj
            move = np.max(np.abs(cur[active] - start), axis=1)
            viol = np.max(cur[active] @ A.T - b, axis=1)
            done = (move <= DYKSTRA_TOL) & (viol <= DYKSTRA_TOL)
            residual = float(np.max(np.maximum(move, viol)))
            active = active[~done]
            if active.size == 0:
                return cur
        raise NumericalError(
            f"Dykstra projection did not converge in {DYKSTRA_MAX_ITER} cycles",
            residual=residual)

    def sample_interior(self, rng, size):
        # Rejection sampling in a box around the interior point.
        scale = max(1.0, float(np.max(np.abs(self.facet_distances(self.interior_point)))))
        out = []
        while sum(len(o) for o in out) < size:
            cand = self.interior_point + rng.uniform(-scale, scale, size=(4 * size, self.dimension))
            out.append(cand[self.contains(cand, tol=0.0)])
        return np.concatenate(out)[:size]

    def to_dict(self):
        return {"kind": "polytope", "normals": self.normals.tolist(),
                "offsets": self.offsets.tolist(),
                "interior_point": self.interior_point.tolist()}


def convex_set_from_dict(spec: dict) -> ConvexSet:
    """Build a set from its JSON description (see :meth:`ConvexSet.to_dict`)."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "halfspace":
            return HalfSpace(**spec)
        if kind == "box":
            return Box(**spec)
        if kind == "ball":
            return Ball(**spec)
        if kind == "polytope":
            return Polytope(**spec)
    except TypeError as exc:
        raise InputError(f"bad {kind} set description: {exc}") from exc
    raise InputError(f"unknown convex set kind {kind!r}")


def project(cset: ConvexSet, x) -> np.ndarray:
    """Euclidean projection of ``x`` onto ``cset``; points inside come back unchanged."""
    return cset.project(_as_points(x, cset.dimension))


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

class MonotoneOperator:
    """A maximal monotone operator, known only through its resolvent."""

    dimension: int

    def resolvent_point(self, lam: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def domain_contains(self, x, tol: float = 1e-10) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1], dtype=bool)


@dataclass(frozen=True)
class ZeroOperator(MonotoneOperator):
    dimension: int

    def resolvent_point(self, lam, x):
        return x


@dataclass(frozen=True)
class IndicatorOperator(MonotoneOperator):
    """Normal cone of a closed convex set; the resolvent is the projection."""

    cset: ConvexSet

    @property
    def dimension(self) -> int:
        return self.cset.dimension

    def resolvent_point(self, lam, x):
        return self.cset.project(x)

    def domain_contains(self, x, tol=1e-10):
        return self.cset.contains(x, tol)


def _bisect_root_1d(g: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Zero of the nondecreasing scalar map ``g`` (vectorised over ``x``).

    Bisection on the sign of ``g`` until the bracket cannot shrink in floating
    point.  A jump of ``g`` across zero (a kink of ``psi``) is located exactly.
    """
    width = np.maximum(1.0, np.abs(x))
    lo, hi = x - width, x + width
    for _ in range(PROX_MAX_ITER):
        bad_lo, bad_hi = g(lo) > 0, g(hi) < 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        span = hi - lo
        lo = np.where(bad_lo, lo - span, lo)
        hi = np.where(bad_hi, hi + span, hi)
    else:
        raise NumericalError("prox bracket expansion failed")
    for _ in range(2 * PROX_MAX_ITER):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        stuck = (mid <= lo) | (mid >= hi)
        if np.all(stuck | (gm == 0)):
            return np.where(gm == 0, mid, np.where(np.abs(g(lo)) <= np.abs(g(hi)), lo, hi))
        lo = np.where(gm < 0, mid, lo)
        hi = np.where(gm > 0, mid, hi)
        zero = gm == 0
        lo, hi = np.where(zero, mid, lo), np.where(zero, mid, hi)
    return 0.5 * (lo + hi)


def _bisect_prox_1d(phi: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Minimise the strongly convex scalar ``phi`` (vectorised over ``x``).

    Convex bisection: compare ``phi`` at two points straddling the midpoint;
    the minimiser lies on the side of the smaller value.
    """
    width = np.maximum(1.0, np.abs(x))
    lo, hi = x - width, x + width
    for _ in range(PROX_MAX_ITER):
        eta = 1e-3 * (hi - lo)
        bad_lo = phi(lo) < phi(lo + eta)
        bad_hi = phi(hi) < phi(hi - eta)
        if not (bad_lo.any() or bad_hi.any()):
            break
        span = hi - lo
        lo = np.where(bad_lo, lo - span, lo)
        hi = np.where(bad_hi, hi + span, hi)
    else:
        raise NumericalError("prox bracket expansion failed")
    for _ in range(PROX_MAX_ITER):
        mid = 0.5 * (lo + hi)
        eta = 1e-3 * (hi - lo)
        left, right = phi(mid - eta), phi(mid + eta)
        new_hi = np.where(left < right, mid + eta, np.where(left > right, hi, mid + eta))
        new_lo = np.where(left > right, mid - eta, np.where(left < right, lo, mid - eta))
        if np.array_equal(new_lo, lo) and np.array_equal(new_hi, hi):
            break
        lo, hi = new_lo, new_hi
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid))):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SubgradientOperator(MonotoneOperator):
    """Subdifferential of a finite convex function ``psi``.

    ``psi`` maps an array of shape ``(..., n)`` to ``(...)``.  When ``prox`` is
    given it is trusted as the closed-form proximal map ``prox(lam, x)``;
    otherwise the prox is computed one coordinate at a time (exact for
    separable ``psi``, cyclic coordinate descent otherwise).  With a
    subgradient selection ``subgrad`` each coordinate solves
    ``0 in lam*d psi + u - x`` by sign bisection, which is accurate to machine
    precision.  Without it the scalar objective is minimised by comparing
    values, which stalls near ``sqrt(eps)`` relative accuracy.
    """

    psi: Callable[[np.ndarray], np.ndarray]
    dimension: int
    prox: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    name: str = "subgradient"
    subgrad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def resolvent_point(self, lam, x):
        if self.prox is not None:
            return self.prox(lam, x)
        x = np.asarray(x, dtype=float)
        u = x.copy()
        for _sweep in range(PROX_MAX_ITER):
            prev = u.copy()
            for i in range(self.dimension):
                if self.subgrad is not None:
                    def g(v, i=i):
                        w = u.copy()
                        w[..., i] = v
                        return lam * self.subgrad(w)[..., i] + v - x[..., i]
                    u[..., i] = _bisect_root_1d(g, u[..., i])
                    continue

                def phi(v, i=i):
                    w = u.copy()
                    w[..., i] = v
                    return lam * self.psi(w) + 0.5 * np.sum((w - x) ** 2, axis=-1)
                u[..., i] = _bisect_prox_1d(phi, u[..., i])
            if self.dimension == 1 or np.max(np.abs(u - prev), initial=0.0) <= 1e-13:
                return u
        raise NumericalError("coordinate prox did not converge",
                             residual=float(np.max(np.abs(u - prev))))


@dataclass(frozen=True)
class CustomResolventOperator(MonotoneOperator):
    """User-supplied resolvent ``fn(lam, x)``; probed for nonexpansiveness on creation."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    dimension: int
    probe_samples: int = 64
    probe_ok: bool = field(default=True, init=False)

    def __post_init__(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-5, 5, size=(self.probe_samples, self.dimension))
        y = rng.uniform(-5, 5, size=(self.probe_samples, self.dimension))
        ok = True
        for lam in (0.1, 1.0):
            jx = np.asarray(self.fn(lam, x), dtype=float)
            jy = np.asarray(self.fn(lam, y), dtype=float)
            if np.any(np.linalg.norm(jx - jy, axis=-1) > np.linalg.norm(x - y, axis=-1) + 1e-10):
                ok = False
        object.__setattr__(self, "probe_ok", ok)
        if not ok:
            warnings.warn("custom resolvent failed the nonexpansiveness probe", RuntimeWarning)

    def resolvent_point(self, lam, x):
        return np.asarray(self.fn(lam, x), dtype=float)


def resolvent(op: MonotoneOperator, lam: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(J_lam(x), x - J_lam(x))``.

    The second component is the increment of the bounded-variation part
    absorbed by the operator during the step.
    """
    if not lam > 0:
        raise InputError(f"resolvent step must be positive, got {lam}")
    x = _as_points(x, op.dimension)
    j = op.resolvent_point(lam, x)
    return j, x - j


def yosida(op: MonotoneOperator, lam: float, x) -> np.ndarray:
    """Yosida approximation ``(x - J_lam(x)) / lam``."""
    _, k = resolvent(op, lam, x)
    return k / lam


def operator_from_dict(spec: dict, dimension: int) -> MonotoneOperator:
    """Build an operator from config: ``zero``, ``indicator`` or ``subgradient``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "zero":
        _reject_extra(spec, "zero operator")
        return ZeroOperator(dimension)
    if kind == "indicator":
        cset = convex_set_from_dict(spec.pop("set", {}))
        _reject_extra(spec, "indicator operator")
        if cset.dimension != dimension:
            raise InputError(f"set dimension {cset.dimension} != {dimension}")
        return IndicatorOperator(cset)
    if kind == "subgradient":
        fname = spec.pop("function", None)
        weight = float(spec.pop("weight", 1.0))
        _reject_extra(spec, "subgradient operator")
        return builtin_subgradient(fname, dimension, weight)
    raise InputError(f"unknown operator kind {kind!r}")


def _reject_extra(spec: dict, what: str) -> None:
    if spec:
        raise InputError(f"unknown keys for {what}: {sorted(spec)}")


def builtin_subgradient(name: str, dimension: int, weight: float = 1.0,
                        closed_form: bool = False) -> SubgradientOperator:
    """Subgradients of ``weight*|u|_1`` (``"abs"``) or ``weight*|u|^2/2`` (``"half_square"``)."""
    if name == "abs":
        psi = lambda u: weight * np.sum(np.abs(u), axis=-1)  # noqa: E731
        grad = lambda u: weight * np.sign(u)  # noqa: E731
        prox = (lambda lam, x: np.sign(x) * np.maximum(np.abs(x) - lam * weight, 0.0)) \
            if closed_form else None
    elif name == "half_square":
        psi = lambda u: 0.5 * weight * np.sum(u * u, axis=-1)  # noqa: E731
        grad = lambda u: weight * u  # noqa: E731
        prox = (lambda lam, x: x / (1.0 + lam * weight)) if closed_form else None
    else:
        raise InputError(f"unknown built-in convex function {name!r}")
    return SubgradientOperator(psi, dimension, prox=prox, name=name, subgrad=grad)


# ---------------------------------------------------------------------------
# Interior-ball certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InteriorBallCertificate:
    """Interior point ``a`` with a ball of radius ``r`` inside the domain.

    ``m2`` and ``m3`` are user-declared slack constants; only the ball part is
    checked numerically.
    """

    a: np.ndarray
    r: float
    m2: float = 0.0
    m3: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=float)))
        if not self.r > 0:
            raise InputError("certificate radius must be positive")

    def verify(self, op: MonotoneOperator, n_samples: int = 1000, seed: int = 0) -> bool:
        """Sampled check that ``ball(a, r)`` lies inside the operator domain."""
        ball = Ball(self.a, self.r)
        pts = ball.sample_interior(np.random.default_rng(seed), n_samples)
        return bool(np.all(op.domain_contains(pts, tol=1e-10)))


def certify_interior_ball(cset: ConvexSet, a) -> InteriorBallCertificate:
    """Largest ball around ``a`` that fits inside ``cset`` (facet-distance rule)."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if isinstance(cset, Ball):
        r = cset.radius - np.linalg.norm(a - cset.center)
    else:
        normals, offsets = cset.facets()
        r = np.min((offsets - normals @ a) / np.linalg.norm(normals, axis=1))
    if not r > 0:
        raise InputError("point is not in the interior of the set")
    return InteriorBallCertificate(a, float(r))


@dataclass
class GapReport:
    values: list
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations


def interior_gap_check(op: MonotoneOperator, cert: InteriorBallCertificate,
                       boundary_samples) -> GapReport:
    """Check ``<x - a, n(x)> >= r`` at boundary samples of an indicator domain."""
    if not isinstance(op, IndicatorOperator):
        raise InputError("interior_gap_check needs an indicator operator")
    cset = op.cset
    pts = _as_points(boundary_samples, cset.dimension).reshape(-1, cset.dimension)
    dist = cset.distance(pts)
    if np.any(dist > BOUNDARY_TOL):
        raise InputError(f"sample {int(np.argmax(dist))} lies outside the set")
    if np.any(cset.violation(pts) < -BOUNDARY_TOL):
        raise InputError("sample lies in the interior, not on the boundary")
    normals = cset.outward_normal(pts)
    values = np.einsum("ij,ij->i", pts - cert.a, normals)
    violations = [i for i, v in enumerate(values) if v < cert.r - 1e-12]
    return GapReport(values.tolist(), violations)
