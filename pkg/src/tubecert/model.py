"""Plant, domain of interest, internal-stability certificate, and reference trajectory.

Everything in this module is immutable after construction and free of hidden
state, so instances can be shared between threads without synchronisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ClassKFunction",
    "DomainSpec",
    "GainFloorError",
    "IssCertificate",
    "PeriodicTail",
    "PlantSpec",
    "Reference",
    "SettlingTail",
    "desired_state",
    "estimate_delta_bound",
    "internal_set_contains",
]

# Absolute tolerance of the bisection fallback for class-K inversion.
_INVERT_TOL = 1e-12


class GainFloorError(RuntimeError):
    """The input gain b dropped below its guaranteed floor b0."""


@dataclass(frozen=True)
class ClassKFunction:
    """Strictly increasing function on [0, inf) with forward(0) = 0.

    ``inverse`` is an optional closed form.  Without one, :meth:`invert`
    bisects on ``[0, bracket_hint]``; the bracket must cover the sought
    preimage or the inversion fails.
    """

    forward: Callable[[float], float]
    inverse: Callable[[float], float] | None = None
    bracket_hint: float = 1e6

    def __call__(self, s: float) -> float:
        return float(self.forward(float(s)))

    def invert(self, y: float) -> float:
        """Return s >= 0 with forward(s) = y.

        Uses the closed-form inverse when available, otherwise bisection to
        absolute tolerance 1e-12.  Monotonicity guarantees convergence.
        """
        y = float(y)
        if y < 0.0:
            raise ValueError(f"class-K functions are nonnegative, got target {y}")
        if self.inverse is not None:
            return float(self.inverse(y))
        lo, hi = 0.0, float(self.bracket_hint)
        f_hi = self(hi)
        if not math.isfinite(f_hi):
            raise ValueError("class-K function not finite at bracket_hint")
        if f_hi < y:
            raise ValueError(
                f"inversion bracket [0, {hi}] does not cover target {y} "
                f"(forward(hi) = {f_hi})"
            )
        while hi - lo > _INVERT_TOL:
            mid = 0.5 * (lo + hi)
            if self(mid) < y:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def validate(self, upper: float, samples: int = 1000) -> None:
        """Check forward(0) = 0 and strict growth on a grid of ``samples`` points."""
        if abs(self(0.0)) > 1e-12:
            raise ValueError(f"forward(0) = {self(0.0)} != 0")
        grid = np.linspace(0.0, float(upper), samples)
        values = np.array([self(s) for s in grid])
        if not np.all(np.diff(values) > 0.0):
            raise ValueError("function is not strictly increasing on the sampled grid")


def quadratic_classk(coefficient: float) -> ClassKFunction:
    """c * s**2 with its closed-form inverse sqrt(s / c)."""
    c = float(coefficient)
    if c <= 0.0:
        raise ValueError(f"quadratic class-K coefficient must be positive, got {c}")
    return ClassKFunction(
        forward=lambda s: c * s * s,
        inverse=lambda y: math.sqrt(y / c),
    )


@dataclass(frozen=True)
class PlantSpec:
    """Integrator chain driven through the input channel, plus internal dynamics.

    ``a``, ``b`` map (xi, eta) to scalars, ``q`` maps (xi, eta) to a length
    ``n_eta`` vector, and ``delta`` is the simulation-only disturbance
    (xi, eta, t) -> scalar.  With ``n_eta == 0`` the internal dynamics are
    dropped and ``q`` must be None.
    """

    n_xi: int
    n_eta: int
    a: Callable[[np.ndarray, np.ndarray], float]
    b: Callable[[np.ndarray, np.ndarray], float]
    q: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    delta: Callable[[np.ndarray, np.ndarray, float], float] | None = None
    b_floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.n_xi < 1:
            raise ValueError(f"n_xi must be a positive integer, got {self.n_xi}")
        if self.n_eta < 0:
            raise ValueError(f"n_eta must be nonnegative, got {self.n_eta}")
        if self.b_floor <= 0.0:
            raise ValueError(f"b_floor must be positive, got {self.b_floor}")
        if self.n_eta > 0 and self.q is None:
            raise ValueError("q is required when n_eta > 0")
        if self.n_eta == 0 and self.q is not None:
            raise ValueError("q must be None when n_eta == 0")

    def input_gain(self, xi: np.ndarray, eta: np.ndarray) -> float:
        """Evaluate b, enforcing |b| >= b_floor at every call."""
        value = float(self.b(xi, eta))
        if abs(value) < self.b_floor:
            raise GainFloorError(
                f"|b| = {abs(value)} below floor {self.b_floor} at xi={xi}, eta={eta}"
            )
        return value

    def drift(self, xi: np.ndarray, eta: np.ndarray) -> float:
        return float(self.a(xi, eta))

    def internal_rhs(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        if self.n_eta == 0:
            return np.empty(0)
        return np.asarray(self.q(xi, eta), dtype=float).reshape(self.n_eta)

    def perturbation(self, xi: np.ndarray, eta: np.ndarray, t: float) -> float:
        if self.delta is None:
            return 0.0
        return float(self.delta(xi, eta, t))


def _chebyshev_center(normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Interior point of {x : A x < d} via the largest inscribed ball."""
    from scipy.optimize import linprog

    m, n = normals.shape
    norms = np.linalg.norm(normals, axis=1)
    a_ub = np.hstack([normals, norms[:, None]])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=a_ub, b_ub=offsets, bounds=[(None, None)] * n + [(0, None)])
    if not res.success or res.x[-1] <= 0.0:
        raise ValueError("halfspace intersection has empty interior")
    return res.x[:n]


@dataclass(frozen=True)
class DomainSpec:
    """Open polytope {xi : a_i^T xi < d_i} inside the ball of radius ``radius_r``.

    ``delta_bound`` is the asserted disturbance bound valid on this domain
    (times the internal-state sublevel set).
    """

    halfspaces: tuple[tuple[np.ndarray, float], ...]
    radius_r: float
    delta_bound: float = 0.0

    def __post_init__(self) -> None:
        if self.radius_r <= 0.0:
            raise ValueError(f"radius_r must be positive, got {self.radius_r}")
        if self.delta_bound < 0.0:
            raise ValueError(f"delta_bound must be nonnegative, got {self.delta_bound}")
        if not self.halfspaces:
            raise ValueError("at least one halfspace is required")
        normals = np.array([np.asarray(a, dtype=float) for a, _ in self.halfspaces])
        offsets = np.array([float(d) for _, d in self.halfspaces])
        frozen = tuple((n.copy(), float(d)) for n, d in zip(normals, offsets))
        object.__setattr__(self, "halfspaces", frozen)
        object.__setattr__(self, "_normals", normals)
        object.__setattr__(self, "_offsets", offsets)

    @classmethod
    def box(
        cls,
        bounds: Sequence[tuple[float, float]],
        radius_r: float | None = None,
        delta_bound: float = 0.0,
    ) -> "DomainSpec":
        """Axis-aligned box from per-axis (lo, hi) pairs."""
        halfspaces: list[tuple[np.ndarray, float]] = []
        n = len(bounds)
        for i, (lo, hi) in enumerate(bounds):
            if not lo < hi:
                raise ValueError(f"axis {i}: need lo < hi, got ({lo}, {hi})")
            e = np.zeros(n)
            e[i] = 1.0
            halfspaces.append((e.copy(), float(hi)))
            halfspaces.append((-e, -float(lo)))
        corner_norm = math.sqrt(sum(max(abs(lo), abs(hi)) ** 2 for lo, hi in bounds))
        if radius_r is None:
            radius_r = corner_norm
        return cls(tuple(halfspaces), float(radius_r), float(delta_bound))

    @property
    def dim(self) -> int:
        return self._normals.shape[1]

    @property
    def normals(self) -> np.ndarray:
        return self._normals

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets

    def contains(self, xi: np.ndarray, closed: bool = False) -> bool:
        xi = np.asarray(xi, dtype=float)
        values = self._normals @ xi
        if closed:
            return bool(np.all(values <= self._offsets))
        return bool(np.all(values < self._offsets))

    def vertices(self) -> np.ndarray:
        """Vertices of the closure, via exact halfspace intersection."""
        normals, offsets = self._normals, self._offsets
        if self.dim == 1:
            lo, hi = -math.inf, math.inf
            for a, d in zip(normals[:, 0], offsets):
                if a > 0:
                    hi = min(hi, d / a)
                elif a < 0:
                    lo = max(lo, d / a)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError("domain is unbounded or empty")
            return np.array([[lo], [hi]])
        from scipy.spatial import HalfspaceIntersection

        interior = _chebyshev_center(normals, offsets)
        hs = np.hstack([normals, -offsets[:, None]])
        return HalfspaceIntersection(hs, interior).intersections

    def check_enclosing_ball(self) -> float:
        """Verify closure(D) lies in the radius-r ball; return the max vertex norm."""
        reach = float(np.max(np.linalg.norm(self.vertices(), axis=1)))
        if reach > self.radius_r + 1e-9:
            raise ValueError(
                f"domain reaches norm {reach} outside the stated radius {self.radius_r}"
            )
        return reach


@dataclass(frozen=True)
class IssCertificate:
    """Lyapunov certificate for the internal dynamics.

    ``v_eta`` is bounded by alpha1/alpha2 of the norm and decreases whenever
    the internal norm exceeds gamma of the external norm.  The sublevel set
    {V_eta < c_r} is the admissible internal region.
    """

    v_eta: Callable[[np.ndarray], float]
    alpha1: ClassKFunction
    alpha2: ClassKFunction
    alpha3: ClassKFunction
    gamma: ClassKFunction
    c_r: float

    def __post_init__(self) -> None:
        if self.c_r <= 0.0:
            raise ValueError(f"c_r must be positive, got {self.c_r}")

    def value(self, eta: np.ndarray) -> float:
        return float(self.v_eta(np.asarray(eta, dtype=float)))

    def check_against_domain(self, dom: DomainSpec) -> None:
        """c_r must dominate alpha2(gamma(r)) for the domain radius r."""
        needed = self.alpha2(self.gamma(dom.radius_r))
        if self.c_r < needed - 1e-12:
            raise ValueError(f"c_r = {self.c_r} below alpha2(gamma(r)) = {needed}")


def internal_set_contains(iss: IssCertificate, eta: np.ndarray) -> bool:
    """True iff eta lies in the open sublevel set {V_eta < c_r}."""
    return iss.value(eta) < iss.c_r


@dataclass(frozen=True)
class PeriodicTail:
    """The reference repeats with the given period for all times."""

    period: float

    def __post_init__(self) -> None:
        if self.period <= 0.0:
            raise ValueError(f"period must be positive, got {self.period}")


@dataclass(frozen=True)
class SettlingTail:
    """After ``settle_time`` the reference stays near a constant output.

    ``limit`` is the settled output value when known in closed form;
    otherwise it is estimated by sampling far beyond the settle time.
    """

    settle_time: float
    limit: float | None = None

    def __post_init__(self) -> None:
        if self.settle_time < 0.0:
            raise ValueError(f"settle_time must be nonnegative, got {self.settle_time}")


@dataclass(frozen=True)
class Reference:
    """Output reference with its first n_xi derivatives as callables of time.

    ``derivatives`` holds n_xi + 1 functions: the output itself and each
    derivative up to the order that enters the control law.  ``horizon`` may
    be ``math.inf``; infinite horizons need a ``tail`` describing how the
    union over time reduces to finitely checkable work.
    """

    derivatives: tuple[Callable[[float], float], ...]
    horizon: float = math.inf
    lipschitz_bound: float | None = None
    tail: PeriodicTail | SettlingTail | None = None

    def __post_init__(self) -> None:
        if len(self.derivatives) < 2:
            raise ValueError("need the output and at least its first derivative")
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "derivatives", tuple(self.derivatives))

    @property
    def n_xi(self) -> int:
        return len(self.derivatives) - 1

    def state(self, t: float) -> np.ndarray:
        return desired_state(self, t)

    def state_derivative(self, t: float) -> np.ndarray:
        """Time derivative of the desired state: derivatives 1 .. n_xi."""
        if t < 0.0:
            raise ValueError(f"time must be nonnegative, got {t}")
        return np.array([f(t) for f in self.derivatives[1:]], dtype=float)

    def top_derivative(self, t: float) -> float:
        """The n_xi-th output derivative, fed forward by the control law."""
        return float(self.derivatives[-1](t))

    def velocity_bound(self, t_max: float, samples: int = 20001) -> float:
        """Bound on the 2-norm of the desired-state derivative over [0, t_max].

        Returns ``lipschitz_bound`` when supplied; otherwise a sampled
        estimate inflated by 0.1% (an estimate, not a proof).
        """
        if self.lipschitz_bound is not None:
            return float(self.lipschitz_bound)
        grid = np.linspace(0.0, float(t_max), samples)
        worst = max(float(np.linalg.norm(self.state_derivative(t))) for t in grid)
        return worst * 1.001


def desired_state(ref: Reference, t: float) -> np.ndarray:
    """Stack the output and its first n_xi - 1 derivatives at time t."""
    if t < 0.0:
        raise ValueError(f"time must be nonnegative, got {t}")
    return np.array([f(t) for f in ref.derivatives[:-1]], dtype=float)


def estimate_delta_bound(
    plant: PlantSpec,
    dom: DomainSpec,
    iss: IssCertificate | None,
    t_grid: Iterable[float],
    space_grid: Iterable[tuple[np.ndarray, np.ndarray]],
) -> float:
    """Max |delta| over a grid of admissible states and times.

    This is a sampling estimate, not a proof: the caller compares it against
    the asserted ``DomainSpec.delta_bound``.  Every grid point must lie in
    the open domain (and, with internal dynamics, in the internal sublevel
    set); a point outside is an error, since the bound is only claimed there.
    Refining the grid can only increase the estimate.
    """
    times = [float(t) for t in t_grid]
    points = [(np.asarray(xi, dtype=float), np.asarray(eta, dtype=float)) for xi, eta in space_grid]
    if not times or not points:
        raise ValueError("time and space grids must be nonempty")
    for xi, eta in points:
        if not dom.contains(xi):
            raise ValueError(f"grid point xi={xi} lies outside the open domain")
        if plant.n_eta > 0:
            if iss is None:
                raise ValueError("an ISS certificate is required when n_eta > 0")
            if not internal_set_contains(iss, eta):
                raise ValueError(f"grid point eta={eta} lies outside the internal sublevel set")
    worst = 0.0
    for xi, eta in points:
        for t in times:
            worst = max(worst, abs(plant.perturbation(xi, eta, t)))
    return worst
