"""Contracting tube along a reference: level dynamics, sections, and containment.

The tube is the time-indexed family of Lyapunov-function sublevel sets centred
on the desired state.  Its level obeys a scalar comparison ODE whose solution
is monotone toward a computable limit, so the union of all sections over time
reduces to finitely many support-function checks against the domain polytope.
All checks run vectorised over the time grid and reduce deterministically
(plain minima), so concurrent evaluation would give identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .controller import ErrorBounds, QuadraticLyapunov, RedesignController
from .model import (
    DomainSpec,
    IssCertificate,
    PeriodicTail,
    PlantSpec,
    Reference,
    SettlingTail,
    desired_state,
)

__all__ = [
    "CertificationError",
    "CertificationReport",
    "CertifyMode",
    "LevelSpec",
    "MuSelection",
    "TubeLevel",
    "TubeSection",
    "Witness",
    "alpha_inf",
    "certify",
    "comparison_check",
    "minkowski_decompose",
    "select_mu",
    "solve_nu",
    "support",
    "tube_section",
]


class CertificationError(RuntimeError):
    """Certification could not be carried out (bad setup, not a negative verdict)."""


def alpha_inf(bounds: ErrorBounds, mu: float) -> float:
    """Limit level of the comparison ODE: alpha2(alpha3^-1(mu / 4))."""
    if mu < 0.0:
        raise ValueError(f"mu must be nonnegative, got {mu}")
    if mu == 0.0:
        return 0.0
    if bounds.quadratic is not None:
        _, c2, c3 = bounds.quadratic
        return c2 * mu / (4.0 * c3)
    return bounds.alpha2(bounds.alpha3.invert(mu / 4.0))


class MuSelection(NamedTuple):
    supremum: float
    recommended: float


def select_mu(bounds: ErrorBounds, r_inf: float) -> MuSelection:
    """Largest saturation width that still guarantees the ultimate bound r_inf.

    The supremum is alpha_inf^-1(alpha1(r_inf)); any mu strictly below it
    works, and 0.9 x supremum is returned as a practical choice.
    """
    if r_inf <= 0.0:
        raise ValueError(f"r_inf must be positive, got {r_inf}")
    if bounds.quadratic is not None:
        c1, c2, c3 = bounds.quadratic
        sup = 4.0 * c3 * c1 * r_inf * r_inf / c2
    else:
        # alpha_inf^-1(s) = 4 alpha3(alpha2^-1(s))
        sup = 4.0 * bounds.alpha3(bounds.alpha2.invert(bounds.alpha1(r_inf)))
    return MuSelection(supremum=sup, recommended=0.9 * sup)


@dataclass(frozen=True)
class LevelSpec:
    """Inputs of the comparison ODE: saturation width, initial level, envelopes."""

    mu: float
    c0: float
    bounds: ErrorBounds

    def __post_init__(self) -> None:
        if self.mu < 0.0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if self.c0 < 0.0:
            raise ValueError(f"c0 must be nonnegative, got {self.c0}")

    @classmethod
    def from_controller(cls, ctrl: RedesignController, c0: float) -> "LevelSpec":
        mu = 0.0 if ctrl.discontinuous else ctrl.mu
        return cls(mu=mu, c0=float(c0), bounds=ctrl.bounds())


@dataclass(frozen=True)
class TubeLevel:
    """Solution of the level ODE nu' = -alpha3(alpha2^-1(nu)) + mu/4, nu(0) = c0.

    Carries either the closed form (quadratic envelopes: a linear scalar ODE)
    or a dense numeric solution valid on [0, t_end].  The solution is monotone
    toward ``limit`` from either side.
    """

    mu: float
    c0: float
    limit: float
    _closed: tuple[float, float] | None = field(default=None, repr=False)
    _dense: object | None = field(default=None, repr=False)
    _t_end: float = field(default=math.inf, repr=False)

    def value(self, t):
        """Level at time t; accepts scalars or arrays."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < -1e-12):
            raise ValueError("time must be nonnegative")
        if self._closed is not None:
            equilibrium, rate = self._closed
            out = equilibrium + (self.c0 - equilibrium) * np.exp(-rate * t_arr)
        else:
            if np.any(t_arr > self._t_end * (1.0 + 1e-12) + 1e-12):
                raise ValueError(
                    f"requested time beyond the solved range [0, {self._t_end}]"
                )
            out = self._dense(np.clip(t_arr, 0.0, self._t_end))[0]
        out = np.maximum(out, 0.0)
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out

    def __call__(self, t):
        return self.value(t)


def solve_nu(spec: LevelSpec, t_end: float, rtol: float = 1e-9) -> TubeLevel:
    """Solve the level ODE on [0, t_end].

    Quadratic envelopes admit the closed form
    ``limit + (c0 - limit) * exp(-t * c3 / c2)``; anything else is integrated
    with adaptive RK45 at relative tolerance ``rtol`` and kept as a dense
    interpolant.
    """
    if t_end <= 0.0:
        raise ValueError(f"t_end must be positive, got {t_end}")
    limit = alpha_inf(spec.bounds, spec.mu)
    if spec.bounds.quadratic is not None:
        _, c2, c3 = spec.bounds.quadratic
        return TubeLevel(
            mu=spec.mu, c0=spec.c0, limit=limit, _closed=(limit, c3 / c2)
        )
    from scipy.integrate import solve_ivp

    alpha2, alpha3 = spec.bounds.alpha2, spec.bounds.alpha3
    quarter_mu = spec.mu / 4.0

    def rhs(_t: float, y: np.ndarray) -> list[float]:
        level = max(float(y[0]), 0.0)
        decay = alpha3(alpha2.invert(level))
        if not math.isfinite(decay):
            raise CertificationError(f"class-K evaluation not finite at level {level}")
        return [-decay + quarter_mu]

    sol = solve_ivp(
        rhs,
        (0.0, float(t_end)),
        [spec.c0],
        method="RK45",
        rtol=rtol,
        atol=1e-13,
        dense_output=True,
    )
    if not sol.success:
        raise CertificationError(f"level ODE integration failed: {sol.message}")
    return TubeLevel(
        mu=spec.mu, c0=spec.c0, limit=limit, _dense=sol.sol, _t_end=float(t_end)
    )


@dataclass(frozen=True)
class TubeSection:
    """Ellipsoid {xi : (xi - center)^T P (xi - center) <= level}.

    Level zero degenerates to the singleton {center}.
    """

    center: np.ndarray
    level: float
    P: np.ndarray
    P_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        center = np.asarray(self.center, dtype=float).reshape(-1)
        p = np.asarray(self.P, dtype=float)
        if self.level < 0.0:
            raise ValueError(f"level must be nonnegative, got {self.level}")
        if p.shape != (center.size, center.size):
            raise ValueError("shape matrix and center dimensions differ")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "P", p)
        object.__setattr__(self, "P_inv", np.linalg.inv(p))

    @property
    def dim(self) -> int:
        return self.center.size

    def contains(self, xi: np.ndarray, tol: float = 0.0) -> bool:
        e = np.asarray(xi, dtype=float) - self.center
        return float(e @ self.P @ e) <= self.level + tol

    def boundary_points(self, count: int = 128) -> np.ndarray:
        """Sampled boundary points (a closed polyline in two dimensions)."""
        if count < 1:
            raise ValueError("count must be positive")
        directions = _unit_directions(self.dim, count)
        eigenvalues, eigenvectors = np.linalg.eigh(self.P)
        p_inv_sqrt = eigenvectors @ np.diag(1.0 / np.sqrt(eigenvalues)) @ eigenvectors.T
        return self.center + math.sqrt(self.level) * directions @ p_inv_sqrt.T


def _unit_directions(dim: int, count: int) -> np.ndarray:
    """Deterministic spread of unit vectors: equally spaced angles in 2-D."""
    if dim == 1:
        signs = np.where(np.arange(count) % 2 == 0, 1.0, -1.0)
        return signs[:, None]
    if dim == 2:
        angles = np.linspace(0.0, 2.0 * math.pi, count, endpoint=False)
        return np.column_stack([np.cos(angles), np.sin(angles)])
    rng = np.random.default_rng(1234)
    raw = rng.standard_normal((count, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def tube_section(
    kind: str,
    t: float,
    reference: Reference,
    lyap: QuadraticLyapunov,
    level: TubeLevel,
) -> TubeSection:
    """Tube cross-section at time t: contracting level (dynamic) or frozen c0 (static)."""
    if kind == "dynamic":
        value = level.value(t)
    elif kind == "static":
        if level.c0 < level.limit - 1e-15:
            raise ValueError(
                f"static sections need c0 >= limit level ({level.c0} < {level.limit})"
            )
        value = level.c0
    else:
        raise ValueError(f"unknown section kind {kind!r}")
    return TubeSection(center=desired_state(reference, t), level=value, P=lyap.P)


def support(section: TubeSection, direction: np.ndarray) -> float:
    """Support function of the section: d . center + sqrt(level * d^T P^-1 d)."""
    d = np.asarray(direction, dtype=float)
    if not np.any(d):
        raise ValueError("direction must be nonzero")
    return float(d @ section.center) + math.sqrt(
        section.level * float(d @ section.P_inv @ d)
    )


def minkowski_decompose(section: TubeSection) -> tuple[np.ndarray, TubeSection]:
    """Split V(t) = {center} (+) centred level set; membership is preserved."""
    centred = TubeSection(
        center=np.zeros(section.dim), level=section.level, P=section.P
    )
    return section.center.copy(), centred


def comparison_check(
    g: Callable[[float, float], float],
    chi: tuple[np.ndarray, np.ndarray],
    psi0: float,
    T: float,
    tol: float = 1e-8,
    rtol: float = 1e-9,
) -> bool:
    """Check a sampled signal against the solution of its comparison ODE.

    ``g(psi, t)`` drives psi' = g(psi, t) with psi(0) = psi0; the samples
    ``chi = (times, values)`` must start at a value <= psi0.  Returns whether
    chi(t) <= psi(t) + tol at every sample time below T.
    """
    from scipy.integrate import solve_ivp

    times, values = (np.asarray(a, dtype=float) for a in chi)
    if times.shape != values.shape or times.size == 0:
        raise ValueError("chi must be nonempty matching (times, values) arrays")
    if values[0] > psi0 + 1e-12:
        raise ValueError(f"chi(0) = {values[0]} exceeds psi(0) = {psi0}")
    mask = times < T
    if not np.any(mask):
        raise ValueError("no chi samples fall inside [0, T)")
    t_check, v_check = times[mask], values[mask]
    sol = solve_ivp(
        lambda t, y: [g(float(y[0]), t)],
        (0.0, float(t_check[-1]) + 1e-15),
        [float(psi0)],
        method="RK45",
        rtol=rtol,
        atol=1e-13,
        dense_output=True,
    )
    if not sol.success:
        raise CertificationError(f"comparison ODE integration failed: {sol.message}")
    psi_values = sol.sol(t_check)[0]
    return bool(np.all(v_check <= psi_values + tol))


@dataclass(frozen=True)
class CertifyMode:
    """What union of sections is required to stay inside the domain."""

    kind: str
    t_final: float | None = None

    _KINDS = ("dynamic", "static", "set-point", "finite-time")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"mode kind must be one of {self._KINDS}, got {self.kind!r}")
        if self.kind == "finite-time":
            if self.t_final is None or self.t_final <= 0.0:
                raise ValueError("finite-time mode needs a positive t_final")
        elif self.t_final is not None:
            raise ValueError(f"t_final only applies to finite-time mode, got {self.kind}")

    @classmethod
    def parse(cls, text: str) -> "CertifyMode":
        text = text.strip().lower()
        if text in ("dynamic", "static"):
            return cls(text)
        if text in ("set-point", "setpoint"):
            return cls("set-point")
        if text.startswith("finite:"):
            return cls("finite-time", t_final=float(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse mode {text!r}")


@dataclass(frozen=True)
class Witness:
    """Worst containment violation: when, through which face, by how much."""

    time: float
    face_index: int
    direction: np.ndarray
    support_value: float
    face_offset: float


@dataclass(frozen=True)
class CertificationReport:
    verdict: str
    mode: str
    margin: float
    slack: float
    witness: Witness | None
    admissible_initial_set: TubeSection
    c_r: float | None
    c0: float
    mu: float
    alpha_inf_value: float
    grid_dt: float
    horizon_checked: float
    assumptions: tuple[str, ...]

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"

    def to_dict(self) -> dict:
        adm = self.admissible_initial_set
        data = {
            "verdict": self.verdict,
            "mode": self.mode,
            "margin": float(self.margin),
            "grid_slack": float(self.slack),
            "c0": float(self.c0),
            "mu": float(self.mu),
            "alpha_inf": float(self.alpha_inf_value),
            "grid_dt": float(self.grid_dt),
            "horizon_checked": float(self.horizon_checked),
            "admissible_initial_set": {
                "center": [float(x) for x in adm.center],
                "level": float(adm.level),
                "shape_matrix": [[float(v) for v in row] for row in adm.P],
                "internal_level_c_r": None if self.c_r is None else float(self.c_r),
            },
            "assumptions": list(self.assumptions),
        }
        if self.witness is not None:
            data["witness"] = {
                "time": float(self.witness.time),
                "face_index": int(self.witness.face_index),
                "direction": [float(x) for x in self.witness.direction],
                "support": float(self.witness.support_value),
                "face_offset": float(self.witness.face_offset),
            }
        else:
            data["witness"] = None
        return data


def _eval_on_grid(f: Callable[[float], float], times: np.ndarray) -> np.ndarray:
    """Evaluate a scalar function of time on a grid, vectorised when possible."""
    try:
        out = np.asarray(f(times), dtype=float)
        if out.shape == times.shape:
            return out
    except Exception:
        pass
    return np.array([float(f(t)) for t in times])


def _centers_on_grid(ref: Reference, times: np.ndarray) -> np.ndarray:
    return np.stack(
        [_eval_on_grid(f, times) for f in ref.derivatives[:-1]], axis=1
    )


@dataclass(frozen=True)
class _Pass:
    """One finite batch of sections to check: times, centres, levels."""

    label: str
    times: np.ndarray
    centers: np.ndarray
    levels: np.ndarray
    connected: bool
    center_slack_rate: float  # Lipschitz bound on the centre motion
    inflation: float = 0.0  # extra radius (settled-tail residual)


def _settling_limit(ref: Reference, tail: SettlingTail) -> tuple[np.ndarray, float]:
    """Settled centre and a sampled bound on the residual distance to it."""
    n = ref.n_xi
    span = max(10.0, 2.0 * tail.settle_time)
    if tail.limit is not None:
        xi_lim = np.zeros(n)
        xi_lim[0] = tail.limit
    else:
        xi_lim = desired_state(ref, tail.settle_time + span)
    grid = np.linspace(tail.settle_time, tail.settle_time + span, 2001)
    centers = _centers_on_grid(ref, grid)
    eps = float(np.max(np.linalg.norm(centers - xi_lim[None, :], axis=1)))
    return xi_lim, eps


def certify(
    mode: CertifyMode,
    plant: PlantSpec,
    dom: DomainSpec,
    iss: IssCertificate | None,
    ctrl: RedesignController,
    ref: Reference | None = None,
    level_spec: LevelSpec | None = None,
    n_grid: int = 2049,
    max_points: int = 4_194_305,
    slack_fraction: float = 0.01,
) -> CertificationReport:
    """Decide whether the tube stays inside the domain for the requested mode.

    The union over time is reduced to support-function checks on a uniform
    grid.  Between grid points the level term is bounded exactly (the level
    is monotone, so interval maxima sit at the endpoints) and the centre
    motion is bounded by its Lipschitz constant; the difference between the
    grid margin and this inter-sample bound is reported as slack.  The grid
    is refined until the slack falls below ``slack_fraction`` of the margin.

    Verdicts: a grid-point violation is a genuine violation (not-certified,
    with witness); a margin exceeding the slack certifies; a positive margin
    within the slack after full refinement is inconclusive.
    """
    ref = ref if ref is not None else ctrl.reference
    if level_spec is None:
        raise ValueError("a LevelSpec (mu, c0, envelopes) is required")
    if ref.n_xi != dom.dim or ref.n_xi != plant.n_xi or ref.n_xi != ctrl.lyap.n_xi:
        raise ValueError("reference, domain, plant, and controller dimensions differ")
    if plant.n_eta > 0 and iss is None:
        raise ValueError("an ISS certificate is required when n_eta > 0")

    dom.check_enclosing_ball()
    if iss is not None:
        iss.check_against_domain(dom)

    bounds = level_spec.bounds
    mu, c0 = level_spec.mu, level_spec.c0
    a_inf = alpha_inf(bounds, mu)
    assumptions: list[str] = []

    if mode.kind in ("static", "set-point") and c0 < a_inf - 1e-15:
        raise ValueError(
            f"{mode.kind} mode requires c0 >= alpha_inf(mu) = {a_inf}, got {c0}"
        )
    if mode.kind == "set-point":
        probe = np.linspace(0.0, min(ref.horizon, 10.0), 17)
        drift = max(
            float(np.linalg.norm(desired_state(ref, t) - desired_state(ref, 0.0)))
            for t in probe
        )
        if drift > 1e-9:
            raise ValueError("set-point mode needs a constant reference")

    # Reduce [0, horizon) to a finite main window plus an optional tail pass.
    tail_kind = None
    if mode.kind == "finite-time":
        if mode.t_final > ref.horizon:
            raise ValueError(
                f"finite-time window {mode.t_final} exceeds the reference horizon {ref.horizon}"
            )
        t_main = float(mode.t_final)
        assumptions.append(f"union restricted to the finite window [0, {t_main}]")
    elif mode.kind == "set-point":
        t_main = 0.0
        assumptions.append("constant reference: union collapses to the initial section")
    elif math.isfinite(ref.horizon):
        t_main = float(ref.horizon)
        assumptions.append(f"reference defined on the finite horizon [0, {t_main}]")
    else:
        if ref.tail is None:
            raise CertificationError(
                "infinite horizon needs a tail description (periodic or settling)"
            )
        if isinstance(ref.tail, PeriodicTail):
            tail_kind = "periodic"
            t_main = float(ref.tail.period)
            assumptions.append(
                f"reference declared periodic with period {t_main}; later periods "
                "checked with the worst-case decayed level"
            )
        else:
            tail_kind = "settling"
            t_main = float(ref.tail.settle_time)
            assumptions.append(
                f"reference declared settled beyond t = {t_main}; residual centre "
                "distance bounded by sampling"
            )

    dynamic_levels = mode.kind in ("dynamic", "finite-time")
    level = None
    if dynamic_levels and t_main > 0.0:
        level = solve_nu(level_spec, t_end=t_main)

    def level_values(times: np.ndarray) -> np.ndarray:
        if dynamic_levels:
            if level is None:
                return np.full(times.shape, c0)
            return np.asarray(level.value(times), dtype=float)
        return np.full(times.shape, c0)

    if dynamic_levels:
        nu_end = level.value(t_main) if level is not None else c0
        nu_tail = max(float(nu_end), a_inf)
    else:
        nu_tail = c0

    lipschitz = ref.velocity_bound(max(t_main, 1.0))

    normals, offsets = dom.normals, dom.offsets
    norms = np.linalg.norm(normals, axis=1)
    shape_inv = ctrl.lyap.P_inv
    face_shape = np.einsum("ij,jk,ik->i", normals, shape_inv, normals)

    def build_passes(n_points: int) -> list[_Pass]:
        passes: list[_Pass] = []
        if t_main > 0.0:
            times = np.linspace(0.0, t_main, n_points)
            centers = _centers_on_grid(ref, times)
            passes.append(
                _Pass(
                    label="main",
                    times=times,
                    centers=centers,
                    levels=level_values(times),
                    connected=True,
                    center_slack_rate=lipschitz,
                )
            )
            if tail_kind == "periodic":
                passes.append(
                    _Pass(
                        label="periodic-tail",
                        times=times,
                        centers=centers,
                        levels=np.full(times.shape, nu_tail),
                        connected=True,
                        center_slack_rate=lipschitz,
                    )
                )
        else:
            times = np.array([0.0])
            passes.append(
                _Pass(
                    label="main",
                    times=times,
                    centers=_centers_on_grid(ref, times),
                    levels=np.full(1, c0),
                    connected=False,
                    center_slack_rate=0.0,
                )
            )
        if tail_kind == "settling":
            xi_lim, eps = _settling_limit(ref, ref.tail)
            passes.append(
                _Pass(
                    label="settled-tail",
                    times=np.array([math.inf]),
                    centers=xi_lim[None, :],
                    levels=np.full(1, nu_tail),
                    connected=False,
                    center_slack_rate=0.0,
                    inflation=eps,
                )
            )
        return passes

    def evaluate(passes: list[_Pass]):
        margin_pts = math.inf
        margin_int = math.inf
        ref_margin = math.inf
        worst: Witness | None = None
        grid_dt = 0.0
        for p in passes:
            base = p.centers @ normals.T  # (n_pts, m)
            radii = np.sqrt(np.outer(p.levels, face_shape))
            h = base + radii + p.inflation * norms[None, :]
            margins = (offsets[None, :] - h) / norms[None, :]
            idx = np.unravel_index(np.argmin(margins), margins.shape)
            if margins[idx] < margin_pts:
                margin_pts = float(margins[idx])
                worst = Witness(
                    time=float(p.times[idx[0]]),
                    face_index=int(idx[1]),
                    direction=normals[idx[1]].copy(),
                    support_value=float(h[idx]),
                    face_offset=float(offsets[idx[1]]),
                )
            ref_margin = min(
                ref_margin,
                float(np.min((offsets[None, :] - base) / norms[None, :])),
            )
            if p.connected and p.times.size > 1:
                dt = float(p.times[1] - p.times[0])
                grid_dt = max(grid_dt, dt)
                motion = 0.5 * p.center_slack_rate * dt
                h_star = (
                    np.maximum(base[:-1], base[1:])
                    + np.maximum(radii[:-1], radii[1:])
                    + (p.inflation + motion) * norms[None, :]
                )
                margin_int = min(
                    margin_int,
                    float(np.min((offsets[None, :] - h_star) / norms[None, :])),
                )
            else:
                margin_int = min(margin_int, float(np.min(margins)))
        return margin_pts, margin_int, ref_margin, worst, grid_dt

    n_points = n_grid
    while True:
        passes = build_passes(n_points)
        margin_pts, margin_int, ref_margin, worst, grid_dt = evaluate(passes)
        if ref_margin <= 0.0:
            raise CertificationError(
                "the reference itself leaves the domain (sampled margin "
                f"{ref_margin}); the problem setup is inconsistent"
            )
        if margin_pts <= 0.0:
            verdict = "not-certified"
            break
        slack = margin_pts - margin_int
        if slack <= slack_fraction * margin_pts:
            verdict = "certified"
            break
        if n_points * 2 - 1 > max_points or t_main == 0.0:
            verdict = "certified" if margin_int > 0.0 else "inconclusive"
            break
        n_points = n_points * 2 - 1

    slack = max(margin_pts - margin_int, 0.0)
    admissible = TubeSection(
        center=desired_state(ref, 0.0), level=c0, P=ctrl.lyap.P
    )
    return CertificationReport(
        verdict=verdict,
        mode=mode.kind,
        margin=margin_pts,
        slack=slack,
        witness=worst if verdict == "not-certified" else None,
        admissible_initial_set=admissible,
        c_r=None if iss is None else iss.c_r,
        c0=c0,
        mu=mu,
        alpha_inf_value=a_inf,
        grid_dt=grid_dt,
        horizon_checked=t_main,
        assumptions=tuple(assumptions),
    )
