"""Closed-loop integration of the perturbed plant with runtime monitors.

The default integrator is fixed-step RK4: the robust term's slope rho^2/mu
makes adaptive steppers thrash inside the boundary layer, and a fixed step
keeps repeated runs bit-identical.  Adaptive RK45 (scipy) remains available
for smooth configurations.  Trajectories record every monitored channel so
the tube and internal-state guarantees can be validated sample by sample.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .controller import RedesignController, v_redesign
from .model import DomainSpec, IssCertificate, PlantSpec, Reference, desired_state
from .tube import TubeLevel, TubeSection, _unit_directions

__all__ = [
    "DomainExit",
    "IntegrationError",
    "InternalMonitorReport",
    "SimConfig",
    "Trajectory",
    "boundary_initial_states",
    "integrate",
    "measure_ultimate_bound",
    "monitor_internal",
    "write_trajectory_csv",
]

_EXIT_BISECT_TOL = 1e-9


class IntegrationError(RuntimeError):
    """The closed-loop integration produced a non-finite state."""


@dataclass(frozen=True)
class SimConfig:
    integrator: str = "rk4-fixed"  # "rk4-fixed" | "rk45-adaptive"
    step: float = 1e-3
    t_end: float = 20.0
    rtol: float = 1e-8
    atol: float = 1e-10
    domain_exit_policy: str = "stop-and-report"  # | "continue"

    def __post_init__(self) -> None:
        if self.integrator not in ("rk4-fixed", "rk45-adaptive"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.step <= 0.0:
            raise ValueError(f"step must be positive, got {self.step}")
        if self.t_end <= 0.0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if self.domain_exit_policy not in ("stop-and-report", "continue"):
            raise ValueError(f"unknown exit policy {self.domain_exit_policy!r}")


@dataclass(frozen=True)
class DomainExit:
    """First time the solution left the contract region, bracketed by bisection."""

    time: float
    reason: str  # "external" | "internal"


@dataclass(frozen=True)
class Trajectory:
    """Closed-loop run with all monitored channels on a shared time grid."""

    times: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    xi_d: np.ndarray
    u: np.ndarray
    v_n_history: np.ndarray
    v_l_history: np.ndarray
    V_N_history: np.ndarray
    V_eta_history: np.ndarray
    nu_history: np.ndarray
    exit: DomainExit | None = None

    def __post_init__(self) -> None:
        n = self.times.size
        for name in (
            "xi",
            "eta",
            "xi_d",
            "u",
            "v_n_history",
            "v_l_history",
            "V_N_history",
            "V_eta_history",
            "nu_history",
        ):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"channel {name} length differs from the time grid")
        if n == 0 or self.times[0] != 0.0:
            raise ValueError("the time grid must start at 0")

    @property
    def tracking_error(self) -> np.ndarray:
        return self.xi - self.xi_d


def _closed_loop_rhs(
    plant: PlantSpec,
    ctrl: RedesignController,
    t: float,
    state: np.ndarray,
) -> tuple[np.ndarray, float, float, float]:
    """Full state derivative plus the control components at (t, state)."""
    n = plant.n_xi
    xi = state[:n]
    eta = state[n:]
    xi_bar = xi - desired_state(ctrl.reference, t)
    vn = ctrl.nominal.value(xi_bar)
    vl = v_redesign(ctrl, xi_bar)
    gain = plant.input_gain(xi, eta)
    u = (-plant.drift(xi, eta) + ctrl.reference.top_derivative(t) + vn + vl) / gain
    out = np.empty(state.size)
    out[: n - 1] = xi[1:]
    out[n - 1] = (
        plant.drift(xi, eta) + gain * u + plant.perturbation(xi, eta, t)
    )
    if state.size > n:
        out[n:] = plant.internal_rhs(xi, eta)
    return out, u, vn, vl


def _rk4_step(
    plant: PlantSpec,
    ctrl: RedesignController,
    t: float,
    state: np.ndarray,
    h: float,
) -> np.ndarray:
    k1 = _closed_loop_rhs(plant, ctrl, t, state)[0]
    k2 = _closed_loop_rhs(plant, ctrl, t + 0.5 * h, state + 0.5 * h * k1)[0]
    k3 = _closed_loop_rhs(plant, ctrl, t + 0.5 * h, state + 0.5 * h * k2)[0]
    k4 = _closed_loop_rhs(plant, ctrl, t + h, state + h * k3)[0]
    return state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _inside_contract(
    state: np.ndarray,
    n_xi: int,
    domain: DomainSpec | None,
    iss: IssCertificate | None,
) -> str | None:
    """None when inside; otherwise which boundary was crossed."""
    if domain is not None and not domain.contains(state[:n_xi]):
        return "external"
    if iss is not None and state.size > n_xi and iss.value(state[n_xi:]) >= iss.c_r:
        return "internal"
    return None


def _bracket_exit(
    plant: PlantSpec,
    ctrl: RedesignController,
    t: float,
    state: np.ndarray,
    h: float,
    n_xi: int,
    domain: DomainSpec | None,
    iss: IssCertificate | None,
) -> tuple[float, np.ndarray, str]:
    """Bisect the substep length at which the contract region is left."""
    lo, hi = 0.0, h
    reason = _inside_contract(_rk4_step(plant, ctrl, t, state, h), n_xi, domain, iss)
    while hi - lo > _EXIT_BISECT_TOL:
        mid = 0.5 * (lo + hi)
        crossed = _inside_contract(
            _rk4_step(plant, ctrl, t, state, mid), n_xi, domain, iss
        )
        if crossed is None:
            lo = mid
        else:
            hi = mid
            reason = crossed
    crossing = 0.5 * (lo + hi)
    return t + crossing, _rk4_step(plant, ctrl, t, state, crossing), reason or "external"


def integrate(
    plant: PlantSpec,
    ctrl: RedesignController,
    ref: Reference | None,
    x0: tuple[np.ndarray, np.ndarray],
    cfg: SimConfig,
    domain: DomainSpec | None = None,
    iss: IssCertificate | None = None,
    level: TubeLevel | None = None,
) -> Trajectory:
    """Integrate the perturbed closed loop and record all monitor channels.

    ``ref`` must be the controller's reference (passing None uses it
    directly).  When ``domain`` is given, leaving it (or, with ``iss``,
    leaving the internal sublevel set) is located by bisection to 1e-9 s;
    the stop-and-report policy then truncates the run at the crossing, while
    the continue policy keeps integrating and only records the exit.  The
    ``nu`` channel is filled from ``level`` when provided, else NaN.
    """
    if ref is not None and ref is not ctrl.reference:
        raise ValueError("ref must match the controller's reference")
    ref = ctrl.reference
    xi0 = np.asarray(x0[0], dtype=float).reshape(plant.n_xi)
    eta0 = np.asarray(x0[1], dtype=float).reshape(plant.n_eta)
    if domain is not None and not domain.contains(xi0, closed=True):
        raise ValueError(f"initial external state {xi0} lies outside the closed domain")
    if iss is not None and plant.n_eta > 0 and iss.value(eta0) >= iss.c_r:
        warnings.warn(
            "initial internal state outside the certified sublevel set; "
            "the internal-boundedness guarantee does not apply",
            stacklevel=2,
        )

    if cfg.integrator == "rk4-fixed":
        times, states, controls, exit_info = _integrate_rk4(
            plant, ctrl, (xi0, eta0), cfg, domain, iss
        )
    else:
        times, states, controls, exit_info = _integrate_rk45(
            plant, ctrl, (xi0, eta0), cfg, domain, iss
        )

    n = plant.n_xi
    xi = states[:, :n]
    eta = states[:, n:]
    xi_d = np.array([desired_state(ref, t) for t in times])
    err = xi - xi_d
    v_n_vals = np.array([ctrl.nominal.value(e) for e in err])
    v_l_vals = np.array([v_redesign(ctrl, e) for e in err])
    big_v = np.einsum("ij,jk,ik->i", err, ctrl.lyap.P, err)
    if plant.n_eta > 0 and iss is not None:
        v_eta_vals = np.array([iss.value(e) for e in eta])
    else:
        v_eta_vals = np.full(times.size, math.nan)
    if level is not None:
        nu_vals = np.asarray(level.value(times), dtype=float)
    else:
        nu_vals = np.full(times.size, math.nan)
    return Trajectory(
        times=times,
        xi=xi,
        eta=eta,
        xi_d=xi_d,
        u=controls,
        v_n_history=v_n_vals,
        v_l_history=v_l_vals,
        V_N_history=big_v,
        V_eta_history=v_eta_vals,
        nu_history=nu_vals,
        exit=exit_info,
    )


def _integrate_rk4(plant, ctrl, x0, cfg, domain, iss):
    n_xi = plant.n_xi
    h = cfg.step
    n_steps = max(1, int(round(cfg.t_end / h)))
    state = np.concatenate(x0)
    times = [0.0]
    states = [state.copy()]
    controls = []
    exit_info: DomainExit | None = None
    stop = cfg.domain_exit_policy == "stop-and-report"
    for k in range(n_steps):
        t = k * h
        _, u, _, _ = _closed_loop_rhs(plant, ctrl, t, state)
        controls.append(u)
        new_state = _rk4_step(plant, ctrl, t, state, h)
        if not np.all(np.isfinite(new_state)):
            raise IntegrationError(f"non-finite state at t = {t + h}")
        crossed = _inside_contract(new_state, n_xi, domain, iss)
        if crossed is not None and exit_info is None:
            t_exit, state_exit, reason = _bracket_exit(
                plant, ctrl, t, state, h, n_xi, domain, iss
            )
            exit_info = DomainExit(time=t_exit, reason=reason)
            if stop:
                times.append(t_exit)
                states.append(state_exit)
                controls.append(_closed_loop_rhs(plant, ctrl, t_exit, state_exit)[1])
                break
        state = new_state
        times.append((k + 1) * h)
        states.append(state.copy())
    else:
        controls.append(_closed_loop_rhs(plant, ctrl, times[-1], state)[1])
    if len(controls) < len(times):  # loop broke at an exit
        pass
    return (
        np.array(times),
        np.array(states),
        np.array(controls),
        exit_info,
    )


def _integrate_rk45(plant, ctrl, x0, cfg, domain, iss):
    from scipy.integrate import solve_ivp

    n_xi = plant.n_xi
    state0 = np.concatenate(x0)
    n_steps = max(1, int(round(cfg.t_end / cfg.step)))
    t_eval = np.arange(n_steps + 1) * cfg.step
    sol = solve_ivp(
        lambda t, z: _closed_loop_rhs(plant, ctrl, t, z)[0],
        (0.0, float(t_eval[-1])),
        state0,
        method="RK45",
        rtol=cfg.rtol,
        atol=cfg.atol,
        t_eval=t_eval,
        dense_output=True,
    )
    if not sol.success:
        raise IntegrationError(f"adaptive integration failed: {sol.message}")
    states = sol.y.T
    if not np.all(np.isfinite(states)):
        raise IntegrationError("non-finite state in adaptive integration")
    times = sol.t
    exit_info: DomainExit | None = None
    cut = times.size
    for i in range(times.size):
        crossed = _inside_contract(states[i], n_xi, domain, iss)
        if crossed is not None:
            lo = times[i - 1] if i > 0 else 0.0
            hi = times[i]
            reason = crossed
            while hi - lo > _EXIT_BISECT_TOL:
                mid = 0.5 * (lo + hi)
                mid_cross = _inside_contract(sol.sol(mid), n_xi, domain, iss)
                if mid_cross is None:
                    lo = mid
                else:
                    hi = mid
                    reason = mid_cross
            t_exit = 0.5 * (lo + hi)
            exit_info = DomainExit(time=t_exit, reason=reason)
            if cfg.domain_exit_policy == "stop-and-report":
                cut = i
                times = np.append(times[:cut], t_exit)
                states = np.vstack([states[:cut], sol.sol(t_exit)])
            break
    controls = np.array(
        [_closed_loop_rhs(plant, ctrl, t, z)[1] for t, z in zip(times, states)]
    )
    return times, states, controls, exit_info


def boundary_initial_states(section: TubeSection, count: int) -> list[np.ndarray]:
    """Equally spread points on the section boundary (exact level members)."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    if section.level <= 0.0:
        raise ValueError("the section is degenerate (level 0); no boundary to sample")
    directions = _unit_directions(section.dim, count)
    eigenvalues, eigenvectors = np.linalg.eigh(section.P)
    inv_sqrt = eigenvectors @ np.diag(1.0 / np.sqrt(eigenvalues)) @ eigenvectors.T
    scale = math.sqrt(section.level)
    return [section.center + scale * (inv_sqrt @ d) for d in directions]


def measure_ultimate_bound(traj: Trajectory, r_inf: float) -> float | None:
    """Earliest grid time after which the tracking error stays within r_inf.

    None when even the final sample violates the bound.
    """
    if r_inf <= 0.0:
        raise ValueError(f"r_inf must be positive, got {r_inf}")
    err = np.linalg.norm(traj.tracking_error, axis=1)
    violating = np.flatnonzero(err > r_inf)
    if violating.size == 0:
        return 0.0
    last = violating[-1]
    if last == traj.times.size - 1:
        return None
    return float(traj.times[last + 1])


@dataclass(frozen=True)
class InternalMonitorReport:
    satisfied: bool
    bound: float
    max_v_eta: float
    r_m: float
    exited: bool
    exit_time: float | None


def monitor_internal(
    traj: Trajectory, iss: IssCertificate, tol: float = 1e-8
) -> InternalMonitorReport:
    """Check the internal Lyapunov value against its worst-case envelope.

    The envelope is max(V_eta at start, alpha2(gamma(r_m))) with r_m the
    largest external norm along the run; exceeding c_r flags an exit from
    the certified sublevel set.
    """
    if traj.eta.shape[1] < 1:
        raise ValueError("the trajectory has no internal state to monitor")
    r_m = float(np.max(np.linalg.norm(traj.xi, axis=1)))
    bound = max(float(traj.V_eta_history[0]), iss.alpha2(iss.gamma(r_m)))
    max_v = float(np.max(traj.V_eta_history))
    exits = np.flatnonzero(traj.V_eta_history >= iss.c_r)
    return InternalMonitorReport(
        satisfied=bool(max_v <= bound + tol),
        bound=bound,
        max_v_eta=max_v,
        r_m=r_m,
        exited=exits.size > 0,
        exit_time=float(traj.times[exits[0]]) if exits.size else None,
    )


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """One row per grid point: t, xi, eta, u, v_N, v_L, V_N, nu, V_eta."""
    n = traj.xi.shape[1]
    m = traj.eta.shape[1]
    header = (
        ["t"]
        + [f"xi_{i + 1}" for i in range(n)]
        + [f"eta_{j + 1}" for j in range(m)]
        + ["u", "v_N", "v_L", "V_N", "nu", "V_eta"]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(traj.times.size):
            row = (
                [traj.times[i]]
                + list(traj.xi[i])
                + list(traj.eta[i])
                + [
                    traj.u[i],
                    traj.v_n_history[i],
                    traj.v_l_history[i],
                    traj.V_N_history[i],
                    traj.nu_history[i],
                    traj.V_eta_history[i],
                ]
            )
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
