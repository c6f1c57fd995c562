"""Saturated robust tracking controller around a linear nominal feedback.

The nominal part places the error dynamics with a gain vector and certifies
them with a quadratic Lyapunov function obtained from a dense Lyapunov-
equation solve.  The robust part adds a saturated term that dominates any
disturbance below the asserted bound while keeping the control continuous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ClassKFunction, PlantSpec, Reference, desired_state, quadratic_classk

__all__ = [
    "ErrorBounds",
    "NominalFeedback",
    "QuadraticLyapunov",
    "RedesignController",
    "SynthesisError",
    "classk_bounds",
    "control",
    "solve_lyapunov",
    "v_nominal",
    "v_redesign",
    "v_n_dot",
    "w",
]


class SynthesisError(ValueError):
    """Controller synthesis failed (e.g. the closed-loop matrix is not Hurwitz)."""


def brunovsky_pair(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integrator-chain matrices: A shifts components up, B injects into the last."""
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    return a, b


@dataclass(frozen=True)
class NominalFeedback:
    """Linear nominal feedback -k^T error on the integrator chain.

    Construction fails unless the closed-loop matrix A - B k^T is Hurwitz.
    """

    k: np.ndarray

    def __post_init__(self) -> None:
        k = np.asarray(self.k, dtype=float).reshape(-1)
        if k.size < 1:
            raise SynthesisError("gain vector must be nonempty")
        object.__setattr__(self, "k", k)
        eigs = np.linalg.eigvals(self.closed_loop_matrix())
        if np.max(eigs.real) >= 0.0:
            raise SynthesisError(
                f"closed-loop matrix is not Hurwitz (eigenvalues {eigs})"
            )

    @property
    def n_xi(self) -> int:
        return self.k.size

    def closed_loop_matrix(self) -> np.ndarray:
        a, b = brunovsky_pair(self.n_xi)
        return a - np.outer(b, self.k)

    def value(self, xi_bar: np.ndarray) -> float:
        return float(-self.k @ np.asarray(xi_bar, dtype=float))


@dataclass(frozen=True)
class QuadraticLyapunov:
    """V(e) = e^T P e together with the right-hand side Q of its defining equation."""

    P: np.ndarray
    Q: np.ndarray
    lambda_min: float = field(init=False)
    lambda_max: float = field(init=False)
    q_min: float = field(init=False)
    P_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        p = np.asarray(self.P, dtype=float)
        q = np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "P", p)
        object.__setattr__(self, "Q", q)
        p_eigs = np.linalg.eigvalsh(p)
        q_eigs = np.linalg.eigvalsh(q)
        if p_eigs[0] <= 0.0:
            raise SynthesisError(f"P is not positive definite (eigenvalues {p_eigs})")
        if q_eigs[0] <= 0.0:
            raise SynthesisError(f"Q is not positive definite (eigenvalues {q_eigs})")
        object.__setattr__(self, "lambda_min", float(p_eigs[0]))
        object.__setattr__(self, "lambda_max", float(p_eigs[-1]))
        object.__setattr__(self, "q_min", float(q_eigs[0]))
        object.__setattr__(self, "P_inv", np.linalg.inv(p))

    @property
    def n_xi(self) -> int:
        return self.P.shape[0]

    def value(self, xi_bar: np.ndarray) -> float:
        e = np.asarray(xi_bar, dtype=float)
        return float(e @ self.P @ e)

    def gradient(self, xi_bar: np.ndarray) -> np.ndarray:
        return 2.0 * (self.P @ np.asarray(xi_bar, dtype=float))


def solve_lyapunov(k: np.ndarray, Q: np.ndarray | None = None) -> QuadraticLyapunov:
    """Solve Abar^T P + P Abar = -Q for the closed-loop matrix of gain k.

    Dense Kronecker solve: vec(Abar^T P + P Abar) is linear in vec(P), so a
    single n^2 x n^2 system yields P, which is then symmetrised.  Q defaults
    to the identity.
    """
    nominal = NominalFeedback(k=np.asarray(k, dtype=float))
    n = nominal.n_xi
    if Q is None:
        q = np.eye(n)
    else:
        q = np.asarray(Q, dtype=float)
        if q.shape != (n, n):
            raise SynthesisError(f"Q must be {n}x{n}, got {q.shape}")
    a_bar = nominal.closed_loop_matrix()
    eye = np.eye(n)
    # Column-major vec: vec(A^T P) = (I kron A^T) vec(P), vec(P A) = (A^T kron I) vec(P).
    system = np.kron(eye, a_bar.T) + np.kron(a_bar.T, eye)
    vec_p = np.linalg.solve(system, -q.reshape(-1, order="F"))
    p = vec_p.reshape(n, n, order="F")
    p = 0.5 * (p + p.T)
    residual = np.max(np.abs(a_bar.T @ p + p @ a_bar + q))
    if residual > 1e-10:
        raise SynthesisError(f"Lyapunov residual {residual} exceeds 1e-10")
    return QuadraticLyapunov(P=p, Q=q)


def w(lyap: QuadraticLyapunov, xi_bar: np.ndarray) -> float:
    """Gradient of V along the input direction: 2 (P e) last component."""
    e = np.asarray(xi_bar, dtype=float)
    return 2.0 * float((lyap.P @ e)[-1])


@dataclass(frozen=True)
class ErrorBounds:
    """Class-K envelopes of the error Lyapunov function and its decay rate.

    ``quadratic`` carries (c1, c2, c3) when every bound is c_i * s**2, which
    unlocks closed-form tube levels downstream.
    """

    alpha1: ClassKFunction
    alpha2: ClassKFunction
    alpha3: ClassKFunction
    quadratic: tuple[float, float, float] | None = None


def classk_bounds(lyap: QuadraticLyapunov) -> ErrorBounds:
    """Quadratic envelopes lambda_min(P) s^2 <= V <= lambda_max(P) s^2, decay lambda_min(Q) s^2."""
    return ErrorBounds(
        alpha1=quadratic_classk(lyap.lambda_min),
        alpha2=quadratic_classk(lyap.lambda_max),
        alpha3=quadratic_classk(lyap.q_min),
        quadratic=(lyap.lambda_min, lyap.lambda_max, lyap.q_min),
    )


@dataclass(frozen=True)
class RedesignController:
    """Nominal linear feedback plus the saturated disturbance-dominating term.

    ``rho`` must dominate the asserted disturbance bound.  ``mu`` is the
    saturation boundary-layer width; ``discontinuous=True`` replaces the
    saturation by its sign-function limit (``mu`` is then ignored by the
    robust term).
    """

    nominal: NominalFeedback
    lyap: QuadraticLyapunov
    reference: Reference
    rho: float
    mu: float
    discontinuous: bool = False

    def __post_init__(self) -> None:
        if self.rho < 0.0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        if not self.discontinuous and self.mu <= 0.0:
            raise ValueError(f"mu must be positive (got {self.mu}) unless discontinuous")
        if self.lyap.n_xi != self.nominal.n_xi:
            raise ValueError("gain vector and Lyapunov matrix dimensions differ")
        if self.reference.n_xi != self.nominal.n_xi:
            raise ValueError("reference order and gain dimension differ")

    def error(self, xi: np.ndarray, t: float) -> np.ndarray:
        return np.asarray(xi, dtype=float) - desired_state(self.reference, t)

    def bounds(self) -> ErrorBounds:
        return classk_bounds(self.lyap)


def v_nominal(ctrl: RedesignController, xi_bar: np.ndarray) -> float:
    return ctrl.nominal.value(xi_bar)


def v_redesign(ctrl: RedesignController, xi_bar: np.ndarray) -> float:
    """Saturated robust term -rho * sat(rho/mu * w); sign(w) in discontinuous mode."""
    w_val = w(ctrl.lyap, xi_bar)
    if ctrl.discontinuous:
        return -ctrl.rho * float(np.sign(w_val))
    arg = ctrl.rho * w_val / ctrl.mu
    return -ctrl.rho * max(-1.0, min(1.0, arg))


def control(
    ctrl: RedesignController,
    plant: PlantSpec,
    xi: np.ndarray,
    eta: np.ndarray,
    t: float,
) -> float:
    """Feedback-linearising control with the robust redesign term added."""
    xi_bar = ctrl.error(xi, t)
    v = ctrl.nominal.value(xi_bar) + v_redesign(ctrl, xi_bar)
    gain = plant.input_gain(xi, eta)
    return (-plant.drift(xi, eta) + ctrl.reference.top_derivative(t) + v) / gain


def error_rhs(
    ctrl: RedesignController,
    plant: PlantSpec,
    xi: np.ndarray,
    eta: np.ndarray,
    t: float,
) -> np.ndarray:
    """Closed-loop error derivative: chain shift plus controller and disturbance."""
    xi = np.asarray(xi, dtype=float)
    xi_bar = ctrl.error(xi, t)
    out = np.empty(xi_bar.size)
    out[:-1] = xi_bar[1:]
    out[-1] = (
        ctrl.nominal.value(xi_bar)
        + v_redesign(ctrl, xi_bar)
        + plant.perturbation(xi, eta, t)
    )
    return out


def v_n_dot(
    ctrl: RedesignController,
    plant: PlantSpec,
    xi: np.ndarray,
    eta: np.ndarray,
    t: float,
) -> float:
    """Analytic time derivative of V along the perturbed closed loop.

    Chain rule on the error vector field; used by monitors and property
    checks instead of finite-differencing sampled values.
    """
    xi_bar = ctrl.error(xi, t)
    return float(ctrl.lyap.gradient(xi_bar) @ error_rhs(ctrl, plant, xi, eta, t))
