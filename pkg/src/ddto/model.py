"""Dynamical-system representations used by the trajectory solvers.

Discrete affine systems for the convex methods, continuous nonlinear fields
with path constraints for the sequential convex method, plus the augmented
(time-dilated, constraint-integral) field and its RK4 shooting map.

All continuous-time functions are batched: states have shape ``(..., n_x)``
and inputs ``(..., n_u)``; Jacobians have shape ``(..., rows, cols)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class PropagationError(FloatingPointError):
    """Non-finite values appeared during numerical integration."""


# --------------------------------------------------------------------------
# discrete affine systems


@dataclass(frozen=True)
class DiscreteAffineSystem:
    """x_{k+1} = A x_k + B u_k + c."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        c = np.asarray(self.c, dtype=float).ravel()
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or c.shape != (n,):
            raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} c{c.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def step(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float) + self.c

    def rollout(self, x0, U) -> np.ndarray:
        """States x_1..x_{K+1} for inputs u_1..u_K (rows of U)."""
        X = [np.asarray(x0, dtype=float)]
        for u in np.atleast_2d(U):
            X.append(self.step(X[-1], u))
        return np.array(X)


def double_integrator_discrete(dt: float, a) -> DiscreteAffineSystem:
    """Exact zero-order-hold discretization of a unit-mass 3-D point under gravity ``a``."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    a = np.asarray(a, dtype=float).ravel()
    d = a.size
    I = np.eye(d)
    A = np.block([[I, dt * I], [np.zeros((d, d)), I]])
    B = np.vstack([0.5 * dt ** 2 * I, dt * I])
    c = np.concatenate([0.5 * dt ** 2 * a, dt * a])
    return DiscreteAffineSystem(A, B, c)


def augment_cumulative_step(step: Callable, stage_cost: Callable) -> Callable:
    """Wrap ``step(x, u)`` to carry a running cost: ``((x, th), u) -> (step(x, u), th + l(x, u))``.

    The augmented state is the flat vector ``(x, th)``.
    """

    def aug(xt, u):
        xt = np.asarray(xt, dtype=float)
        x, th = xt[:-1], xt[-1]
        return np.append(step(x, u), th + float(stage_cost(x, u)))

    return aug


# --------------------------------------------------------------------------
# continuous systems


def _zeros_like_batch(x, u, rows):
    return np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (rows,))


@dataclass(frozen=True)
class ContinuousSystem:
    """x' = F(x, u) with inequality paths g(x, u) <= 0 and equality paths h(x, u) = 0.

    ``g``/``h`` return all components stacked on the last axis; ``dg``/``dh``
    return ``(d/dx, d/du)`` with shapes ``(..., n_g, n_x)`` and ``(..., n_g, n_u)``.
    """

    n_x: int
    n_u: int
    field: Callable
    jacobian_x: Callable
    jacobian_u: Callable
    n_g: int = 0
    g: Callable | None = None
    dg: Callable | None = None
    n_h: int = 0
    h: Callable | None = None
    dh: Callable | None = None

    def violation_rate(self, x, u) -> np.ndarray:
        """sum max(0, g)^2 + sum h^2 (batched)."""
        out = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]))
        if self.n_g:
            out = out + np.sum(np.maximum(self.g(x, u), 0.0) ** 2, axis=-1)
        if self.n_h:
            out = out + np.sum(self.h(x, u) ** 2, axis=-1)
        return out

    def violation_rate_grad(self, x, u):
        gx = _zeros_like_batch(x, u, self.n_x)
        gu = _zeros_like_batch(x, u, self.n_u)
        if self.n_g:
            w = 2.0 * np.maximum(self.g(x, u), 0.0)
            Dx, Du = self.dg(x, u)
            gx = gx + np.einsum("...i,...ij->...j", w, Dx)
            gu = gu + np.einsum("...i,...ij->...j", w, Du)
        if self.n_h:
            w = 2.0 * self.h(x, u)
            Dx, Du = self.dh(x, u)
            gx = gx + np.einsum("...i,...ij->...j", w, Dx)
            gu = gu + np.einsum("...i,...ij->...j", w, Du)
        return gx, gu


def scale_constraints(sys: ContinuousSystem, w_g=None, w_h=None) -> ContinuousSystem:
    """Same system with path constraints multiplied by positive weights.

    The feasible set is unchanged; only the integrand of the violation
    integral (and therefore how tightly a fixed budget bounds it) changes.
    """
    from dataclasses import replace

    kw = {}
    if sys.n_g and w_g is not None:
        wg = np.broadcast_to(np.asarray(w_g, dtype=float), (sys.n_g,)).copy()
        if np.any(wg <= 0):
            raise ValueError("constraint weights must be positive")
        g0, dg0 = sys.g, sys.dg
        kw["g"] = lambda x, u: wg * g0(x, u)
        kw["dg"] = lambda x, u: tuple(wg[:, None] * D for D in dg0(x, u))
    if sys.n_h and w_h is not None:
        wh = np.broadcast_to(np.asarray(w_h, dtype=float), (sys.n_h,)).copy()
        h0, dh0 = sys.h, sys.dh
        kw["h"] = lambda x, u: wh * h0(x, u)
        kw["dh"] = lambda x, u: tuple(wh[:, None] * D for D in dh0(x, u))
    return replace(sys, **kw)


def double_integrator_continuous(a, c_d: float = 0.0) -> ContinuousSystem:
    """r' = v, v' = u - c_d |v| v + a; no path constraints."""
    a = np.asarray(a, dtype=float)
    d = a.size

    def F(x, u):
        v = x[..., d:2 * d]
        return np.concatenate([v, u - c_d * np.linalg.norm(v, axis=-1, keepdims=True) * v + a], axis=-1)

    def Fx(x, u):
        v = x[..., d:2 * d]
        J = np.zeros(x.shape[:-1] + (2 * d, 2 * d))
        J[..., :d, d:] = np.eye(d)
        J[..., d:, d:] = -c_d * _drag_jac(v)
        return J

    def Fu(x, u):
        J = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (2 * d, d))
        J[..., d:, :] = np.eye(d)
        return J

    return ContinuousSystem(2 * d, d, F, Fx, Fu)


def _drag_jac(v):
    """d(|v| v)/dv = |v| I + v v'/|v| (zero at v = 0)."""
    nv = np.linalg.norm(v, axis=-1)
    safe = np.where(nv > 0, nv, 1.0)
    outer = np.einsum("...i,...j->...ij", v, v) / safe[..., None, None]
    return nv[..., None, None] * np.eye(v.shape[-1]) + np.where((nv > 0)[..., None, None], outer, 0.0)


def quadrotor_system(c_d: float, a, v_max: float, u_max: float, u_min: float,
                     delta_max_deg: float, e=(0.0, 0.0, 1.0), obstacles=()) -> ContinuousSystem:
    """Quadrotor with quadratic drag and running thrust cost.

    State ``(r, v, theta)`` in R^7 with ``theta' = |u|^2``; input ``u`` in R^3.
    ``obstacles`` is a sequence of ``(H, q)`` with keep-out ``|H (r - q)| >= 1``.
    Path constraints, in order: one per obstacle, speed, thrust upper, thrust
    lower, pointing (quadratic form), and ``e'u >= 0``.
    """
    a = np.asarray(a, dtype=float)
    e = np.asarray(e, dtype=float)
    e = e / np.linalg.norm(e)
    obs = [(np.asarray(H, dtype=float), np.asarray(q, dtype=float)) for H, q in obstacles]
    sec2 = 1.0 / np.cos(np.deg2rad(delta_max_deg)) ** 2
    n_obs = len(obs)
    n_g = n_obs + 5

    def F(x, u):
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        v = np.broadcast_to(x[..., 3:6], batch + (3,))
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        thdot = np.broadcast_to(np.sum(u * u, axis=-1, keepdims=True), batch + (1,))
        vdot = u - c_d * nv * v + a
        return np.concatenate([v, vdot, thdot], axis=-1)

    def Fx(x, u):
        J = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (7, 7))
        J[..., 0:3, 3:6] = np.eye(3)
        J[..., 3:6, 3:6] = -c_d * _drag_jac(x[..., 3:6])
        return J

    def Fu(x, u):
        J = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (7, 3))
        J[..., 3:6, :] = np.eye(3)
        J[..., 6, :] = 2.0 * u
        return J

    def g(x, u):
        r, v = x[..., 0:3], x[..., 3:6]
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        out = np.empty(shape + (n_g,))
        for i, (H, q) in enumerate(obs):
            d = (r - q) @ H.T
            out[..., i] = 1.0 - np.sum(d * d, axis=-1)
        uu = np.sum(u * u, axis=-1)
        eu = u @ e
        out[..., n_obs + 0] = np.sum(v * v, axis=-1) - v_max ** 2
        out[..., n_obs + 1] = uu - u_max ** 2
        out[..., n_obs + 2] = u_min ** 2 - uu
        out[..., n_obs + 3] = uu - sec2 * eu ** 2
        out[..., n_obs + 4] = -eu
        return out

    def dg(x, u):
        r, v = x[..., 0:3], x[..., 3:6]
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        Dx = np.zeros(shape + (n_g, 7))
        Du = np.zeros(shape + (n_g, 3))
        for i, (H, q) in enumerate(obs):
            Dx[..., i, 0:3] = -2.0 * (r - q) @ (H.T @ H)
        eu = (u @ e)[..., None]
        Dx[..., n_obs + 0, 3:6] = 2.0 * v
        Du[..., n_obs + 1, :] = 2.0 * u
        Du[..., n_obs + 2, :] = -2.0 * u
        Du[..., n_obs + 3, :] = 2.0 * u - 2.0 * sec2 * eu * e
        Du[..., n_obs + 4, :] = -e
        return Dx, Du

    return ContinuousSystem(7, 3, F, Fx, Fu, n_g, g, dg)


# --------------------------------------------------------------------------
# augmented (dilated, constraint-integral) field


@dataclass(frozen=True)
class AugmentedState:
    """Physical state plus constraint-violation integral ``y`` and physical time ``t``."""

    x: np.ndarray
    y: float = 0.0
    t: float = 0.0

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.x, dtype=float), [self.y, self.t]])

    @classmethod
    def from_vector(cls, v) -> "AugmentedState":
        v = np.asarray(v, dtype=float)
        return cls(v[:-2].copy(), float(v[-2]), float(v[-1]))


@dataclass(frozen=True)
class AugmentedInput:
    """Physical input plus dilation factor ``s`` (seconds per unit normalized time)."""

    u: np.ndarray
    s: float

    def vector(self) -> np.ndarray:
        return np.append(np.asarray(self.u, dtype=float), self.s)

    @classmethod
    def from_vector(cls, v) -> "AugmentedInput":
        v = np.asarray(v, dtype=float)
        return cls(v[:-1].copy(), float(v[-1]))


def _as_vec(v):
    if isinstance(v, (AugmentedState, AugmentedInput)):
        return v.vector()
    return np.asarray(v, dtype=float)


def augmented_ct_field(sys: ContinuousSystem, xt, ut) -> np.ndarray:
    """s * (F(x, u), sum max(0, g)^2 + sum h^2, 1) for augmented state/input (batched)."""
    xt, ut = _as_vec(xt), _as_vec(ut)
    x, u, s = xt[..., :sys.n_x], ut[..., :sys.n_u], ut[..., -1:]
    F = sys.field(x, u)
    P = sys.violation_rate(x, u)[..., None]
    one = np.ones_like(P)
    return s * np.concatenate([F, P, one], axis=-1)


def augmented_ct_jacobians(sys: ContinuousSystem, xt, ut):
    """Jacobians of :func:`augmented_ct_field` w.r.t. augmented state and input."""
    xt, ut = _as_vec(xt), _as_vec(ut)
    nx, nu = sys.n_x, sys.n_u
    x, u, s = xt[..., :nx], ut[..., :nu], ut[..., -1]
    batch = np.broadcast_shapes(xt.shape[:-1], ut.shape[:-1])
    Ax = np.zeros(batch + (nx + 2, nx + 2))
    Bu = np.zeros(batch + (nx + 2, nu + 1))
    Px, Pu = sys.violation_rate_grad(x, u)
    sb = s[..., None, None]
    Ax[..., :nx, :nx] = sb * sys.jacobian_x(x, u)
    Ax[..., nx, :nx] = s[..., None] * Px
    Bu[..., :nx, :nu] = sb * sys.jacobian_u(x, u)
    Bu[..., nx, :nu] = s[..., None] * Pu
    Bu[..., :nx, nu] = sys.field(x, u)
    Bu[..., nx, nu] = sys.violation_rate(x, u)
    Bu[..., nx + 1, nu] = 1.0
    return Ax, Bu


# --------------------------------------------------------------------------
# RK4 shooting


def _check_finite(v):
    if not np.all(np.isfinite(v)):
        raise PropagationError("non-finite state during integration")


def rk4(f: Callable, x0, duration: float = 1.0, substeps: int = 10) -> np.ndarray:
    """Classical RK4 for ``x' = f(x)`` over ``[0, duration]`` (batched in x)."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = np.array(x0, dtype=float)
    h = duration / substeps
    for _ in range(substeps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(x)
    return x


def multiple_shooting_step(field: Callable, xt, ut, substeps: int = 10, duration: float = 1.0) -> np.ndarray:
    """Integrate ``x' = field(x, u)`` under zero-order hold ``u`` over one interval."""
    ut = _as_vec(ut)
    return rk4(lambda x: field(x, ut), _as_vec(xt), duration, substeps)


def shooting_with_jacobians(sys: ContinuousSystem, xt, ut, substeps: int = 10, duration: float = 1.0):
    """Propagate the augmented field and its variational equations together.

    Returns ``(x_next, Phi, Gamma)`` where ``Phi = d x_next / d xt`` and
    ``Gamma = d x_next / d ut``. Because the sensitivities are advanced by the
    same RK4 stages, they are the exact derivatives of the discrete map.
    """
    xt, ut = _as_vec(xt), _as_vec(ut)
    nxa, nua = xt.shape[-1], ut.shape[-1]
    batch = np.broadcast_shapes(xt.shape[:-1], ut.shape[:-1])
    x = np.broadcast_to(xt, batch + (nxa,)).copy()
    P = np.broadcast_to(np.eye(nxa), batch + (nxa, nxa)).copy()
    Q = np.zeros(batch + (nxa, nua))
    h = duration / substeps

    def rhs(x, P, Q):
        Ax, Bu = augmented_ct_jacobians(sys, x, ut)
        return augmented_ct_field(sys, x, ut), Ax @ P, Ax @ Q + Bu

    for _ in range(substeps):
        k1 = rhs(x, P, Q)
        k2 = rhs(x + 0.5 * h * k1[0], P + 0.5 * h * k1[1], Q + 0.5 * h * k1[2])
        k3 = rhs(x + 0.5 * h * k2[0], P + 0.5 * h * k2[1], Q + 0.5 * h * k2[2])
        k4 = rhs(x + h * k3[0], P + h * k3[1], Q + h * k3[2])
        x = x + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        P = P + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Q = Q + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        _check_finite(x)
    _check_finite(P)
    _check_finite(Q)
    return x, P, Q


def dilated_discrete_step(sys: ContinuousSystem, x, u, s: float, substeps: int = 10) -> np.ndarray:
    """Integrate ``s * F(x, u)`` over one unit of normalized time."""
    if s <= 0:
        raise ValueError("dilation factor must be positive")
    u = np.asarray(u, dtype=float)
    return rk4(lambda z: s * sys.field(z, u), np.asarray(x, dtype=float), 1.0, substeps)
