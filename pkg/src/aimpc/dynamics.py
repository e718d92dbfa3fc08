"""Vehicle models for the ego and neighboring vehicle (NV).

Both models are linear time-invariant:

* ego: ``x = [s, v, a, l, r_l]``, ``u = [u_a, u_l]``; a first-order lag on
  longitudinal acceleration and a critically damped second-order lateral
  response to an integer lane command.
* NV: ``x = [s, v, a]``, ``u = [u]``; the longitudinal block only.

Lateral position ``l`` is measured in lane indices (ramp = 0, highway right
lane = 1).
"""

from dataclasses import dataclass, astuple

import numpy as np
from scipy.linalg import expm

from ._validation import check_finite_array, check_positive

EGO_STATE_NAMES = ("s", "v", "a", "l", "r_l")
NV_STATE_NAMES = ("s", "v", "a")


@dataclass(frozen=True)
class ModelParams:
    tau: float = 0.275
    omega_n: float = 1.091
    zeta: float = 1.0
    K: float = 1.0

    def __post_init__(self):
        for name in ("tau", "omega_n", "zeta", "K"):
            check_positive(getattr(self, name), name)


@dataclass(frozen=True)
class EgoState:
    s: float = 0.0
    v: float = 0.0
    a: float = 0.0
    l: float = 0.0
    r_l: float = 0.0

    def as_array(self):
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x):
        x = check_finite_array(x, "ego state", shape=(5,))
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class EgoControl:
    u_a: float = 0.0
    u_l: int = 0

    def as_array(self):
        return np.array([self.u_a, self.u_l], dtype=float)


@dataclass(frozen=True)
class NvState:
    s: float = 0.0
    v: float = 0.0
    a: float = 0.0

    def as_array(self):
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x):
        x = check_finite_array(x, "NV state", shape=(3,))
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class NvControl:
    u: float = 0.0

    def as_array(self):
        return np.array([self.u], dtype=float)


@dataclass(frozen=True)
class DiscreteModel:
    A_d: np.ndarray
    B_d: np.ndarray
    Ts: float

    @property
    def nx(self):
        return self.A_d.shape[0]

    @property
    def nu(self):
        return self.B_d.shape[1]


def ego_continuous(params=None):
    """Continuous-time ``(A, B)`` of the 5-state ego model."""
    p = params or ModelParams()
    A = np.zeros((5, 5))
    B = np.zeros((5, 2))
    A[0, 1] = 1.0
    A[1, 2] = 1.0
    A[2, 2] = -1.0 / p.tau
    A[3, 4] = 1.0
    A[4, 3] = -p.omega_n**2
    A[4, 4] = -2.0 * p.zeta * p.omega_n
    B[2, 0] = 1.0 / p.tau
    B[4, 1] = p.K * p.omega_n**2
    return A, B


def nv_continuous(tau=0.275):
    """Continuous-time ``(A, B)`` of the 3-state NV model."""
    tau = check_positive(tau, "tau")
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0 / tau]])
    B = np.array([[0.0], [0.0], [1.0 / tau]])
    return A, B


def discretize(A, B, Ts):
    """Zero-order-hold discretization.

    Uses the exponential of the augmented matrix ``[[A, B], [0, 0]] * Ts``,
    whose top blocks are ``exp(A Ts)`` and ``int_0^Ts exp(A t) dt B``.
    """
    A = check_finite_array(A, "A", ndim=2)
    B = check_finite_array(B, "B")
    if B.ndim == 1:
        B = B[:, None]
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"A must be square, got {A.shape}")
    if B.shape[0] != n:
        raise ValueError(f"B has {B.shape[0]} rows, A has {n}")
    Ts = float(Ts)
    if not np.isfinite(Ts) or Ts < 0:
        raise ValueError(f"Ts must be finite and >= 0, got {Ts!r}")
    m = B.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    E = expm(aug * Ts)
    return DiscreteModel(A_d=E[:n, :n], B_d=E[:n, n:], Ts=Ts)


def ego_model(Ts=0.4, params=None):
    return discretize(*ego_continuous(params), Ts)


def nv_model(Ts=0.4, tau=0.275):
    return discretize(*nv_continuous(tau), Ts)


def step(model, x, u):
    """One discrete step ``A_d x + B_d u``; accepts arrays or state dataclasses."""
    state_cls = type(x) if isinstance(x, (EgoState, NvState)) else None
    xa = x.as_array() if state_cls else np.asarray(x, dtype=float)
    ua = u.as_array() if hasattr(u, "as_array") else np.atleast_1d(np.asarray(u, dtype=float))
    if xa.shape != (model.nx,):
        raise ValueError(f"state has shape {xa.shape}, model expects ({model.nx},)")
    if ua.shape != (model.nu,):
        raise ValueError(f"control has shape {ua.shape}, model expects ({model.nu},)")
    xn = model.A_d @ xa + model.B_d @ ua
    return state_cls.from_array(xn) if state_cls else xn


def simulate(model, x0, controls):
    """Roll ``model`` forward over a sequence of controls; returns ``(len+1, nx)``."""
    x = np.asarray(x0, dtype=float)
    out = [x]
    for u in controls:
        x = step(model, x, u)
        out.append(x)
    return np.array(out)
