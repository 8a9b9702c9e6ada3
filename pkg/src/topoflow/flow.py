"""Noising path, regression targets, losses and ODE integrators.

Action sequences are corrupted along the curved path

    a_tau = tau * a + sqrt(1 - tau^2) * eps,

which starts at pure noise (tau = 0) and ends on the data (tau = 1).  The
velocity field learned by the model is regressed onto the path derivative,
which for this schedule has the closed form implemented by
:func:`ot_target`.  Integrating the learned field from tau = 0 to 1 turns
noise back into an action sequence.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc

EPS_TAU = 1e-3

TAU_ALPHA = 1.5
TAU_BETA = 1.0


@dataclass(frozen=True)
class NoisySample:
    a_tau: np.ndarray
    eps: np.ndarray
    tau: float


@dataclass(frozen=True)
class LossWeights:
    lambda_task: float = 0.1
    lambda_smooth: float = 0.05
    lambda_topo: float = 0.2

    def __post_init__(self):
        for name in ("lambda_task", "lambda_smooth", "lambda_topo"):
            if getattr(self, name) < 0.0:
                raise ValueError("%s must be non-negative" % name)


@dataclass(frozen=True)
class IntegratorSpec:
    method: str = "rk4"
    n_steps: int = 4

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError("unknown integrator method %r" % (self.method,))
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def dt(self):
        return 1.0 / self.n_steps

    @property
    def fn_evals(self):
        return self.n_steps * (4 if self.method == "rk4" else 1)


def sample_tau(rng, eps_tau=EPS_TAU, alpha=TAU_ALPHA, beta=TAU_BETA):
    """Draw tau from Beta(alpha, beta), clamped away from the tau = 1 endpoint."""
    return min(rng.beta(alpha, beta), 1.0 - eps_tau)


def noise_sample(a, tau, rng=None, eps=None):
    """Corrupt an action array along the path; either rng or eps is given."""
    a = np.asarray(a, dtype=np.float64)
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau=%r outside [0, 1]" % (tau,))
    if eps is None:
        if rng is None:
            raise ValueError("provide either rng or eps")
        eps = rng.standard_normal(a.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != a.shape:
            raise ValueError(
                "eps shape %s does not match a shape %s" % (eps.shape, a.shape)
            )
    a_tau = tau * a + math.sqrt(1.0 - tau * tau) * eps
    return NoisySample(a_tau=a_tau, eps=eps, tau=float(tau))


def ot_target(a, a_tau, tau, eps_tau=EPS_TAU):
    """Path derivative d(a_tau)/d(tau) expressed through (a, a_tau, tau).

    Algebraically equal to a - tau / sqrt(1 - tau^2) * eps.  The factor
    tau / (1 - tau^2) diverges at tau = 1, so tau must stay below
    1 - eps_tau.
    """
    if not 0.0 <= tau <= 1.0 - eps_tau:
        raise ValueError(
            "tau=%r outside [0, %r]; target is singular near tau=1"
            % (tau, 1.0 - eps_tau)
        )
    a = np.asarray(a, dtype=np.float64)
    a_tau = np.asarray(a_tau, dtype=np.float64)
    return a - (tau / (1.0 - tau * tau)) * (a_tau - tau * a)


def _as_tensor(x):
    if isinstance(x, nc.Tensor):
        return x
    return nc.Tensor(np.asarray(x, dtype=np.float64))


def loss_flow(v, u, s, jitter):
    """Mask-weighted quadratic loss between predicted and target velocity.

    v, u : (H, d_a) predicted and target velocities.
    s : (H, H) symmetric position-coupling matrix (may be a Tensor so the
        mask receives gradients).
    jitter : non-negative float, the diagonal shift that made the lifted
        norm positive definite.  Treated as a constant.

    Computes sum_{s,t} S[s,t] <d_s, d_t> + jitter * ||d||^2 with d = v - u,
    which equals d' (S kron I + jitter I) d on the flattened difference.
    """
    v, u, s = _as_tensor(v), _as_tensor(u), _as_tensor(s)
    if v.shape != u.shape:
        raise nc.ShapeError("v shape %s != u shape %s" % (v.shape, u.shape))
    if s.shape != (v.shape[0], v.shape[0]):
        raise nc.ShapeError(
            "coupling shape %s does not match %d positions" % (s.shape, v.shape[0])
        )
    if jitter < 0.0:
        raise ValueError("jitter must be non-negative")
    d = nc.sub(v, u)
    gram = nc.matmul(d, nc.transpose(d))
    out = nc.sum_all(nc.mul(s, gram))
    if jitter != 0.0:
        out = nc.add(out, nc.scale(nc.sum_all(nc.square(d)), jitter))
    return out


def loss_task(v, a, a_tau, tau):
    """MSE between the one-jump reconstruction a_tau + (1 - tau) v and a."""
    v, a, a_tau = _as_tensor(v), _as_tensor(a), _as_tensor(a_tau)
    if not v.shape == a.shape == a_tau.shape:
        raise nc.ShapeError(
            "shapes differ: v %s, a %s, a_tau %s" % (v.shape, a.shape, a_tau.shape)
        )
    recon = nc.add(a_tau, nc.scale(v, 1.0 - tau))
    diff = nc.sub(recon, a)
    return nc.scale(nc.sum_all(nc.square(diff)), 1.0 / diff.size)


def loss_smooth(v):
    """Mean squared second temporal difference of the velocity rows."""
    v = _as_tensor(v)
    h = v.shape[0]
    if h < 3:
        return nc.Tensor(0.0)
    left = nc.narrow(v, 0, 0, h - 2)
    mid = nc.narrow(v, 0, 1, h - 2)
    right = nc.narrow(v, 0, 2, h - 2)
    d2 = nc.add(nc.sub(right, nc.scale(mid, 2.0)), left)
    return nc.scale(nc.sum_all(nc.square(d2)), 1.0 / d2.size)


def loss_topo(x, basis, tol=1e-8):
    """Squared norm of the component of x inside the sector spanned by basis.

    basis : (m, n) array with orthonormal rows; x flattens to length n.
    """
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim != 2:
        raise ValueError("basis must be 2-D")
    gram = basis @ basis.T
    if np.abs(gram - np.eye(basis.shape[0])).max() > tol:
        raise ValueError("basis rows are not orthonormal")
    x = _as_tensor(x)
    flat = nc.reshape(x, (x.size, 1))
    if x.size != basis.shape[1]:
        raise nc.ShapeError(
            "x has %d entries but basis expects %d" % (x.size, basis.shape[1])
        )
    proj = nc.matmul(nc.Tensor(basis), flat)
    return nc.sum_all(nc.square(proj))


def integrate(field, x0, spec):
    """Integrate dx/dt = field(x, t) over t in [0, 1].

    Returns (x_final, fn_evals) where fn_evals counts actual calls into
    ``field``; Euler uses one per step, classic RK4 four.
    """
    x = np.array(x0, dtype=np.float64)
    dt = spec.dt
    evals = 0
    for step in range(spec.n_steps):
        t = step * dt
        if spec.method == "euler":
            x = x + dt * field(x, t)
            evals += 1
        else:
            k1 = field(x, t)
            k2 = field(x + 0.5 * dt * k1, t + 0.5 * dt)
            k3 = field(x + 0.5 * dt * k2, t + 0.5 * dt)
            k4 = field(x + dt * k3, t + dt)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            evals += 4
    return x, evals
