"""Small residual-form test systems with cached numba kernels.

Each system follows the integrator's ``args = (p,)`` convention and is
dtype-generic so the complex-step sensitivity residual works on it.
"""
import numpy as np
from numba import njit

from trailer_uq.integrator import ResidualSystem, _advance


@njit(cache=True)
def _no_guard(y):
    return True


# m x' = -lam m x + m u     p = (lam, m)

@njit(cache=True)
def decay_residual(t, y, yp, u, args, out):
    p = args[0]
    out[0] = p[1] * yp[0] + p[0] * p[1] * y[0] - p[1] * u[0]


@njit(cache=True)
def decay_jacobian(t, y, yp, u, args, J, M):
    p = args[0]
    J[0, 0] = p[0] * p[1]
    M[0, 0] = p[1]


@njit(cache=True)
def decay_mass(t, y, args, M):
    M[0, 0] = args[0][1]


@njit(cache=True)
def decay_advance(args, seg_t, seg_u, work, opts, outs):
    return _advance(decay_residual, decay_jacobian, decay_mass, _no_guard, args, seg_t, seg_u, work, opts, outs)


def decay_system(lam=1.0, mass=1.0):
    """``mass * x' = -lam * mass * x + mass * u``."""
    return ResidualSystem(decay_residual, decay_jacobian, decay_mass, _no_guard,
                          (np.array([lam, mass], dtype=float),), 1, 1, 1, ("x",), kernel=decay_advance)


# x' = p0      p = (p0,)

@njit(cache=True)
def ramp_residual(t, y, yp, u, args, out):
    out[0] = yp[0] - args[0][0]


@njit(cache=True)
def ramp_jacobian(t, y, yp, u, args, J, M):
    J[0, 0] = 0.0
    M[0, 0] = 1.0


@njit(cache=True)
def ramp_mass(t, y, args, M):
    M[0, 0] = 1.0


@njit(cache=True)
def ramp_advance(args, seg_t, seg_u, work, opts, outs):
    return _advance(ramp_residual, ramp_jacobian, ramp_mass, _no_guard, args, seg_t, seg_u, work, opts, outs)


def ramp_system(rate=1.0):
    """``x' = rate``."""
    return ResidualSystem(ramp_residual, ramp_jacobian, ramp_mass, _no_guard,
                          (np.array([rate], dtype=float),), 1, 1, 1, ("x",), kernel=ramp_advance)


# Robertson chemical kinetics     p = (k1, k2, k3)

@njit(cache=True)
def robertson_residual(t, y, yp, u, args, out):
    k1, k2, k3 = args[0][0], args[0][1], args[0][2]
    out[0] = yp[0] - (-k1 * y[0] + k2 * y[1] * y[2])
    out[1] = yp[1] - (k1 * y[0] - k2 * y[1] * y[2] - k3 * y[1] * y[1])
    out[2] = yp[2] - k3 * y[1] * y[1]


@njit(cache=True)
def robertson_jacobian(t, y, yp, u, args, J, M):
    k1, k2, k3 = args[0][0], args[0][1], args[0][2]
    J[0, 0] = k1
    J[0, 1] = -k2 * y[2]
    J[0, 2] = -k2 * y[1]
    J[1, 0] = -k1
    J[1, 1] = k2 * y[2] + 2.0 * k3 * y[1]
    J[1, 2] = k2 * y[1]
    J[2, 0] = 0.0
    J[2, 1] = -2.0 * k3 * y[1]
    J[2, 2] = 0.0
    for i in range(3):
        for j in range(3):
            M[i, j] = 1.0 if i == j else 0.0


@njit(cache=True)
def robertson_mass(t, y, args, M):
    for i in range(3):
        for j in range(3):
            M[i, j] = 1.0 if i == j else 0.0


@njit(cache=True)
def robertson_advance(args, seg_t, seg_u, work, opts, outs):
    return _advance(robertson_residual, robertson_jacobian, robertson_mass, _no_guard, args,
                    seg_t, seg_u, work, opts, outs)


def robertson_system():
    return ResidualSystem(robertson_residual, robertson_jacobian, robertson_mass, _no_guard,
                          (np.array([0.04, 1e4, 3e7]),), 3, 1, 1, ("y1", "y2", "y3"), kernel=robertson_advance)
