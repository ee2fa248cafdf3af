"""8-DOF tractor-semitrailer dynamics in implicit form.

The vehicle is two sprung bodies (tractor, semitrailer) that roll and pitch
about axes through the hitch point on their yawing, unsprung frames. Both
units share the hitch velocity ``(v_x, v_y)``, expressed in the tractor's
unsprung frame, so the fifth-wheel kinematic constraint holds by
construction. Equations of motion follow from Kane's method, which yields

    M(x, p) xdot = f(x, u, p, t),      F(x, xdot, u, p, t) = M xdot - f.

State vector layout (22 entries)::

    0  v_x       1  v_y       2  X_h       3  Y_h
    4  dphi_t    5  dtheta_t  6  dpsi_t    7  dphi_s   8  dtheta_s  9  dpsi_s
    10 phi_t     11 theta_t   12 psi_t     13 phi_s    14 theta_s   15 psi_s
    16..21 alpha (FL, FR, RL, RR, SL, SR)

Inputs are ``u = (delta_f, kappa_r)``: front steering angle and the slip
ratio commanded on the driven (tractor rear) axle.

The numerical kernels are written dtype-generic so the Jacobians can be
taken by complex-step differentiation of the very same code.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from numba import njit

from .integrator import ResidualSystem, _advance
from .params import INDEX, ParameterSet, param_indices

N_STATES = 22
N_SPEEDS = 8
N_INPUTS = 2

STATE_NAMES: tuple[str, ...] = (
    "v_x", "v_y", "X_h", "Y_h",
    "dphi_t", "dtheta_t", "dpsi_t", "dphi_s", "dtheta_s", "dpsi_s",
    "phi_t", "theta_t", "psi_t", "phi_s", "theta_s", "psi_s",
    "alpha_FL", "alpha_FR", "alpha_RL", "alpha_RR", "alpha_SL", "alpha_SR",
)
STATE_INDEX = {name: i for i, name in enumerate(STATE_NAMES)}
WHEELS = ("FL", "FR", "RL", "RR", "SL", "SR")
OUTPUT_NAMES = ("x_t", "y_t", "x_s", "y_s")

# state vector positions of the generalized speeds, in Kane order
SPEED_IDX = np.array([0, 1, 4, 5, 6, 7, 8, 9], dtype=np.int64)

V_EPS = 0.5         # [m/s] below this wheel speed slip relaxation is regularized
TAU_LOW_SPEED = 0.1  # [s] slip decay time constant in the regularized regime
DELTA_MAX = 0.6     # [rad]
KAPPA_MAX = 0.1
COND_LIMIT = 1e12
_CS_STEP = 1e-30

# parameter vector positions (compile-time constants for the kernels)
_M_T, _M_S = INDEX["m_t"], INDEX["m_s"]
_H_T, _H_S = INDEX["h_t"], INDEX["h_s"]
_IXX_T, _IYY_T, _IZZ_T = INDEX["I_xx_t"], INDEX["I_yy_t"], INDEX["I_zz_t"]
_IXX_S, _IYY_S, _IZZ_S = INDEX["I_xx_s"], INDEX["I_yy_s"], INDEX["I_zz_s"]
_L_T, _L_S = INDEX["l_t"], INDEX["l_s"]
_A_F, _A_R, _A_S = INDEX["a_f"], INDEX["a_r"], INDEX["a_s"]
_T_W = INDEX["T_w"]
_K_RF, _K_RR, _K_RS = INDEX["k_roll_f"], INDEX["k_roll_r"], INDEX["k_roll_s"]
_C_RF, _C_RR, _C_RS = INDEX["c_roll_f"], INDEX["c_roll_r"], INDEX["c_roll_s"]
_K_PT, _K_PS = INDEX["k_pitch_t"], INDEX["k_pitch_s"]
_C_PT, _C_PS = INDEX["c_pitch_t"], INDEX["c_pitch_s"]
_K_H = INDEX["k_hitch"]
_C_KAPPA = INDEX["C_kappa"]
_C_AF, _C_AR, _C_AS = INDEX["C_alpha_f"], INDEX["C_alpha_r"], INDEX["C_alpha_s"]
_SIG_F, _SIG_R, _SIG_S = INDEX["sigma_f"], INDEX["sigma_r"], INDEX["sigma_s"]
_RHO = INDEX["rho"]
_CD_T, _CD_S = INDEX["c_D_t"], INDEX["c_D_s"]
_AF_T, _AF_S = INDEX["A_f_t"], INDEX["A_f_s"]
_C1, _C2 = INDEX["c1"], INDEX["c2"]
_G = INDEX["g"]


class DegenerateSpeedError(ValueError):
    """Wheel longitudinal speed too small for the slip relaxation equation."""


class SingularMassMatrixError(np.linalg.LinAlgError):
    pass


class RolloverError(RuntimeError):
    """Roll or pitch angle reached +-pi/2."""


# --------------------------------------------------------------------------
# force sub-models

@njit(cache=True)
def aero_resistance(v_r, rho, c_D, A_f):
    """Aerodynamic drag magnitude ``rho/2 * c_D * A_f * v_r**2`` [N]."""
    return 0.5 * rho * c_D * A_f * v_r * v_r


@njit(cache=True)
def rolling_resistance(F_z, v_x, c1, c2):
    """Rolling resistance ``(c1 + c2 v_x^2) F_z`` [N]."""
    return (c1 + c2 * v_x * v_x) * F_z


@njit(cache=True)
def tire_forces(kappa, alpha, C_kappa, C_alpha):
    """Linear tire: ``(C_kappa * kappa, C_alpha * alpha)``."""
    return C_kappa * kappa, C_alpha * alpha


@njit(cache=True)
def _slip_rate(alpha, vx, vy, sigma):
    if vx.real > V_EPS:
        return vx / sigma * (-np.arctan(vy / vx) - alpha)
    return -alpha / TAU_LOW_SPEED


def slip_angle_rate(alpha: float, v_wheel, sigma: float) -> float:
    """Time derivative of the lateral slip angle from first-order relaxation.

    ``v_wheel`` is the wheel velocity ``(v_x, v_y)`` in the wheel frame.
    """
    vx, vy = float(v_wheel[0]), float(v_wheel[1])
    if vx <= V_EPS:
        raise DegenerateSpeedError(
            f"wheel speed {vx:.3g} m/s is below v_eps = {V_EPS} m/s")
    return float(_slip_rate(alpha, vx, vy, sigma))


# --------------------------------------------------------------------------
# 3-vector helpers on tuples

@njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0])


@njit(cache=True)
def _add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


@njit(cache=True)
def _scale(s, a):
    return (s * a[0], s * a[1], s * a[2])


@njit(cache=True)
def _unit_kinematics(d, phi, theta, l, h, p_rate, q_rate, r_rate):
    """Frames of one unit, in the tractor yaw frame; ``d`` is yaw relative to the tractor."""
    cd, sd = np.cos(d), np.sin(d)
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    zero = 0.0 * cd
    one = zero + 1.0
    z = (zero, zero, one)
    e1 = (cd, sd, zero)
    ey = (-sd, cd, zero)
    e2 = _add(_scale(cf, ey), _scale(sf, z))
    b1 = _add(_add(_scale(ct, e1), _scale(sf * st, ey)), _scale(-cf * st, z))
    b3 = _add(_add(_scale(st, e1), _scale(-sf * ct, ey)), _scale(cf * ct, z))
    c = _add(_scale(l, b1), _scale(h, b3))
    omega = _add(_add(_scale(r_rate, z), _scale(p_rate, e1)), _scale(q_rate, e2))
    return z, e1, ey, e2, b1, b3, c, omega


@njit(cache=True)
def _inertia_apply(Ixx, Iyy, Izz, b1, b2, b3, v):
    return _add(_add(_scale(Ixx * _dot(b1, v), b1), _scale(Iyy * _dot(b2, v), b2)),
                _scale(Izz * _dot(b3, v), b3))


@njit(cache=True)
def _normal_loads(x, p, Fz):
    """Quasi-static wheel loads with roll/pitch load transfer; returns lifted-wheel count."""
    g = p[_G]
    W_t = p[_M_T] * g
    W_s = p[_M_S] * g
    a_f, a_r, a_s = p[_A_F], p[_A_R], p[_A_S]
    # trailer supported by its axle and the hitch
    dF_s = (p[_K_PS] * x[14] + p[_C_PS] * x[8]) / a_s
    F_s = W_s * p[_L_S] / a_s + dF_s
    F_h = W_s - F_s
    wb = a_f - a_r
    F_f = (W_t * (p[_L_T] - a_r) - F_h * a_r + p[_K_PT] * x[11] + p[_C_PT] * x[5]) / wb
    F_r = W_t + F_h - F_f
    tw = p[_T_W]
    M_f = p[_K_RF] * x[10] + p[_C_RF] * x[4]
    M_r = p[_K_RR] * x[10] + p[_C_RR] * x[4]
    M_s = p[_K_RS] * x[13] + p[_C_RS] * x[7]
    Fz[0] = 0.5 * F_f - M_f / tw
    Fz[1] = 0.5 * F_f + M_f / tw
    Fz[2] = 0.5 * F_r - M_r / tw
    Fz[3] = 0.5 * F_r + M_r / tw
    Fz[4] = 0.5 * F_s - M_s / tw
    Fz[5] = 0.5 * F_s + M_s / tw
    lifted = 0
    for i in range(6):
        if Fz[i].real < 0.0:
            Fz[i] = 0.0 * Fz[i]
            lifted += 1
    return lifted


@njit(cache=True)
def _wheel_forces(x, u, p, Fz, W):
    """Tire forces in each unit's yaw frame, ``W[i] = (Fx, Fy, x_w, y_w)``, plus slip rates.

    Returns the array of wheel contact speeds (vx, vy) in wheel frames as well.
    """
    vx_h, vy_h = x[0], x[1]
    d = x[15] - x[12]
    cd, sd = np.cos(d), np.sin(d)
    delta = u[0]
    cdel, sdel = np.cos(delta), np.sin(delta)
    half = 0.5 * p[_T_W]
    c1, c2 = p[_C1], p[_C2]
    Vw = np.empty((6, 2), dtype=x.dtype)
    for i in range(6):
        if i < 4:
            uh, vh, r = vx_h, vy_h, x[6]
            xw = p[_A_F] if i < 2 else p[_A_R]
        else:
            uh = vx_h * cd + vy_h * sd
            vh = -vx_h * sd + vy_h * cd
            r = x[9]
            xw = p[_A_S]
        yw = half if i % 2 == 0 else -half
        vx = uh - r * yw
        vy = vh + r * xw
        if i < 2:
            vxw = vx * cdel + vy * sdel
            vyw = -vx * sdel + vy * cdel
        else:
            vxw, vyw = vx, vy
        Vw[i, 0] = vxw
        Vw[i, 1] = vyw
        if i < 2:
            C_a = p[_C_AF]
        elif i < 4:
            C_a = p[_C_AR]
        else:
            C_a = p[_C_AS]
        kappa = u[1] if (i == 2 or i == 3) else 0.0
        Fxw, Fyw = tire_forces(kappa, x[16 + i], p[_C_KAPPA], C_a)
        Fxw = Fxw - rolling_resistance(Fz[i], vxw, c1, c2) * np.tanh(vxw / V_EPS)
        if i < 2:
            Fx = Fxw * cdel - Fyw * sdel
            Fy = Fxw * sdel + Fyw * cdel
        else:
            Fx, Fy = Fxw, Fyw
        W[i, 0] = Fx
        W[i, 1] = Fy
        W[i, 2] = xw
        W[i, 3] = yw
    return Vw


@njit(cache=True)
def _evaluate(x, u, p, M8, f):
    """Fill the 8x8 generalized mass matrix and the full 22-vector ``f``."""
    dt = x.dtype
    for a in range(8):
        for b in range(8):
            M8[a, b] = 0.0
    Q = np.zeros(8, dtype=dt)
    vx, vy = x[0], x[1]
    r_t = x[6]
    g = p[_G]
    a_h = (-r_t * vy, r_t * vx, 0.0 * vx)
    d_rel = x[15] - x[12]
    zero = 0.0 * vx

    V = np.empty((5, 3), dtype=dt)
    Wv = np.empty((5, 3), dtype=dt)
    kidx = np.empty(5, dtype=np.int64)
    for unit in range(2):
        if unit == 0:
            d = zero
            phi, theta = x[10], x[11]
            pr, qr, rr = x[4], x[5], x[6]
            m, l, h = p[_M_T], p[_L_T], p[_H_T]
            Ixx, Iyy, Izz = p[_IXX_T], p[_IYY_T], p[_IZZ_T]
            cDA = p[_CD_T] * p[_AF_T]
            kidx[0], kidx[1], kidx[2], kidx[3], kidx[4] = 0, 1, 2, 3, 4
        else:
            d = d_rel
            phi, theta = x[13], x[14]
            pr, qr, rr = x[7], x[8], x[9]
            m, l, h = p[_M_S], p[_L_S], p[_H_S]
            Ixx, Iyy, Izz = p[_IXX_S], p[_IYY_S], p[_IZZ_S]
            cDA = p[_CD_S] * p[_AF_S]
            kidx[0], kidx[1], kidx[2], kidx[3], kidx[4] = 0, 1, 5, 6, 7
        z, e1, ey, e2, b1, b3, c, omega = _unit_kinematics(d, phi, theta, l, h, pr, qr, rr)
        vp = _cross(e1, c)
        vq = _cross(e2, c)
        vr = _cross(z, c)
        # partial velocities (rows) and partial angular velocities
        V[0, 0], V[0, 1], V[0, 2] = 1.0, 0.0, 0.0
        V[1, 0], V[1, 1], V[1, 2] = 0.0, 1.0, 0.0
        V[2, 0], V[2, 1], V[2, 2] = vp[0], vp[1], vp[2]
        V[3, 0], V[3, 1], V[3, 2] = vq[0], vq[1], vq[2]
        V[4, 0], V[4, 1], V[4, 2] = vr[0], vr[1], vr[2]
        for j in range(3):
            Wv[0, j] = 0.0
            Wv[1, j] = 0.0
            Wv[2, j] = e1[j]
            Wv[3, j] = e2[j]
            Wv[4, j] = z[j]
        # velocity-product remainders of the COG and angular accelerations
        e1dot = _scale(rr, ey)
        e2dot = _cross(_add(_scale(rr, z), _scale(pr, e1)), e2)
        alpha_rem = _add(_scale(pr, e1dot), _scale(qr, e2dot))
        a_rem = _add(_add(a_h, _cross(alpha_rem, c)), _cross(omega, _cross(omega, c)))
        H = _inertia_apply(Ixx, Iyy, Izz, b1, e2, b3, omega)
        gyro = _add(_inertia_apply(Ixx, Iyy, Izz, b1, e2, b3, alpha_rem), _cross(omega, H))
        # applied forces at the COG: gravity and longitudinal drag
        v_r = vx * np.cos(d) + vy * np.sin(d)
        R_a = aero_resistance(v_r, p[_RHO], 1.0, cDA) * np.tanh(v_r / V_EPS)
        F = (-R_a * e1[0] - m * a_rem[0], -R_a * e1[1] - m * a_rem[1], -m * g - m * a_rem[2])
        for a in range(5):
            Va = (V[a, 0], V[a, 1], V[a, 2])
            Wa = (Wv[a, 0], Wv[a, 1], Wv[a, 2])
            IWa = _inertia_apply(Ixx, Iyy, Izz, b1, e2, b3, Wa)
            Q[kidx[a]] += _dot(Va, F) - _dot(Wa, gyro)
            for b in range(5):
                Vb = (V[b, 0], V[b, 1], V[b, 2])
                Wb = (Wv[b, 0], Wv[b, 1], Wv[b, 2])
                M8[kidx[a], kidx[b]] += m * _dot(Va, Vb) + _dot(Wb, IWa)
        # pitch spring preload carries the static moment of the unit's weight about the hitch
        Q[kidx[3]] -= m * g * l

    # suspension, hitch roll coupling
    phi_t, theta_t, phi_s, theta_s = x[10], x[11], x[13], x[14]
    hitch = p[_K_H] * (phi_t - phi_s)
    Q[2] += -(p[_K_RF] + p[_K_RR]) * phi_t - (p[_C_RF] + p[_C_RR]) * x[4] - hitch
    Q[3] += -p[_K_PT] * theta_t - p[_C_PT] * x[5]
    Q[5] += -p[_K_RS] * phi_s - p[_C_RS] * x[7] + hitch
    Q[6] += -p[_K_PS] * theta_s - p[_C_PS] * x[8]

    # tires
    Fz = np.empty(6, dtype=dt)
    _normal_loads(x, p, Fz)
    W = np.empty((6, 4), dtype=dt)
    Vw = _wheel_forces(x, u, p, Fz, W)
    cd, sd = np.cos(d_rel), np.sin(d_rel)
    for i in range(6):
        Fx, Fy, xw, yw = W[i, 0], W[i, 1], W[i, 2], W[i, 3]
        if i < 4:
            Q[0] += Fx
            Q[1] += Fy
            Q[4] += xw * Fy - yw * Fx
        else:
            Q[0] += Fx * cd - Fy * sd
            Q[1] += Fx * sd + Fy * cd
            Q[7] += xw * Fy - yw * Fx

    for a in range(8):
        f[SPEED_IDX[a]] = Q[a]
    cpsi, spsi = np.cos(x[12]), np.sin(x[12])
    f[2] = vx * cpsi - vy * spsi
    f[3] = vx * spsi + vy * cpsi
    for k in range(6):
        f[10 + k] = x[4 + k]
    for i in range(6):
        if i < 2:
            sig = p[_SIG_F]
        elif i < 4:
            sig = p[_SIG_R]
        else:
            sig = p[_SIG_S]
        f[16 + i] = sig * _slip_rate(x[16 + i], Vw[i, 0], Vw[i, 1], sig)


@njit(cache=True)
def _slip_sigma(p, i):
    if i < 2:
        return p[_SIG_F]
    if i < 4:
        return p[_SIG_R]
    return p[_SIG_S]


@njit(cache=True)
def residual_kernel(x, xd, u, p, out):
    M8 = np.empty((8, 8), dtype=x.dtype)
    f = np.empty(N_STATES, dtype=x.dtype)
    _evaluate(x, u, p, M8, f)
    for i in range(N_STATES):
        out[i] = -f[i]
    for a in range(8):
        acc = 0.0 * out[0]
        for b in range(8):
            acc += M8[a, b] * xd[SPEED_IDX[b]]
        out[SPEED_IDX[a]] += acc
    out[2] += xd[2]
    out[3] += xd[3]
    for k in range(10, 16):
        out[k] += xd[k]
    for i in range(6):
        out[16 + i] += _slip_sigma(p, i) * xd[16 + i]


@njit(cache=True)
def mass_kernel(x, p, M):
    M8 = np.empty((8, 8), dtype=x.dtype)
    f = np.empty(N_STATES, dtype=x.dtype)
    u0 = np.zeros(2)
    _evaluate(x, u0, p, M8, f)
    for i in range(N_STATES):
        for j in range(N_STATES):
            M[i, j] = 0.0
    for a in range(8):
        for b in range(8):
            M[SPEED_IDX[a], SPEED_IDX[b]] = M8[a, b]
    M[2, 2] = 1.0
    M[3, 3] = 1.0
    for k in range(10, 16):
        M[k, k] = 1.0
    for i in range(6):
        M[16 + i, 16 + i] = _slip_sigma(p, i)


@njit(cache=True)
def rhs_kernel(x, u, p, f):
    M8 = np.empty((8, 8), dtype=x.dtype)
    _evaluate(x, u, p, M8, f)


@njit(cache=True)
def jac_x_kernel(x, xd, u, p, J):
    """Complex-step ``dF/dx``."""
    n = x.shape[0]
    xc = x.astype(np.complex128)
    xdc = xd.astype(np.complex128)
    pc = p.astype(np.complex128)
    out = np.empty(n, dtype=np.complex128)
    for j in range(n):
        xc[j] = x[j] + 1j * _CS_STEP
        residual_kernel(xc, xdc, u, pc, out)
        for i in range(n):
            J[i, j] = out[i].imag / _CS_STEP
        xc[j] = x[j]


@njit(cache=True)
def jac_p_kernel(x, xd, u, p, idx, Jp):
    """Complex-step ``dF/dp`` for the parameter positions in ``idx``."""
    n = x.shape[0]
    xc = x.astype(np.complex128)
    xdc = xd.astype(np.complex128)
    pc = p.astype(np.complex128)
    out = np.empty(n, dtype=np.complex128)
    for k in range(idx.shape[0]):
        j = idx[k]
        pc[j] = p[j] + 1j * _CS_STEP
        residual_kernel(xc, xdc, u, pc, out)
        for i in range(n):
            Jp[i, k] = out[i].imag / _CS_STEP
        pc[j] = p[j]


@njit(cache=True)
def cog_positions_kernel(x, p, out):
    """Global COG positions ``(x_t, y_t, x_s, y_s)``."""
    cpsi, spsi = np.cos(x[12]), np.sin(x[12])
    for unit in range(2):
        if unit == 0:
            _, _, _, _, _, _, c, _ = _unit_kinematics(0.0, x[10], x[11], p[_L_T], p[_H_T], 0.0, 0.0, 0.0)
        else:
            _, _, _, _, _, _, c, _ = _unit_kinematics(x[15] - x[12], x[13], x[14], p[_L_S], p[_H_S],
                                                      0.0, 0.0, 0.0)
        out[2 * unit] = x[2] + cpsi * c[0] - spsi * c[1]
        out[2 * unit + 1] = x[3] + spsi * c[0] + cpsi * c[1]


@njit(cache=True)
def cog_positions_batch(X, p, out):
    """``cog_positions_kernel`` over the rows of ``X``."""
    buf = np.empty(4)
    for k in range(X.shape[0]):
        cog_positions_kernel(X[k], p, buf)
        for j in range(4):
            out[k, j] = buf[j]


# --------------------------------------------------------------------------
# Python-facing API

@dataclasses.dataclass
class VehicleState:
    v_x: float = 0.0
    v_y: float = 0.0
    X_h: float = 0.0
    Y_h: float = 0.0
    dphi_t: float = 0.0
    dtheta_t: float = 0.0
    dpsi_t: float = 0.0
    dphi_s: float = 0.0
    dtheta_s: float = 0.0
    dpsi_s: float = 0.0
    phi_t: float = 0.0
    theta_t: float = 0.0
    psi_t: float = 0.0
    phi_s: float = 0.0
    theta_s: float = 0.0
    psi_s: float = 0.0
    alpha: tuple = (0.0,) * 6

    def to_array(self) -> np.ndarray:
        head = [getattr(self, name) for name in STATE_NAMES[:16]]
        return np.array(head + list(self.alpha), dtype=float)

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        kwargs = {name: float(x[i]) for i, name in enumerate(STATE_NAMES[:16])}
        return cls(alpha=tuple(float(a) for a in x[16:22]), **kwargs)


@dataclasses.dataclass(frozen=True)
class InputCommand:
    delta_f: float = 0.0
    kappa_r: float = 0.0

    def __post_init__(self):
        if abs(self.delta_f) > DELTA_MAX:
            raise ValueError(f"|delta_f| = {abs(self.delta_f):.3f} rad exceeds {DELTA_MAX} rad")
        if abs(self.kappa_r) > KAPPA_MAX:
            raise ValueError(f"kappa_r = {self.kappa_r} outside [-{KAPPA_MAX}, {KAPPA_MAX}]")

    def to_array(self) -> np.ndarray:
        return np.array([self.delta_f, self.kappa_r])


def straight_state(v_x: float, X_h: float = 0.0, Y_h: float = 0.0, psi: float = 0.0) -> np.ndarray:
    """Straight-line rolling state with both units aligned at heading ``psi``."""
    x = np.zeros(N_STATES)
    x[0] = v_x
    x[2], x[3] = X_h, Y_h
    x[12] = x[15] = psi
    return x


def _as_state(state) -> np.ndarray:
    if isinstance(state, VehicleState):
        return state.to_array()
    x = np.asarray(state, dtype=float)
    if x.shape != (N_STATES,):
        raise ValueError(f"state must have {N_STATES} entries, got shape {x.shape}")
    return x


def _as_input(u) -> np.ndarray:
    if isinstance(u, InputCommand):
        return u.to_array()
    return np.asarray(u, dtype=float).reshape(N_INPUTS)


def _as_params(p) -> np.ndarray:
    if isinstance(p, ParameterSet):
        return p.to_array()
    return np.asarray(p, dtype=float)


def _check_angles(x: np.ndarray) -> None:
    for k in (10, 11, 13, 14):
        if abs(x[k]) >= 0.5 * np.pi:
            raise RolloverError(f"{STATE_NAMES[k]} = {x[k]:.3f} rad reached pi/2")


def normal_loads(state, p) -> tuple[np.ndarray, np.ndarray]:
    """Per-wheel vertical loads ``F_z`` (FL, FR, RL, RR, SL, SR) and a lifted-wheel mask."""
    x = _as_state(state)
    Fz = np.empty(6)
    _normal_loads(x, _as_params(p), Fz)
    return Fz, Fz == 0.0


def mass_matrix(state, p) -> np.ndarray:
    x = _as_state(state)
    M = np.empty((N_STATES, N_STATES))
    mass_kernel(x, _as_params(p), M)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMassMatrixError(f"mass matrix condition estimate {cond:.3g} exceeds {COND_LIMIT:g}")
    return M


def rhs(state, u, p, t: float = 0.0) -> np.ndarray:
    x = _as_state(state)
    _check_angles(x)
    f = np.empty(N_STATES)
    rhs_kernel(x, _as_input(u), _as_params(p), f)
    return f


def residual(state, xdot, u, p, t: float = 0.0) -> np.ndarray:
    """Implicit residual ``F = M(x, p) xdot - f(x, u, p, t)``."""
    x = _as_state(state)
    _check_angles(x)
    out = np.empty(N_STATES)
    residual_kernel(x, np.asarray(xdot, dtype=float), _as_input(u), _as_params(p), out)
    return out


def state_derivative(state, u, p, t: float = 0.0) -> np.ndarray:
    """Explicit ``xdot = M^-1 f``."""
    return np.linalg.solve(mass_matrix(state, p), rhs(state, u, p, t))


def jacobians(state, xdot, u, p, t: float = 0.0, params=None):
    """``(dF/dx, dF/dxdot, dF/dp)``; ``params`` selects parameter columns by name (default all)."""
    x = _as_state(state)
    xd = np.asarray(xdot, dtype=float)
    uu = _as_input(u)
    pv = _as_params(p)
    Jx = np.empty((N_STATES, N_STATES))
    jac_x_kernel(x, xd, uu, pv, Jx)
    Jxd = np.empty((N_STATES, N_STATES))
    mass_kernel(x, pv, Jxd)
    idx = np.arange(pv.size, dtype=np.int64) if params is None else param_indices(params)
    Jp = np.empty((N_STATES, idx.size))
    jac_p_kernel(x, xd, uu, pv, idx, Jp)
    return Jx, Jxd, Jp


def cog_positions(state, p) -> np.ndarray:
    """``(x_t, y_t, x_s, y_s)`` for one state, or one row per state of a 2-D array."""
    arr = np.asarray(state, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != N_STATES:
            raise ValueError(f"states must have {N_STATES} columns")
        out = np.empty((arr.shape[0], 4))
        cog_positions_batch(np.ascontiguousarray(arr), _as_params(p), out)
        return out
    out = np.empty(4)
    cog_positions_kernel(_as_state(state), _as_params(p), out)
    return out


def mirror_state(state) -> np.ndarray:
    """Reflect a state through the x-z plane (left and right wheels swap)."""
    x = _as_state(state).copy()
    for k in (1, 3, 4, 6, 7, 9, 10, 12, 13, 15):
        x[k] = -x[k]
    a = -x[16:22]
    x[16:22] = a[[1, 0, 3, 2, 5, 4]]
    return x


# --------------------------------------------------------------------------
# integrator adapters; ``args`` is the 1-tuple ``(p,)``

@njit(cache=True)
def vehicle_residual(t, y, yp, u, args, out):
    residual_kernel(y, yp, u, args[0], out)


@njit(cache=True)
def vehicle_jacobian(t, y, yp, u, args, J, M):
    jac_x_kernel(y, yp, u, args[0], J)
    mass_kernel(y, args[0], M)


@njit(cache=True)
def vehicle_mass(t, y, args, M):
    mass_kernel(y, args[0], M)


@njit(cache=True)
def vehicle_guard(y):
    lim = 0.5 * np.pi
    return abs(y[10]) < lim and abs(y[11]) < lim and abs(y[13]) < lim and abs(y[14]) < lim


@njit(cache=True)
def vehicle_advance(args, seg_t, seg_u, work, opts, outs):
    return _advance(vehicle_residual, vehicle_jacobian, vehicle_mass, vehicle_guard, args,
                    seg_t, seg_u, work, opts, outs)


def vehicle_system(p):
    """The vehicle as a :class:`~trailer_uq.integrator.ResidualSystem`."""
    return ResidualSystem(vehicle_residual, vehicle_jacobian, vehicle_mass, vehicle_guard,
                          (np.ascontiguousarray(_as_params(p)),), N_STATES, 1, N_INPUTS, STATE_NAMES,
                          kernel=vehicle_advance)
